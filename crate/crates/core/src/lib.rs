//! Multi-fidelity fusion with generalized autoregression over tensor-variate
//! Gaussian processes.

pub mod bundle;
pub mod cigar;
pub mod error;
pub mod gar;
pub mod hogp;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod tensalg;

pub use error::{Error, Result};
