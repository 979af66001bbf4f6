//! Kronecker and Tucker algebra on dense row-major tensors.

mod eigen;
mod tensor;

pub use eigen::{kron_quad_and_logdet, sym_eig, EigenFactors, KronSystem, SymEigen};
pub use tensor::{kron, kron_all, tucker_apply, DenseTensor, TuckerWeights};

pub(crate) use tensor::tucker_factor_grads;
