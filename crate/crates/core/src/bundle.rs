//! Self-describing JSON documents for fitted models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cigar::{cigar_predict_many, CigarModel};
use crate::error::{Error, Result};
use crate::gar::{gar_predict_many, GarModel};
use crate::hogp::{tgp_predict_many, PosteriorField, TgpModel};

pub const SCHEMA: &str = "mfgar-model/1";

/// A fitted model of any supported kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "lowercase")]
pub enum FittedModel {
    Gar(GarModel),
    Cigar(CigarModel),
    /// Scalar-weight autoregression, stored as a GAR model.
    Ar(GarModel),
    /// Tensor GP trained on the highest fidelity only.
    Hogp(TgpModel),
}

impl FittedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            FittedModel::Gar(_) => "gar",
            FittedModel::Cigar(_) => "cigar",
            FittedModel::Ar(_) => "ar",
            FittedModel::Hogp(_) => "hogp",
        }
    }

    pub fn predict_many(&self, x_star: &DMatrix<f64>) -> Result<Vec<PosteriorField>> {
        match self {
            FittedModel::Gar(m) | FittedModel::Ar(m) => gar_predict_many(m, x_star),
            FittedModel::Cigar(m) => cigar_predict_many(m, x_star),
            FittedModel::Hogp(m) => tgp_predict_many(m, x_star),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema: String,
    #[serde(flatten)]
    pub model: FittedModel,
}

impl ModelBundle {
    pub fn new(model: FittedModel) -> Self {
        Self { schema: SCHEMA.to_string(), model }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: ModelBundle = serde_json::from_str(text)?;
        if b.schema != SCHEMA {
            return Err(Error::InvalidParameter(format!("model schema {:?}, expected {SCHEMA:?}", b.schema)));
        }
        Ok(b)
    }
}
