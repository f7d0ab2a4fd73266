//! Versioned JSON checkpoint of named parameter arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AdaptationModel, Architecture, ModelError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "implicit-align-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint {format} v{version}")]
    Version { format: String, version: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &AdaptationModel<S>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: model.architecture().clone(),
            params: model
                .params()
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.values().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn into_model<S: Scalar>(self) -> Result<AdaptationModel<S>, CheckpointError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                format: self.format,
                version: self.version,
            });
        }
        let tensors = self
            .params
            .into_iter()
            .map(|a| {
                let t = Tensor::new(a.shape, a.values.into_iter().map(S::of).collect())
                    .map_err(ModelError::from)?;
                Ok((a.name, t))
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(AdaptationModel::from_params(self.architecture, tensors)?)
    }
}

pub fn save_model<S: Scalar>(model: &AdaptationModel<S>, path: &Path) -> Result<(), CheckpointError> {
    let json = serde_json::to_string(&Checkpoint::from_model(model))?;
    fs::write(path, json).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<AdaptationModel<S>, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str::<Checkpoint>(&text)?.into_model()
}
