//! Versioned JSON checkpoints: network config, normalization statistics and
//! named flat parameter arrays with their shapes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::dataset::Normalizer;
use crate::net::{FearNetParams, NetConfig, NetError};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint schema version {0}")]
    UnsupportedSchema(u32),
    #[error("parameter {index}: expected `{expected}`, found `{found}`")]
    UnexpectedGroup { index: usize, expected: String, found: String },
    #[error("parameter `{name}`: shape {found:?}, expected {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("expected {expected} parameter arrays, found {found}")]
    GroupCount { expected: usize, found: usize },
    #[error("normalization width {found} does not match input width {expected}")]
    NormalizerWidth { expected: usize, found: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    /// The pipeline configuration the model was trained under.
    pub pipeline: PipelineConfig,
    /// Effective network configuration (input width and class count filled in).
    pub net: NetConfig,
    pub normalizer: Normalizer,
    pub best_epoch: usize,
    pub parameters: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(pipeline: &PipelineConfig, config: &NetConfig, params: &FearNetParams, normalizer: Normalizer, best_epoch: usize) -> Self {
        let parameters = params
            .groups(config)
            .into_iter()
            .map(|g| NamedArray { name: g.name.to_string(), shape: g.shape, values: g.data.to_vec() })
            .collect();
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config_hash: pipeline.hash(),
            pipeline: pipeline.clone(),
            net: config.clone(),
            normalizer,
            best_epoch,
            parameters,
        }
    }

    /// Rebuilds the parameter bundle, checking names, shapes and finiteness.
    pub fn params(&self) -> Result<FearNetParams, CheckpointError> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CheckpointError::UnsupportedSchema(self.schema_version));
        }
        self.net.validate()?;
        if self.normalizer.mean.len() != self.net.input_dim || self.normalizer.std.len() != self.net.input_dim {
            return Err(CheckpointError::NormalizerWidth { expected: self.net.input_dim, found: self.normalizer.mean.len() });
        }
        let mut params = FearNetParams::init(&self.net)?.zeros_like();
        let expected: Vec<(String, Vec<usize>)> =
            params.groups(&self.net).into_iter().map(|g| (g.name.to_string(), g.shape)).collect();
        if expected.len() != self.parameters.len() {
            return Err(CheckpointError::GroupCount { expected: expected.len(), found: self.parameters.len() });
        }
        for (index, ((name, shape), stored)) in expected.iter().zip(&self.parameters).enumerate() {
            if *name != stored.name {
                return Err(CheckpointError::UnexpectedGroup { index, expected: name.clone(), found: stored.name.clone() });
            }
            if *shape != stored.shape || stored.values.len() != shape.iter().product::<usize>() {
                return Err(CheckpointError::Shape { name: name.clone(), found: stored.shape.clone(), expected: shape.clone() });
            }
        }
        for (slot, stored) in params.groups_mut().into_iter().zip(&self.parameters) {
            slot.copy_from_slice(&stored.values);
        }
        params.check_shapes(&self.net)?;
        Ok(params)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), CheckpointError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, CheckpointError> {
        let c: Self = serde_json::from_reader(input)?;
        if c.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CheckpointError::UnsupportedSchema(c.schema_version));
        }
        Ok(c)
    }
}
