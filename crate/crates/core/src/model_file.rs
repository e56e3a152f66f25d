//! Self-describing JSON model files.
//!
//! A model file stores the model structure (kernel kind and task-matrix rank
//! of every term, optional noise rank), all parameters in flattening order,
//! the training observations with a SHA-256 checksum, the target scaling, the
//! random seed, and the wavelength grid the inputs live on. Loading rebuilds
//! the factorization from these fields, so predictions after a round trip are
//! bit-identical to predictions before saving.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TargetScaler;
use crate::error::{Error, Result};
use crate::kernels::{KernelKind, KernelSpec};
use crate::model::{FittedModel, Method, ModelConfig, Observation, ObservationSet, Term};
use crate::task_corr::TaskCorrMatrix;

pub const FORMAT: &str = "mtgp-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermShape {
    pub kernel: KernelKind,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingData {
    inputs: Vec<Vec<f64>>,
    /// `[input, task, target]`
    observations: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    method: Option<String>,
    num_tasks: usize,
    task_names: Vec<String>,
    wavelengths: Vec<f64>,
    terms: Vec<TermShape>,
    noise_rank: Option<usize>,
    parameter_names: Vec<String>,
    parameters: Vec<f64>,
    target_scaling: TargetScaler,
    seed: u64,
    jitter: f64,
    nlml: f64,
    training_checksum: String,
    training: TrainingData,
}

/// A fitted model together with everything needed to use it on new spectra.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: FittedModel,
    pub scaler: TargetScaler,
    pub method: Option<Method>,
    pub task_names: Vec<String>,
    pub wavelengths: Vec<f64>,
}

fn checksum(data: &ObservationSet) -> String {
    let mut h = Sha256::new();
    h.update((data.inputs().nrows() as u64).to_le_bytes());
    h.update((data.inputs().ncols() as u64).to_le_bytes());
    for r in data.inputs().row_iter() {
        for v in r.iter() {
            h.update(v.to_le_bytes());
        }
    }
    for o in data.observations() {
        h.update((o.input as u64).to_le_bytes());
        h.update((o.task as u64).to_le_bytes());
        h.update(o.target.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl SavedModel {
    /// Predictive mean and latent variance in original target units.
    pub fn predict(&self, xs: &DMatrix<f64>, task: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mean, var) = self.model.predict(xs, task)?;
        Ok((
            mean.iter().map(|v| self.scaler.inverse(task, *v)).collect(),
            var.iter()
                .map(|v| self.scaler.inverse_variance(task, *v))
                .collect(),
        ))
    }

    /// Task noise variance in original target units.
    pub fn noise_variance(&self, task: usize) -> f64 {
        self.scaler
            .inverse_variance(task, self.model.noise_variance(task))
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.task_names.iter().position(|n| n == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let cfg = self.model.config();
        let data = self.model.training_data();
        let doc = Document {
            format: FORMAT.into(),
            version: VERSION,
            method: self.method.map(|m| m.id()),
            num_tasks: cfg.num_tasks(),
            task_names: self.task_names.clone(),
            wavelengths: self.wavelengths.clone(),
            terms: cfg
                .terms
                .iter()
                .map(|t| TermShape {
                    kernel: t.kernel.kind,
                    rank: t.task_corr.rank(),
                })
                .collect(),
            noise_rank: cfg.noise_corr.as_ref().map(|n| n.rank()),
            parameter_names: cfg.param_names(),
            parameters: cfg.params(),
            target_scaling: self.scaler.clone(),
            seed: self.model.seed(),
            jitter: self.model.jitter(),
            nlml: self.model.nlml(),
            training_checksum: checksum(data),
            training: TrainingData {
                inputs: data
                    .inputs()
                    .row_iter()
                    .map(|r| r.iter().cloned().collect())
                    .collect(),
                observations: data
                    .observations()
                    .iter()
                    .map(|o| (o.input, o.task, o.target))
                    .collect(),
            },
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::ModelFile(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document =
            serde_json::from_str(text).map_err(|e| Error::ModelFile(e.to_string()))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported model format {} v{}",
                doc.format, doc.version
            )));
        }
        let m = doc.num_tasks;
        if doc.task_names.len() != m
            || doc.target_scaling.mean.len() != m
            || doc.target_scaling.std.len() != m
        {
            return Err(Error::ModelFile(
                "task metadata does not match num_tasks".into(),
            ));
        }
        let mut config = ModelConfig {
            terms: doc
                .terms
                .iter()
                .map(|t| Term {
                    task_corr: TaskCorrMatrix::zeros(m, t.rank),
                    kernel: KernelSpec {
                        kind: t.kernel,
                        log_hypers: vec![0.0; t.kernel.num_hypers()],
                    },
                })
                .collect(),
            noise_corr: doc.noise_rank.map(|k| TaskCorrMatrix::zeros(m, k)),
            task_noise_log: vec![0.0; m],
        };
        config
            .set_params(&doc.parameters)
            .map_err(|e| Error::ModelFile(e.to_string()))?;

        let n = doc.training.inputs.len();
        let d = doc.training.inputs.first().map_or(0, |r| r.len());
        if doc.training.inputs.iter().any(|r| r.len() != d) {
            return Err(Error::ModelFile("ragged training inputs".into()));
        }
        let inputs = DMatrix::from_fn(n, d, |i, j| doc.training.inputs[i][j]);
        let obs = doc
            .training
            .observations
            .iter()
            .map(|&(input, task, target)| Observation {
                input,
                task,
                target,
            })
            .collect();
        let data = ObservationSet::new(inputs, m, obs)?;
        if checksum(&data) != doc.training_checksum {
            return Err(Error::ModelFile("training data checksum mismatch".into()));
        }
        let method = doc.method.as_deref().map(str::parse).transpose()?;
        let model = FittedModel::condition(config, data, doc.seed)?;
        Ok(SavedModel {
            model,
            scaler: doc.target_scaling,
            method,
            task_names: doc.task_names,
            wavelengths: doc.wavelengths,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        SavedModel::from_json(&fs::read_to_string(path)?)
    }
}
