//! File-level run configuration. Every key is optional; command-line flags
//! override values read from the file.

use std::path::{Path, PathBuf};

use mtgp::data::DEFAULT_WATER_BANDS;
use mtgp::{Error, Result, SyntheticSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub samples: Option<usize>,
    pub primary_labels: Option<usize>,
    pub bands: Option<usize>,
    /// Off-diagonal entry of the first task matrix.
    pub coupling: Option<f64>,
    pub noise: Option<f64>,
}

impl SynthConfig {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        let mut s = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        if let Some(v) = self.samples {
            s.num_samples = v;
        }
        if let Some(v) = self.primary_labels {
            s.num_primary = v;
        }
        if let Some(v) = self.bands {
            s.num_bands = v;
        }
        if let Some(c) = self.coupling {
            s.p = vec![vec![1.0, c], vec![c, 1.0]];
        }
        if let Some(v) = self.noise {
            s.noise_variance = vec![v; s.num_tasks()];
        }
        s
    }

    fn merge(&mut self, o: SynthConfig) {
        self.samples = o.samples.or(self.samples);
        self.primary_labels = o.primary_labels.or(self.primary_labels);
        self.bands = o.bands.or(self.bands);
        self.coupling = o.coupling.or(self.coupling);
        self.noise = o.noise.or(self.noise);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub cube: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,

    pub method: Option<String>,
    pub methods: Option<Vec<String>>,
    pub primary: Option<String>,
    pub secondary: Option<Vec<String>>,
    pub tasks: Option<Vec<String>>,
    pub ranks: Option<Vec<usize>>,

    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub trials: Option<usize>,
    pub restarts: Option<usize>,
    pub max_iterations: Option<usize>,
    pub refit: Option<bool>,
    pub allow_partial: Option<bool>,
    pub with_noise: Option<bool>,

    pub water_bands: Option<Vec<(f64, f64)>>,
    pub keep_water_bands: Option<bool>,
    pub ndvi_red: Option<f64>,
    pub ndvi_nir: Option<f64>,
    pub ndvi_threshold: Option<f64>,
    pub no_mask: Option<bool>,

    pub synthetic: Option<SynthConfig>,
    pub quiet: Option<bool>,
    pub dry_run: Option<bool>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Overlays every value set in `o`.
    pub fn merge(&mut self, o: RunConfig) {
        macro_rules! take {
            ($($f:ident),*) => { $( if o.$f.is_some() { self.$f = o.$f; } )* };
        }
        take!(
            data,
            model,
            output,
            log,
            cube,
            sidecar,
            method,
            methods,
            primary,
            secondary,
            tasks,
            ranks,
            seed,
            jobs,
            trials,
            restarts,
            max_iterations,
            refit,
            allow_partial,
            with_noise,
            water_bands,
            keep_water_bands,
            ndvi_red,
            ndvi_nir,
            ndvi_threshold,
            no_mask,
            quiet,
            dry_run
        );
        if let Some(s) = o.synthetic {
            self.synthetic
                .get_or_insert_with(SynthConfig::default)
                .merge(s);
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }

    pub fn flag(v: Option<bool>) -> bool {
        v.unwrap_or(false)
    }

    pub fn water_bands(&self) -> Vec<(f64, f64)> {
        if Self::flag(self.keep_water_bands) {
            Vec::new()
        } else {
            self.water_bands
                .clone()
                .unwrap_or_else(|| DEFAULT_WATER_BANDS.to_vec())
        }
    }

    pub fn require<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        v.as_deref()
            .ok_or_else(|| Error::Config(format!("missing required setting `{what}`")))
    }
}
