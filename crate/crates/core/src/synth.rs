//! Synthetic two-term multitask data drawn from the composite-covariance prior.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SpectraTable;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::Cholesky;

/// Generator settings. Task 0 is the primary task (labelled on
/// `num_primary` randomly chosen samples); the other tasks are labelled on
/// every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub num_primary: usize,
    pub num_bands: usize,
    /// Task matrix of the first kernel.
    pub p: Vec<Vec<f64>>,
    /// Task matrix of the second kernel.
    pub q: Vec<Vec<f64>>,
    pub kernel1: KernelSpec,
    pub kernel2: KernelSpec,
    pub noise_variance: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Two tasks with 0.9 correlation through an SE term and −0.8 through an
    /// NN term; 100 samples, 10 primary labels, 5 bands.
    fn default() -> Self {
        SyntheticSpec {
            num_samples: 100,
            num_primary: 10,
            num_bands: 5,
            p: vec![vec![1.0, 0.9], vec![0.9, 1.0]],
            q: vec![vec![0.5, -0.4], vec![-0.4, 0.5]],
            kernel1: KernelSpec::se(1.0, 0.5),
            kernel2: KernelSpec::nn(1.0, 1.0),
            noise_variance: vec![0.01, 0.01],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_tasks(&self) -> usize {
        self.p.len()
    }

    fn matrix(rows: &[Vec<f64>], m: usize, name: &str) -> Result<DMatrix<f64>> {
        if rows.len() != m || rows.iter().any(|r| r.len() != m) {
            return Err(Error::Config(format!("{name} must be {m}x{m}")));
        }
        Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
    }

    /// Draws inputs uniformly in `[0, 1]` and targets from
    /// `N(0, P⊗K₁ + Q⊗K₂ + D⊗I)` over the full grid, then hides primary labels.
    pub fn generate(&self) -> Result<SpectraTable> {
        let m = self.num_tasks();
        let n = self.num_samples;
        if m == 0 || n == 0 || self.num_bands == 0 {
            return Err(Error::Config(
                "synthetic data needs samples, bands and tasks".into(),
            ));
        }
        if self.num_primary > n {
            return Err(Error::Config("more primary labels than samples".into()));
        }
        if self.noise_variance.len() != m || self.noise_variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(
                "one non-negative noise variance per task".into(),
            ));
        }
        let p = Self::matrix(&self.p, m, "P")?;
        let q = Self::matrix(&self.q, m, "Q")?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let x = DMatrix::from_fn(n, self.num_bands, |_, _| rng.random_range(0.0..1.0));
        let k1 = self.kernel1.gram(&x)?;
        let k2 = self.kernel2.gram(&x)?;
        let mut sigma = p.kronecker(&k1) + q.kronecker(&k2);
        for l in 0..m {
            for i in 0..n {
                sigma[(l * n + i, l * n + i)] += self.noise_variance[l];
            }
        }
        let (chol, _) = Cholesky::with_jitter(&sigma)?;
        let z = DVector::from_fn(n * m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = chol.factor() * z;

        let mut primary: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(primary.as_mut_slice(), &mut rng);
        let mut has_primary = vec![false; n];
        for &i in &primary[..self.num_primary] {
            has_primary[i] = true;
        }
        let labels = (0..n)
            .map(|i| {
                (0..m)
                    .map(|l| (l != 0 || has_primary[i]).then(|| y[l * n + i]))
                    .collect()
            })
            .collect();
        let wavelengths = (0..self.num_bands)
            .map(|b| 400.0 + 10.0 * b as f64)
            .collect();
        let mut names = vec!["primary".to_string()];
        names.extend((1..m).map(|l| {
            if m == 2 {
                "secondary".to_string()
            } else {
                format!("secondary{l}")
            }
        }));
        SpectraTable::new(wavelengths, x, labels, names, vec![None; m])
    }
}
