//! Isotropic covariance functions over spectra.
//!
//! Hyperparameters live in log space so every natural-space value stays
//! strictly positive. The order of `log_hypers` is fixed per kind:
//!
//! | kind | order                                   |
//! |------|-----------------------------------------|
//! | SE   | `[ln σ_f, ln ℓ]`                        |
//! | NN   | `[ln σ_f, ln σ_w]`                      |
//! | SUM  | `[ln σ_f(SE), ln ℓ, ln σ_f(NN), ln σ_w]` |
//!
//! * SE: `σ_f² exp(−‖x − x'‖² / 2ℓ²)`
//! * NN: the arcsine kernel on the bias-augmented input `x̃ = (1, x)`,
//!   `σ_f² (2/π) asin(2σ_w² x̃ᵀx̃' / √((1 + 2σ_w² x̃ᵀx̃)(1 + 2σ_w² x̃'ᵀx̃')))`
//! * SUM: SE + NN evaluated pointwise.

use std::f64::consts::FRAC_2_PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum KernelKind {
    Se,
    Nn,
    Sum,
}

impl KernelKind {
    pub fn num_hypers(self) -> usize {
        match self {
            KernelKind::Se | KernelKind::Nn => 2,
            KernelKind::Sum => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            KernelKind::Se => "SE",
            KernelKind::Nn => "NN",
            KernelKind::Sum => "SUM",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(KernelKind::Se),
            "nn" => Ok(KernelKind::Nn),
            "sum" => Ok(KernelKind::Sum),
            other => Err(Error::Config(format!(
                "unknown kernel `{other}` (expected se, nn or sum)"
            ))),
        }
    }
}

/// A covariance function with its log-space hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub log_hypers: Vec<f64>,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, log_hypers: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec { kind, log_hypers };
        spec.validate()?;
        Ok(spec)
    }

    /// Squared exponential from natural-space amplitude and length-scale.
    pub fn se(amplitude: f64, length_scale: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Se,
            log_hypers: vec![amplitude.ln(), length_scale.ln()],
        }
    }

    /// Arcsine network kernel from natural-space amplitude and weight scale.
    pub fn nn(amplitude: f64, weight_scale: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Nn,
            log_hypers: vec![amplitude.ln(), weight_scale.ln()],
        }
    }

    pub fn sum(se_amplitude: f64, length_scale: f64, nn_amplitude: f64, weight_scale: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Sum,
            log_hypers: vec![
                se_amplitude.ln(),
                length_scale.ln(),
                nn_amplitude.ln(),
                weight_scale.ln(),
            ],
        }
    }

    pub fn num_hypers(&self) -> usize {
        self.kind.num_hypers()
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_hypers.len() != self.kind.num_hypers() {
            return Err(Error::Parameter(format!(
                "{} kernel takes {} hyperparameters, got {}",
                self.kind,
                self.kind.num_hypers(),
                self.log_hypers.len()
            )));
        }
        if let Some(h) = self.log_hypers.iter().find(|h| !h.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite {} hyperparameter {h}",
                self.kind
            )));
        }
        Ok(())
    }

    /// k(x, x').
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        self.validate()?;
        if x.len() != x2.len() || x.is_empty() {
            return Err(Error::Shape(format!(
                "kernel inputs of dimension {} and {}",
                x.len(),
                x2.len()
            )));
        }
        Ok(self.eval_unchecked(x, x2))
    }

    fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        let h = &self.log_hypers;
        match self.kind {
            KernelKind::Se => se_value(h[0], h[1], x, x2),
            KernelKind::Nn => nn_value(h[0], h[1], x, x2),
            KernelKind::Sum => se_value(h[0], h[1], x, x2) + nn_value(h[2], h[3], x, x2),
        }
    }

    /// Cross-covariance matrix between the rows of `x` and the rows of `x2`.
    pub fn matrix(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        check_dims(x, x2)?;
        let a = rows(x);
        let b = rows(x2);
        Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
            self.eval_unchecked(&a[i], &b[j])
        }))
    }

    /// Square covariance matrix of the rows of `x`; exactly symmetric.
    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        let r = rows(x);
        Ok(self.gram_rows(&r))
    }

    pub(crate) fn gram_rows(&self, r: &[Vec<f64>]) -> DMatrix<f64> {
        let n = r.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval_unchecked(&r[i], &r[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    pub(crate) fn cross_rows(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval_unchecked(&a[i], &b[j]))
    }

    /// k(x, x) for each row of `x`.
    pub(crate) fn diag_rows(&self, a: &[Vec<f64>]) -> Vec<f64> {
        a.iter().map(|x| self.eval_unchecked(x, x)).collect()
    }

    /// ∂K/∂(log-hyper) for each hyperparameter, in `log_hypers` order.
    pub fn grad(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.validate()?;
        if x.nrows() == 0 {
            return Err(Error::Shape("kernel gradient of an empty input set".into()));
        }
        Ok(self.gram_and_grads_rows(&rows(x)).1)
    }

    /// Gram matrix together with its log-hyperparameter gradients.
    pub(crate) fn gram_and_grads_rows(&self, r: &[Vec<f64>]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n = r.len();
        let p = self.num_hypers();
        let mut k = DMatrix::zeros(n, n);
        let mut g = vec![DMatrix::zeros(n, n); p];
        let h = &self.log_hypers;
        let mut buf = [0.0; 4];
        for i in 0..n {
            for j in 0..=i {
                let v = match self.kind {
                    KernelKind::Se => se_with_grad(h[0], h[1], &r[i], &r[j], &mut buf[0..2]),
                    KernelKind::Nn => nn_with_grad(h[0], h[1], &r[i], &r[j], &mut buf[0..2]),
                    KernelKind::Sum => {
                        let (se, nn) = buf.split_at_mut(2);
                        se_with_grad(h[0], h[1], &r[i], &r[j], se)
                            + nn_with_grad(h[2], h[3], &r[i], &r[j], nn)
                    }
                };
                k[(i, j)] = v;
                k[(j, i)] = v;
                for (gm, &d) in g.iter_mut().zip(buf.iter()) {
                    gm[(i, j)] = d;
                    gm[(j, i)] = d;
                }
            }
        }
        (k, g)
    }
}

/// Rows of a matrix as owned contiguous vectors.
pub fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn check_dims(x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != x2.ncols() || x.ncols() == 0 {
        return Err(Error::Shape(format!(
            "kernel inputs of dimension {} and {}",
            x.ncols(),
            x2.ncols()
        )));
    }
    Ok(())
}

fn sq_dist(x: &[f64], x2: &[f64]) -> f64 {
    let d: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    d.max(0.0)
}

/// Inner product of bias-augmented inputs: 1 + xᵀx'.
fn aug_dot(x: &[f64], x2: &[f64]) -> f64 {
    1.0 + x.iter().zip(x2).map(|(a, b)| a * b).sum::<f64>()
}

fn se_value(log_sf: f64, log_ell: f64, x: &[f64], x2: &[f64]) -> f64 {
    let sf2 = (2.0 * log_sf).exp();
    let ell2 = (2.0 * log_ell).exp();
    sf2 * (-0.5 * sq_dist(x, x2) / ell2).exp()
}

fn se_with_grad(log_sf: f64, log_ell: f64, x: &[f64], x2: &[f64], g: &mut [f64]) -> f64 {
    let sf2 = (2.0 * log_sf).exp();
    let ell2 = (2.0 * log_ell).exp();
    let r2 = sq_dist(x, x2);
    let k = sf2 * (-0.5 * r2 / ell2).exp();
    g[0] = 2.0 * k;
    g[1] = k * r2 / ell2;
    k
}

struct NnTerms {
    z: f64,
    /// 1 − s·q/a − s·r/b, the log-weight sensitivity factor
    dz_factor: f64,
}

fn nn_terms(log_sw: f64, x: &[f64], x2: &[f64]) -> NnTerms {
    let s = (2.0 * log_sw).exp();
    let p = aug_dot(x, x2);
    let q = aug_dot(x, x);
    let r = aug_dot(x2, x2);
    let a = 1.0 + 2.0 * s * q;
    let b = 1.0 + 2.0 * s * r;
    let z = (2.0 * s * p / (a * b).sqrt()).clamp(-1.0, 1.0);
    NnTerms {
        z,
        dz_factor: 1.0 - s * q / a - s * r / b,
    }
}

fn nn_value(log_sf: f64, log_sw: f64, x: &[f64], x2: &[f64]) -> f64 {
    let sf2 = (2.0 * log_sf).exp();
    sf2 * FRAC_2_PI * nn_terms(log_sw, x, x2).z.asin()
}

fn nn_with_grad(log_sf: f64, log_sw: f64, x: &[f64], x2: &[f64], g: &mut [f64]) -> f64 {
    let sf2 = (2.0 * log_sf).exp();
    let t = nn_terms(log_sw, x, x2);
    let k = sf2 * FRAC_2_PI * t.z.asin();
    g[0] = 2.0 * k;
    // d z / d ln σ_w = 2 z (1 − s q/a − s r/b)
    let one_minus = (1.0 - t.z * t.z).max(f64::MIN_POSITIVE);
    g[1] = sf2 * FRAC_2_PI / one_minus.sqrt() * 2.0 * t.z * t.dz_factor;
    k
}
