//! Independent reference implementations and random instances shared by the
//! integration tests.

#![allow(dead_code)]

use mtgp::kernels::KernelSpec;
use mtgp::model::{ModelConfig, ObservationSet, Term};
use mtgp::{KernelKind, Method, TaskCorrMatrix};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub const KINDS: [KernelKind; 3] = [KernelKind::Se, KernelKind::Nn, KernelKind::Sum];

pub fn random_inputs<R: Rng>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_kind<R: Rng>(rng: &mut R) -> KernelKind {
    KINDS[rng.random_range(0..3)]
}

/// A random method preset valid for `m` tasks.
pub fn random_method<R: Rng>(m: usize, rng: &mut R) -> Method {
    let k = random_kind(rng);
    match if m == 1 {
        rng.random_range(0..4)
    } else {
        rng.random_range(1..4)
    } {
        0 => Method::Gp(k),
        1 => Method::SharedCovariance(k),
        2 => Method::StructuredNoise(k),
        _ => Method::Composite(k, random_kind(rng)),
    }
}

/// Randomized configuration of `method` with random ranks in `0..=m`.
pub fn random_config<R: Rng>(method: Method, m: usize, rng: &mut R) -> ModelConfig {
    let ranks: Vec<usize> = (0..method.num_task_matrices())
        .map(|_| {
            if method.is_single_task() {
                0
            } else {
                rng.random_range(0..=m)
            }
        })
        .collect();
    method.config(m, &ranks).unwrap().randomized(rng)
}

pub fn full_grid<R: Rng>(n: usize, m: usize, d: usize, rng: &mut R) -> ObservationSet {
    let x = random_inputs(n, d, rng);
    let y = DMatrix::from_fn(n, m, |_, _| rng.random_range(-2.0..2.0));
    ObservationSet::full_grid(x, &y).unwrap()
}

/// Stacked covariance `Σ_t A_t ⊗ K_t + N ⊗ I + D ⊗ I` in task-major order,
/// built with nalgebra's Kronecker product.
pub fn dense_sigma(config: &ModelConfig, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let m = config.num_tasks();
    let mut s = DMatrix::zeros(n * m, n * m);
    for t in &config.terms {
        s += t
            .task_corr
            .materialize()
            .unwrap()
            .kronecker(&t.kernel.gram(x).unwrap());
    }
    let mut d = DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        config.task_noise_log.iter().map(|v| v.exp()),
    ));
    if let Some(nc) = &config.noise_corr {
        d += nc.materialize().unwrap();
    }
    s += d.kronecker(&DMatrix::identity(n, n));
    s
}

/// Targets of a full-grid set in task-major order.
pub fn stacked_targets(data: &ObservationSet) -> DVector<f64> {
    let n = data.inputs().nrows();
    let mut y = DVector::zeros(n * data.num_tasks());
    for o in data.observations() {
        y[o.task * n + o.input] = o.target;
    }
    y
}

pub struct DensePosterior {
    pub nlml: f64,
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// NLML and latent predictions for `task` at `xs`, by dense inversion.
pub fn dense_oracle(
    config: &ModelConfig,
    data: &ObservationSet,
    xs: &DMatrix<f64>,
    task: usize,
) -> DensePosterior {
    let x = data.inputs();
    let n = x.nrows();
    let m = config.num_tasks();
    let sigma = dense_sigma(config, x);
    let y = stacked_targets(data);
    let chol = sigma.clone().cholesky().expect("oracle covariance is PD");
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let nlml = 0.5 * y.dot(&alpha)
        + 0.5 * log_det
        + 0.5 * (n * m) as f64 * (2.0 * std::f64::consts::PI).ln();

    let q = xs.nrows();
    let mut kstar = DMatrix::<f64>::zeros(q, n * m);
    let mut prior = DVector::<f64>::zeros(q);
    for t in &config.terms {
        let a = t.task_corr.materialize().unwrap();
        let kx = t.kernel.matrix(xs, x).unwrap();
        let kss = t.kernel.gram(xs).unwrap();
        for r in 0..q {
            prior[r] += a[(task, task)] * kss[(r, r)];
            for l in 0..m {
                for j in 0..n {
                    kstar[(r, l * n + j)] += a[(task, l)] * kx[(r, j)];
                }
            }
        }
    }
    let mean = &kstar * &alpha;
    let v = chol.solve(&kstar.transpose());
    let var = DVector::from_fn(q, |r, _| {
        prior[r] - kstar.row(r).dot(&v.column(r).transpose())
    });
    DensePosterior { nlml, mean, var }
}

/// Plain single-task GP: mean, latent variance and NLML.
pub fn single_task_gp(
    k: &dyn Fn(&[f64], &[f64]) -> f64,
    x: &[Vec<f64>],
    y: &[f64],
    noise: f64,
    xs: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len();
    let kxx = DMatrix::from_fn(n, n, |i, j| {
        k(&x[i], &x[j]) + if i == j { noise } else { 0.0 }
    });
    let chol = kxx.cholesky().unwrap();
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let nlml =
        0.5 * yv.dot(&alpha) + 0.5 * log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for s in xs {
        let ks = DVector::from_fn(n, |j, _| k(s, &x[j]));
        mean.push(ks.dot(&alpha));
        var.push(k(s, s) - ks.dot(&chol.solve(&ks)));
    }
    (mean, var, nlml)
}

/// Central finite-difference gradient.
/// Five-point central difference, O(h⁴).
pub fn finite_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let at = |d: f64| {
                let mut p = x.to_vec();
                p[i] += d;
                f(&p)
            };
            (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
        })
        .collect()
}

/// `|a − b| / max(1, |b|)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// A single-term configuration with an explicit task matrix.
pub fn one_term(task_corr: TaskCorrMatrix, kernel: KernelSpec, noise: &[f64]) -> ModelConfig {
    ModelConfig {
        terms: vec![Term { task_corr, kernel }],
        noise_corr: None,
        task_noise_log: noise.iter().map(|v| v.ln()).collect(),
    }
}
