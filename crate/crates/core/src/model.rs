//! The generalized multitask GP.
//!
//! The covariance between observation `p = (i, l)` and `q = (j, m)` is
//!
//! ```text
//! Σ[p,q] = Σ_t A_t[l,m]·K_t(x_i, x_j) + [i = j]·(N[l,m] + [l = m]·σ_l²)
//! ```
//!
//! i.e. the rows and columns of `Σ_t A_t ⊗ K_t + N ⊗ I + D ⊗ I` that belong to
//! observed (input, task) pairs. `N` is the optional structured-noise matrix
//! and `D = diag(σ_l²)`. Single-task GP, shared covariance, structured noise
//! and the composite model are all presets of [`ModelConfig`].
//!
//! Free parameters are flattened as: for each term, the task matrix
//! (`a0`, then `B` column-major) followed by the kernel log-hyperparameters;
//! then the noise matrix (if any); then the `M` log noise variances.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{rows, KernelKind, KernelSpec};
use crate::linalg::Cholesky;
use crate::optimizer::{multi_restart_minimize, OptimizerSettings, RestartSummary};
use crate::task_corr::TaskCorrMatrix;

/// Lower bound on the per-task noise variance while optimizing.
pub const NOISE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub input: usize,
    pub task: usize,
    pub target: f64,
}

/// Observed (input, task, target) triples over a shared input matrix.
/// Missing pairs are simply absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    inputs: DMatrix<f64>,
    num_tasks: usize,
    obs: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(inputs: DMatrix<f64>, num_tasks: usize, obs: Vec<Observation>) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::Shape(
                "observation set needs at least one task".into(),
            ));
        }
        let n = inputs.nrows();
        let mut seen = std::collections::HashSet::with_capacity(obs.len());
        for o in &obs {
            if o.input >= n {
                return Err(Error::Shape(format!(
                    "input index {} out of range ({n} inputs)",
                    o.input
                )));
            }
            if o.task >= num_tasks {
                return Err(Error::Shape(format!(
                    "task index {} out of range ({num_tasks} tasks)",
                    o.task
                )));
            }
            if !seen.insert((o.input, o.task)) {
                return Err(Error::Shape(format!(
                    "duplicate observation for input {} task {}",
                    o.input, o.task
                )));
            }
        }
        Ok(ObservationSet {
            inputs,
            num_tasks,
            obs,
        })
    }

    /// Every cell of an `N×M` target grid.
    pub fn full_grid(inputs: DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Self> {
        if targets.nrows() != inputs.nrows() {
            return Err(Error::Shape(
                "target grid rows differ from input rows".into(),
            ));
        }
        let obs = (0..targets.ncols())
            .flat_map(|l| {
                (0..targets.nrows()).map(move |i| Observation {
                    input: i,
                    task: l,
                    target: targets[(i, l)],
                })
            })
            .collect();
        ObservationSet::new(inputs, targets.ncols(), obs)
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn targets(&self) -> DVector<f64> {
        DVector::from_iterator(self.obs.len(), self.obs.iter().map(|o| o.target))
    }

    pub fn count_for_task(&self, task: usize) -> usize {
        self.obs.iter().filter(|o| o.task == task).count()
    }

    /// Same pairs with new target values.
    pub fn with_targets(&self, targets: &[f64]) -> Result<Self> {
        if targets.len() != self.obs.len() {
            return Err(Error::Shape(
                "target count differs from observation count".into(),
            ));
        }
        let mut out = self.clone();
        for (o, &t) in out.obs.iter_mut().zip(targets) {
            o.target = t;
        }
        Ok(out)
    }

    /// Keeps observations matching `keep`, over the same inputs.
    pub fn filter<P: FnMut(&Observation) -> bool>(&self, mut keep: P) -> Self {
        ObservationSet {
            inputs: self.inputs.clone(),
            num_tasks: self.num_tasks,
            obs: self.obs.iter().filter(|o| keep(o)).cloned().collect(),
        }
    }

    /// Observations of one task, relabelled as a single-task set.
    pub fn single_task(&self, task: usize) -> Self {
        ObservationSet {
            inputs: self.inputs.clone(),
            num_tasks: 1,
            obs: self
                .obs
                .iter()
                .filter(|o| o.task == task)
                .map(|o| Observation { task: 0, ..*o })
                .collect(),
        }
    }

    /// Drops inputs no observation refers to; observation order is kept.
    pub fn compact(&self) -> Self {
        let mut map = vec![usize::MAX; self.inputs.nrows()];
        let mut kept = Vec::new();
        for o in &self.obs {
            if map[o.input] == usize::MAX {
                map[o.input] = kept.len();
                kept.push(o.input);
            }
        }
        let inputs = DMatrix::from_fn(kept.len(), self.inputs.ncols(), |r, c| {
            self.inputs[(kept[r], c)]
        });
        ObservationSet {
            inputs,
            num_tasks: self.num_tasks,
            obs: self
                .obs
                .iter()
                .map(|o| Observation {
                    input: map[o.input],
                    ..*o
                })
                .collect(),
        }
    }

    /// Input rows of the observations, in observation order.
    pub fn observation_inputs(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.obs.len(), self.inputs.ncols(), |r, c| {
            self.inputs[(self.obs[r].input, c)]
        })
    }
}

/// One Kronecker term `A ⊗ K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub task_corr: TaskCorrMatrix,
    pub kernel: KernelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub terms: Vec<Term>,
    /// Structured noise `N`, added wherever two observations share an input.
    pub noise_corr: Option<TaskCorrMatrix>,
    /// `ln σ_l²` per task.
    pub task_noise_log: Vec<f64>,
}

impl ModelConfig {
    pub fn num_tasks(&self) -> usize {
        self.task_noise_log.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Parameter(
                "model needs at least one covariance term".into(),
            ));
        }
        let m = self.num_tasks();
        if m == 0 {
            return Err(Error::Parameter("model needs at least one task".into()));
        }
        for t in &self.terms {
            if t.task_corr.num_tasks() != m {
                return Err(Error::Shape(format!(
                    "term task matrix covers {} tasks, model has {m}",
                    t.task_corr.num_tasks()
                )));
            }
            t.task_corr.validate()?;
            t.kernel.validate()?;
        }
        if let Some(n) = &self.noise_corr {
            if n.num_tasks() != m {
                return Err(Error::Shape(format!(
                    "noise matrix covers {} tasks, model has {m}",
                    n.num_tasks()
                )));
            }
            n.validate()?;
        }
        if self.task_noise_log.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite noise variance".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.task_corr.num_params() + t.kernel.num_hypers())
            .sum::<usize>()
            + self.noise_corr.as_ref().map_or(0, |n| n.num_params())
            + self.task_noise_log.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for t in &self.terms {
            p.extend(t.task_corr.params());
            p.extend_from_slice(&t.kernel.log_hypers);
        }
        if let Some(n) = &self.noise_corr {
            p.extend(n.params());
        }
        p.extend_from_slice(&self.task_noise_log);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Parameter(format!(
                "model takes {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        let mut at = 0;
        for t in &mut self.terms {
            let k = t.task_corr.num_params();
            t.task_corr.set_params(&p[at..at + k])?;
            at += k;
            let h = t.kernel.num_hypers();
            t.kernel.log_hypers.copy_from_slice(&p[at..at + h]);
            at += h;
        }
        if let Some(n) = &mut self.noise_corr {
            let k = n.num_params();
            n.set_params(&p[at..at + k])?;
            at += k;
        }
        self.task_noise_log.copy_from_slice(&p[at..]);
        Ok(())
    }

    /// Human-readable names in flattening order.
    pub fn param_names(&self) -> Vec<String> {
        fn corr(prefix: &str, tc: &TaskCorrMatrix, out: &mut Vec<String>) {
            out.push(format!("{prefix}.a0"));
            for j in 0..tc.rank() {
                for r in 0..tc.num_tasks() {
                    out.push(format!("{prefix}.B[{r},{j}]"));
                }
            }
        }
        let mut out = Vec::with_capacity(self.num_params());
        for (ti, t) in self.terms.iter().enumerate() {
            corr(&format!("term{ti}"), &t.task_corr, &mut out);
            let names: &[&str] = match t.kernel.kind {
                KernelKind::Se => &["se.ln_sf", "se.ln_ell"],
                KernelKind::Nn => &["nn.ln_sf", "nn.ln_sw"],
                KernelKind::Sum => &["se.ln_sf", "se.ln_ell", "nn.ln_sf", "nn.ln_sw"],
            };
            out.extend(names.iter().map(|n| format!("term{ti}.{n}")));
        }
        if let Some(n) = &self.noise_corr {
            corr("noise", n, &mut out);
        }
        out.extend((0..self.num_tasks()).map(|l| format!("ln_noise_var[{l}]")));
        out
    }

    /// Same structure with freshly sampled starting parameters.
    pub fn randomized<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let m = self.num_tasks();
        let (lo, hi) = (0.1f64.ln(), 10f64.ln());
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                task_corr: TaskCorrMatrix::random(m, t.task_corr.rank(), 1.0, rng),
                kernel: KernelSpec {
                    kind: t.kernel.kind,
                    log_hypers: (0..t.kernel.num_hypers())
                        .map(|_| rng.random_range(lo..hi))
                        .collect(),
                },
            })
            .collect();
        let noise_corr = self
            .noise_corr
            .as_ref()
            .map(|n| TaskCorrMatrix::random(m, n.rank(), 0.3, rng));
        let task_noise_log = (0..m)
            .map(|_| rng.random_range(0.01f64.ln()..0.5f64.ln()))
            .collect();
        ModelConfig {
            terms,
            noise_corr,
            task_noise_log,
        }
    }

    /// Ranks of every task matrix: terms first, then the noise matrix.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.terms.iter().map(|t| t.task_corr.rank()).collect();
        if let Some(n) = &self.noise_corr {
            r.push(n.rank());
        }
        r
    }

    fn check_data(&self, data: &ObservationSet) -> Result<()> {
        self.validate()?;
        if data.num_tasks() != self.num_tasks() {
            return Err(Error::Shape(format!(
                "data has {} tasks, model has {}",
                data.num_tasks(),
                self.num_tasks()
            )));
        }
        if data.is_empty() {
            return Err(Error::Shape("no observations".into()));
        }
        Ok(())
    }
}

/// The compared methods, each a preset structure of [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Independent single-task GP.
    Gp(KernelKind),
    /// One shared covariance term with a learned task matrix.
    SharedCovariance(KernelKind),
    /// Shared covariance plus a correlated noise matrix.
    StructuredNoise(KernelKind),
    /// Two covariance functions, each with its own task matrix.
    Composite(KernelKind, KernelKind),
}

impl Method {
    pub fn is_single_task(&self) -> bool {
        matches!(self, Method::Gp(_))
    }

    /// Number of task matrices whose rank is chosen (terms, then noise).
    pub fn num_task_matrices(&self) -> usize {
        match self {
            Method::Gp(_) | Method::SharedCovariance(_) => 1,
            Method::StructuredNoise(_) | Method::Composite(..) => 2,
        }
    }

    /// Default-parameter configuration: unit task matrices and kernels,
    /// noise variance 0.1.
    pub fn config(&self, num_tasks: usize, ranks: &[usize]) -> Result<ModelConfig> {
        if ranks.len() != self.num_task_matrices() {
            return Err(Error::Config(format!(
                "{self} takes {} ranks, got {}",
                self.num_task_matrices(),
                ranks.len()
            )));
        }
        if self.is_single_task() && num_tasks != 1 {
            return Err(Error::Config(
                "single-task GP models exactly one task".into(),
            ));
        }
        if let Some(&r) = ranks.iter().find(|&&r| r > num_tasks) {
            return Err(Error::Config(format!(
                "rank {r} exceeds the number of tasks {num_tasks}"
            )));
        }
        let corr = |rank: usize| {
            let mut tc = TaskCorrMatrix::zeros(num_tasks, rank);
            tc.a0 = 1.0;
            tc
        };
        let kernel = |kind: KernelKind| KernelSpec {
            kind,
            log_hypers: vec![0.0; kind.num_hypers()],
        };
        let term = |kind, rank| Term {
            task_corr: corr(rank),
            kernel: kernel(kind),
        };
        let (terms, noise_corr) = match *self {
            Method::Gp(k) | Method::SharedCovariance(k) => (vec![term(k, ranks[0])], None),
            Method::StructuredNoise(k) => {
                let mut n = TaskCorrMatrix::zeros(num_tasks, ranks[1]);
                n.a0 = 0.1;
                (vec![term(k, ranks[0])], Some(n))
            }
            Method::Composite(k1, k2) => (vec![term(k1, ranks[0]), term(k2, ranks[1])], None),
        };
        Ok(ModelConfig {
            terms,
            noise_corr,
            task_noise_log: vec![0.1f64.ln(); num_tasks],
        })
    }

    /// Short identifier used on the command line, e.g. `mtgp-comp-se-nn`.
    pub fn id(&self) -> String {
        let k = |k: &KernelKind| k.label().to_ascii_lowercase();
        match self {
            Method::Gp(a) => format!("gp-{}", k(a)),
            Method::SharedCovariance(a) => format!("mtgp-sc-{}", k(a)),
            Method::StructuredNoise(a) => format!("mtgp-sn-{}", k(a)),
            Method::Composite(a, b) => format!("mtgp-comp-{}-{}", k(a), k(b)),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Gp(k) => write!(f, "GP ({k})"),
            Method::SharedCovariance(k) => write!(f, "MTGP-SC ({k})"),
            Method::StructuredNoise(k) => write!(f, "MTGP-SN ({k})"),
            Method::Composite(a, b) => write!(f, "MTGP-COMP ({a}, {b})"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let parts: Vec<&str> = lower.split('-').collect();
        let kernel = |p: &str| p.parse::<KernelKind>();
        match parts.as_slice() {
            ["gp", k] => Ok(Method::Gp(kernel(k)?)),
            ["mtgp", "sc", k] => Ok(Method::SharedCovariance(kernel(k)?)),
            ["mtgp", "sn", k] => Ok(Method::StructuredNoise(kernel(k)?)),
            ["mtgp", "comp", a, b] => Ok(Method::Composite(kernel(a)?, kernel(b)?)),
            _ => Err(Error::Config(format!(
                "unknown method `{s}` (expected gp-K, mtgp-sc-K, mtgp-sn-K or mtgp-comp-K-K)"
            ))),
        }
    }
}

struct Assembled {
    sigma: DMatrix<f64>,
    /// Per-term gram matrices over the inputs.
    grams: Vec<DMatrix<f64>>,
    kernel_grads: Vec<Vec<DMatrix<f64>>>,
    task_mats: Vec<DMatrix<f64>>,
}

fn assemble(config: &ModelConfig, data: &ObservationSet, with_grads: bool) -> Assembled {
    let r = rows(data.inputs());
    let mut grams = Vec::with_capacity(config.terms.len());
    let mut kernel_grads = Vec::new();
    for t in &config.terms {
        if with_grads {
            let (k, g) = t.kernel.gram_and_grads_rows(&r);
            grams.push(k);
            kernel_grads.push(g);
        } else {
            grams.push(t.kernel.gram_rows(&r));
        }
    }
    let task_mats: Vec<DMatrix<f64>> = config
        .terms
        .iter()
        .map(|t| t.task_corr.materialize_unchecked())
        .collect();
    let noise = config
        .noise_corr
        .as_ref()
        .map(|n| n.materialize_unchecked());
    let var: Vec<f64> = config.task_noise_log.iter().map(|v| v.exp()).collect();

    let obs = data.observations();
    let n = obs.len();
    let mut sigma = DMatrix::zeros(n, n);
    for p in 0..n {
        let (i, l) = (obs[p].input, obs[p].task);
        for q in 0..=p {
            let (j, m) = (obs[q].input, obs[q].task);
            let mut v = 0.0;
            for (a, k) in task_mats.iter().zip(&grams) {
                v += a[(l, m)] * k[(i, j)];
            }
            if i == j {
                if let Some(nm) = &noise {
                    v += nm[(l, m)];
                }
                if l == m {
                    v += var[l];
                }
            }
            sigma[(p, q)] = v;
            sigma[(q, p)] = v;
        }
    }
    Assembled {
        sigma,
        grams,
        kernel_grads,
        task_mats,
    }
}

/// Covariance of the observed targets.
pub fn assemble_sigma(config: &ModelConfig, data: &ObservationSet) -> Result<DMatrix<f64>> {
    config.check_data(data)?;
    Ok(assemble(config, data, false).sigma)
}

fn nlml_from(chol: &Cholesky, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = chol.solve(y);
    let n = y.len() as f64;
    let value = 0.5 * y.dot(&alpha) + 0.5 * chol.log_det() + 0.5 * n * (2.0 * PI).ln();
    (value, alpha)
}

/// `½ yᵀΣ⁻¹y + ½ log|Σ| + (n/2) log 2π`.
pub fn negative_log_marginal_likelihood(
    config: &ModelConfig,
    data: &ObservationSet,
) -> Result<f64> {
    let sigma = assemble_sigma(config, data)?;
    let (chol, _) = Cholesky::with_jitter(&sigma)?;
    Ok(nlml_from(&chol, &data.targets()).0)
}

/// Gradient of the NLML in [`ModelConfig::params`] order.
pub fn nlml_gradient(config: &ModelConfig, data: &ObservationSet) -> Result<Vec<f64>> {
    Ok(nlml_and_gradient(config, data)?.1)
}

/// NLML and its gradient from one factorization, using
/// `∂/∂θ = ½ tr((Σ⁻¹ − ααᵀ) ∂Σ/∂θ)` with `α = Σ⁻¹y`.
pub fn nlml_and_gradient(config: &ModelConfig, data: &ObservationSet) -> Result<(f64, Vec<f64>)> {
    config.check_data(data)?;
    let asm = assemble(config, data, true);
    let (chol, _) = Cholesky::with_jitter(&asm.sigma)?;
    let y = data.targets();
    let (value, alpha) = nlml_from(&chol, &y);

    let mut w = chol.inverse();
    w -= &alpha * alpha.transpose();

    let obs = data.observations();
    let n = obs.len();
    let m = config.num_tasks();
    let mut grad = Vec::with_capacity(config.num_params());

    for (ti, t) in config.terms.iter().enumerate() {
        let k = &asm.grams[ti];
        let a = &asm.task_mats[ti];
        // G[l,m] = Σ_{p∈l, q∈m} W_pq K[i_p, i_q]
        let mut g = DMatrix::zeros(m, m);
        for p in 0..n {
            for q in 0..n {
                g[(obs[p].task, obs[q].task)] += w[(p, q)] * k[(obs[p].input, obs[q].input)];
            }
        }
        let mut tc = vec![0.0; t.task_corr.num_params()];
        t.task_corr.contract_grad(&g, &mut tc);
        grad.extend(tc.iter().map(|v| 0.5 * v));

        for dk in &asm.kernel_grads[ti] {
            let mut s = 0.0;
            for p in 0..n {
                for q in 0..n {
                    s += w[(p, q)]
                        * a[(obs[p].task, obs[q].task)]
                        * dk[(obs[p].input, obs[q].input)];
                }
            }
            grad.push(0.5 * s);
        }
    }

    if let Some(noise) = &config.noise_corr {
        let mut h = DMatrix::zeros(m, m);
        for p in 0..n {
            for q in 0..n {
                if obs[p].input == obs[q].input {
                    h[(obs[p].task, obs[q].task)] += w[(p, q)];
                }
            }
        }
        let mut nc = vec![0.0; noise.num_params()];
        noise.contract_grad(&h, &mut nc);
        grad.extend(nc.iter().map(|v| 0.5 * v));
    }

    let mut diag = vec![0.0; m];
    for p in 0..n {
        diag[obs[p].task] += w[(p, p)];
    }
    grad.extend(
        config
            .task_noise_log
            .iter()
            .zip(&diag)
            .map(|(s, d)| 0.5 * s.exp() * d),
    );
    Ok((value, grad))
}

/// A model with its training data and cached factorization of Σ.
#[derive(Debug, Clone)]
pub struct FittedModel {
    config: ModelConfig,
    data: ObservationSet,
    chol: Cholesky,
    alpha: DVector<f64>,
    jitter: f64,
    nlml: f64,
    seed: u64,
    restarts: Vec<RestartSummary>,
}

impl FittedModel {
    /// Conditions `config` on `data` without optimizing anything.
    pub fn condition(config: ModelConfig, data: ObservationSet, seed: u64) -> Result<Self> {
        let sigma = assemble_sigma(&config, &data)?;
        let (chol, jitter) = Cholesky::with_jitter(&sigma)?;
        let (nlml, alpha) = nlml_from(&chol, &data.targets());
        Ok(FittedModel {
            config,
            data,
            chol,
            alpha,
            jitter,
            nlml,
            seed,
            restarts: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn training_data(&self) -> &ObservationSet {
        &self.data
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn nlml(&self) -> f64 {
        self.nlml
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn restarts(&self) -> &[RestartSummary] {
        &self.restarts
    }

    fn check_query(&self, xs: &DMatrix<f64>, task: usize) -> Result<()> {
        if xs.ncols() != self.data.input_dim() {
            return Err(Error::Shape(format!(
                "query inputs have dimension {}, model was trained on {}",
                xs.ncols(),
                self.data.input_dim()
            )));
        }
        if task >= self.config.num_tasks() {
            return Err(Error::Shape(format!(
                "task {task} out of range ({} tasks)",
                self.config.num_tasks()
            )));
        }
        Ok(())
    }

    /// `n_obs × n_query` cross-covariances `Σ_t A_t[task, l_p] K_t(x_*, x_{i_p})`.
    fn cross(&self, qr: &[Vec<f64>], task: usize) -> DMatrix<f64> {
        let tr = rows(self.data.inputs());
        let obs = self.data.observations();
        let mut out = DMatrix::zeros(obs.len(), qr.len());
        for t in &self.config.terms {
            let a = t.task_corr.materialize_unchecked();
            let k = t.kernel.cross_rows(&tr, qr);
            for (p, o) in obs.iter().enumerate() {
                let w = a[(task, o.task)];
                if w == 0.0 {
                    continue;
                }
                for s in 0..qr.len() {
                    out[(p, s)] += w * k[(o.input, s)];
                }
            }
        }
        out
    }

    pub fn predict_mean(&self, xs: &DMatrix<f64>, task: usize) -> Result<DVector<f64>> {
        self.check_query(xs, task)?;
        let cross = self.cross(&rows(xs), task);
        Ok(cross.tr_mul(&self.alpha))
    }

    /// Latent (noise-free) predictive variance, clamped at zero.
    pub fn predict_variance(&self, xs: &DMatrix<f64>, task: usize) -> Result<DVector<f64>> {
        Ok(self.predict(xs, task)?.1)
    }

    pub fn predict(&self, xs: &DMatrix<f64>, task: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_query(xs, task)?;
        let qr = rows(xs);
        let cross = self.cross(&qr, task);
        let mean = cross.tr_mul(&self.alpha);
        let mut prior = vec![0.0; qr.len()];
        for t in &self.config.terms {
            let a = t.task_corr.materialize_unchecked()[(task, task)];
            for (p, d) in prior.iter_mut().zip(t.kernel.diag_rows(&qr)) {
                *p += a * d;
            }
        }
        let v = self
            .chol
            .factor()
            .solve_lower_triangular(&cross)
            .expect("cholesky factor has a positive diagonal");
        let var = DVector::from_iterator(
            qr.len(),
            (0..qr.len()).map(|s| (prior[s] - v.column(s).norm_squared()).max(0.0)),
        );
        Ok((mean, var))
    }

    /// Noise variance `σ_l²` of a task.
    pub fn noise_variance(&self, task: usize) -> f64 {
        self.config.task_noise_log[task].exp()
    }
}

/// Raises log noise variances to the floor; returns which entries were clamped.
fn clamp_noise(config: &mut ModelConfig) -> Vec<bool> {
    let floor = NOISE_FLOOR.ln();
    config
        .task_noise_log
        .iter_mut()
        .map(|v| {
            if *v < floor {
                *v = floor;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Learns the parameters of `config`'s structure by multi-restart L-BFGS on
/// the NLML. Starting points are drawn from [`ModelConfig::randomized`];
/// `config`'s own parameter values are not used.
pub fn fit(
    config: &ModelConfig,
    data: &ObservationSet,
    opt: &OptimizerSettings,
) -> Result<FittedModel> {
    config.check_data(data)?;
    if config.num_tasks() > 1 {
        if let Some(l) = (0..config.num_tasks()).find(|&l| data.count_for_task(l) == 0) {
            return Err(Error::Shape(format!("task {l} has no observations")));
        }
    }
    opt.validate()?;
    let data = data.compact();
    let noise_offset = config.num_params() - config.num_tasks();

    let mut scratch = config.clone();
    let objective = |theta: &[f64]| -> (f64, Vec<f64>) {
        if scratch.set_params(theta).is_err() {
            return (f64::NAN, Vec::new());
        }
        let clamped = clamp_noise(&mut scratch);
        match nlml_and_gradient(&scratch, &data) {
            Ok((f, mut g)) => {
                for (l, c) in clamped.iter().enumerate() {
                    if *c {
                        g[noise_offset + l] = 0.0;
                    }
                }
                (f, g)
            }
            Err(_) => (f64::INFINITY, Vec::new()),
        }
    };
    let sampler = |rng: &mut rand_chacha::ChaCha8Rng| config.randomized(rng).params();

    let result = multi_restart_minimize(objective, sampler, opt).map_err(|e| match e {
        Error::AllRestartsFailed { diagnostics, .. } => Error::Fit { diagnostics },
        other => other,
    })?;

    let mut learned = config.clone();
    learned.set_params(&result.best.x)?;
    clamp_noise(&mut learned);
    let mut model = FittedModel::condition(learned, data, opt.seed)?;
    model.restarts = result.restarts;
    Ok(model)
}
