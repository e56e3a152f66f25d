//! Repeated-trial transfer evaluation: split, inner rank selection, scoring,
//! and the summary table.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_trial, SpectraTable, TargetScaler};
use crate::error::{Error, Result};
use crate::model::{fit, FittedModel, Method, ObservationSet};
use crate::optimizer::OptimizerSettings;

/// Largest joint rank grid searched per method before pruning to equal ranks.
pub const MAX_RANK_COMBINATIONS: usize = 16;

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} targets but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(Error::UndefinedMetric("fewer than two points".into()));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("constant targets".into()));
    }
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// SplitMix64 step, used to derive independent per-trial and per-fit seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub methods: Vec<Method>,
    pub primary_task: usize,
    pub secondary_tasks: Vec<usize>,
    pub num_trials: usize,
    /// Ranks tried for every task matrix.
    pub candidate_ranks: Vec<usize>,
    pub optimizer: OptimizerSettings,
    pub base_seed: u64,
    /// Re-optimize on the whole training set with the selected ranks. When
    /// off, the inner-split hyperparameters are conditioned on the whole
    /// training set.
    #[serde(default)]
    pub refit: bool,
    /// Keep going when individual trials fail.
    #[serde(default)]
    pub allow_partial: bool,
}

impl ExperimentPlan {
    pub fn num_tasks(&self) -> usize {
        1 + self.secondary_tasks.len()
    }

    pub fn validate(&self, table: &SpectraTable) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods to evaluate".into()));
        }
        if self.num_trials == 0 {
            return Err(Error::Config("num_trials must be at least 1".into()));
        }
        if self.candidate_ranks.is_empty() {
            return Err(Error::Config("candidate_ranks is empty".into()));
        }
        let m = self.num_tasks();
        if let Some(r) = self.candidate_ranks.iter().find(|&&r| r > m) {
            return Err(Error::Config(format!(
                "candidate rank {r} exceeds the {m} tasks"
            )));
        }
        let mut all = vec![self.primary_task];
        all.extend(&self.secondary_tasks);
        if let Some(t) = all.iter().find(|&&t| t >= table.num_tasks()) {
            return Err(Error::Config(format!("task index {t} out of range")));
        }
        let mut dedup = all.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != all.len() {
            return Err(Error::Config(
                "primary and secondary tasks must be distinct".into(),
            ));
        }
        self.optimizer.validate()
    }

    /// Rank assignments tried for `method`, ordered by total rank then
    /// lexicographically; the first best candidate wins ties.
    pub fn rank_candidates(&self, method: &Method) -> Vec<Vec<usize>> {
        if method.is_single_task() {
            return vec![vec![0]];
        }
        let mut ranks = self.candidate_ranks.clone();
        ranks.sort_unstable();
        ranks.dedup();
        let k = method.num_task_matrices();
        let mut grid: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..k {
            grid = grid
                .into_iter()
                .flat_map(|prefix| {
                    ranks.iter().map(move |&r| {
                        let mut p = prefix.clone();
                        p.push(r);
                        p
                    })
                })
                .collect();
        }
        if grid.len() > MAX_RANK_COMBINATIONS {
            grid = ranks.iter().map(|&r| vec![r; k]).collect();
        }
        grid.sort_by_key(|c| (c.iter().sum::<usize>(), c.clone()));
        grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub ranks: Vec<usize>,
    pub inner_r2: Option<f64>,
    pub nlml: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub method: String,
    pub trial_index: usize,
    pub seed: u64,
    pub selected_ranks: Vec<usize>,
    pub candidates: Vec<CandidateReport>,
    pub parameter_names: Vec<String>,
    pub parameters: Vec<f64>,
    pub inner_val_r2: f64,
    pub test_r2: f64,
    pub wall_time_secs: f64,
}

struct Prepared {
    fit_set: ObservationSet,
    val_set: ObservationSet,
    train_set: ObservationSet,
    test_set: ObservationSet,
}

fn primary_inputs(data: &ObservationSet) -> (DMatrix<f64>, Vec<f64>) {
    let prim = data.filter(|o| o.task == 0);
    (
        prim.observation_inputs(),
        prim.observations().iter().map(|o| o.target).collect(),
    )
}

/// Fits on standardized targets; returns the model and its scaler.
fn fit_scaled(
    method: &Method,
    ranks: &[usize],
    data: &ObservationSet,
    opt: &OptimizerSettings,
) -> Result<(FittedModel, TargetScaler)> {
    let scaler = TargetScaler::fit(data);
    let cfg = method.config(data.num_tasks(), ranks)?;
    let model = fit(&cfg, &scaler.transform(data), opt)?;
    Ok((model, scaler))
}

/// Primary-task r² of a standardized model on `data`'s primary pairs.
fn score(model: &FittedModel, scaler: &TargetScaler, data: &ObservationSet) -> Result<f64> {
    let (xs, y) = primary_inputs(data);
    let pred: Vec<f64> = model
        .predict_mean(&xs, 0)?
        .iter()
        .map(|v| scaler.inverse(0, *v))
        .collect();
    r_squared(&y, &pred)
}

/// One trial of one method. Deterministic in `(plan.base_seed, trial_index)`.
pub fn run_trial(
    table: &SpectraTable,
    plan: &ExperimentPlan,
    method: &Method,
    trial_index: usize,
) -> Result<TrialReport> {
    let start = Instant::now();
    let mut tasks = vec![plan.primary_task];
    tasks.extend(&plan.secondary_tasks);
    let table = table.select_tasks(&tasks)?;
    let seed = derive_seed(plan.base_seed, trial_index as u64);
    let split = split_trial(&table, 0, seed)?;

    let p = if method.is_single_task() {
        Prepared {
            fit_set: split.inner_train.single_task(0),
            val_set: split.inner_val.single_task(0),
            train_set: split.train.single_task(0),
            test_set: split.test.single_task(0),
        }
    } else {
        Prepared {
            fit_set: split.inner_train,
            val_set: split.inner_val,
            train_set: split.train,
            test_set: split.test,
        }
    };

    let mut candidates = Vec::new();
    let mut best: Option<(f64, usize, FittedModel, TargetScaler)> = None;
    for (ci, ranks) in plan.rank_candidates(method).into_iter().enumerate() {
        let opt = OptimizerSettings {
            seed: derive_seed(seed, ci as u64 + 1),
            ..plan.optimizer.clone()
        };
        let outcome = fit_scaled(method, &ranks, &p.fit_set, &opt)
            .and_then(|(m, s)| score(&m, &s, &p.val_set).map(|r2| (r2, m, s)));
        match outcome {
            Ok((r2, model, scaler)) => {
                candidates.push(CandidateReport {
                    ranks,
                    inner_r2: Some(r2),
                    nlml: Some(model.nlml()),
                    error: None,
                });
                if best.as_ref().is_none_or(|b| r2 > b.0) {
                    best = Some((r2, ci, model, scaler));
                }
            }
            Err(e) => candidates.push(CandidateReport {
                ranks,
                inner_r2: None,
                nlml: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((inner_r2, ci, model, scaler)) = best else {
        return Err(Error::Trial {
            trial: trial_index,
            diagnostics: candidates.into_iter().filter_map(|c| c.error).collect(),
        });
    };
    let selected_ranks = candidates[ci].ranks.clone();

    let (model, scaler) = if plan.refit {
        let opt = OptimizerSettings {
            seed: derive_seed(seed, 0),
            ..plan.optimizer.clone()
        };
        fit_scaled(method, &selected_ranks, &p.train_set, &opt)?
    } else {
        // same hyperparameters and scaling, conditioned on the whole training set
        let conditioned = FittedModel::condition(
            model.config().clone(),
            scaler.transform(&p.train_set),
            model.seed(),
        )?;
        (conditioned, scaler)
    };
    let test_r2 = score(&model, &scaler, &p.test_set)?;

    Ok(TrialReport {
        method: method.id(),
        trial_index,
        seed,
        selected_ranks,
        candidates,
        parameter_names: model.config().param_names(),
        parameters: model.config().params(),
        inner_val_r2: inner_r2,
        test_r2,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub label: String,
    pub mean_r2: f64,
    /// Sample standard deviation (n − 1); 0 for a single trial.
    pub std_r2: f64,
    pub trials: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub primary_task: String,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    /// Aligned plain-text table, one row per method in plan order.
    pub fn to_text(&self) -> String {
        let header = "Method";
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([header.len()])
            .max()
            .unwrap_or(0);
        let mut out = format!("{header:<width$}  {}\n", self.primary_task);
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:.4} (±{:.3})",
                r.label, r.mean_r2, r.std_r2
            ));
            if r.failed > 0 {
                out.push_str(&format!("  [{} failed]", r.failed));
            }
            out.push('\n');
        }
        out
    }

    pub fn row(&self, method: &Method) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method.id())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub summary: Summary,
    /// Successful trials, ordered by method then trial index.
    pub reports: Vec<TrialReport>,
    /// `(method id, trial index, error)` of failed trials.
    pub failures: Vec<(String, usize, String)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (method, trial) pair on up to `jobs` threads. Results do not
/// depend on `jobs`.
pub fn run_experiment<F>(
    table: &SpectraTable,
    plan: &ExperimentPlan,
    jobs: usize,
    progress: F,
) -> Result<ExperimentResult>
where
    F: Fn(&Method, usize, &Result<TrialReport>) + Sync,
{
    plan.validate(table)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let work: Vec<(usize, usize)> = (0..plan.methods.len())
        .flat_map(|m| (0..plan.num_trials).map(move |t| (m, t)))
        .collect();
    let outcomes: Vec<Result<TrialReport>> = pool.install(|| {
        work.par_iter()
            .map(|&(m, t)| {
                let method = &plan.methods[m];
                let r = run_trial(table, plan, method, t);
                progress(method, t, &r);
                r
            })
            .collect()
    });

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    let mut outcomes = outcomes.into_iter();
    for method in &plan.methods {
        let mut r2 = Vec::new();
        let mut failed = 0;
        for t in 0..plan.num_trials {
            match outcomes.next().expect("one outcome per trial") {
                Ok(rep) => {
                    r2.push(rep.test_r2);
                    reports.push(rep);
                }
                Err(e) => {
                    if !plan.allow_partial {
                        return Err(e);
                    }
                    failed += 1;
                    failures.push((method.id(), t, e.to_string()));
                }
            }
        }
        let (mean_r2, std_r2) = mean_std(&r2);
        rows.push(SummaryRow {
            method: method.id(),
            label: method.to_string(),
            mean_r2,
            std_r2,
            trials: r2.len(),
            failed,
        });
    }
    Ok(ExperimentResult {
        summary: Summary {
            primary_task: table.task_names()[plan.primary_task].clone(),
            rows,
        },
        reports,
        failures,
    })
}
