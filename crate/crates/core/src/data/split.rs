use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Observation, ObservationSet};

use super::spectra::SpectraTable;

/// One trial's partition of a table's labelled pairs.
///
/// `test` holds only primary-task pairs. `train` holds the remaining primary
/// pairs and every secondary pair. `inner_train`/`inner_val` split `train`
/// roughly 80/20 per task for rank and hyperparameter selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSplit {
    pub train: ObservationSet,
    pub test: ObservationSet,
    pub inner_train: ObservationSet,
    pub inner_val: ObservationSet,
}

fn by_task_then_input(obs: &mut [Observation]) {
    obs.sort_by_key(|o| (o.task, o.input));
}

fn subset(table: &SpectraTable, mut obs: Vec<Observation>) -> ObservationSet {
    by_task_then_input(&mut obs);
    ObservationSet::new(table.spectra().clone(), table.num_tasks(), obs)
        .expect("split observations come from the table")
}

/// Splits the labelled pairs of `table` for one trial. Deterministic in `seed`.
///
/// * test: ⌊n/3⌋ (at least 1) random primary pairs
/// * train: all other pairs
/// * inner_val: per task, ⌊0.2·n + ½⌋ of that task's train pairs; for the
///   primary task at least 1, and at least 2 whenever that still leaves one
///   primary pair for inner fitting (r² needs two points)
pub fn split_trial(table: &SpectraTable, primary_task: usize, seed: u64) -> Result<TrialSplit> {
    if primary_task >= table.num_tasks() {
        return Err(Error::Config(format!(
            "primary task {primary_task} out of range"
        )));
    }
    let mut primary = table.labelled(primary_task);
    if primary.len() < 3 {
        return Err(Error::Split(format!(
            "primary task `{}` has {} labels, at least 3 are needed",
            table.task_names()[primary_task],
            primary.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primary.shuffle(&mut rng);
    let n_test = (primary.len() / 3).max(1);

    let obs = |i: usize, l: usize| Observation {
        input: i,
        task: l,
        target: table.label(i, l).expect("labelled sample"),
    };
    let test: Vec<Observation> = primary[..n_test]
        .iter()
        .map(|&i| obs(i, primary_task))
        .collect();

    let mut train = Vec::new();
    let mut inner_train = Vec::new();
    let mut inner_val = Vec::new();
    for l in 0..table.num_tasks() {
        let mut idx: Vec<usize> = if l == primary_task {
            primary[n_test..].to_vec()
        } else {
            table.labelled(l)
        };
        idx.sort_unstable();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut n_val = ((n as f64) * 0.2).round() as usize;
        if l == primary_task {
            n_val = n_val.max(1).max(2.min(n - 1));
        }
        for (k, &i) in idx.iter().enumerate() {
            let o = obs(i, l);
            train.push(o);
            if k < n_val {
                inner_val.push(o);
            } else {
                inner_train.push(o);
            }
        }
    }

    Ok(TrialSplit {
        train: subset(table, train),
        test: subset(table, test),
        inner_train: subset(table, inner_train),
        inner_val: subset(table, inner_val),
    })
}

/// Per-task standardization of targets to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetScaler {
    /// Statistics of each task's targets. Tasks with fewer than two targets or
    /// zero spread keep a unit scale.
    pub fn fit(data: &ObservationSet) -> Self {
        let m = data.num_tasks();
        let mut mean = vec![0.0; m];
        let mut std = vec![1.0; m];
        for l in 0..m {
            let ys: Vec<f64> = data
                .observations()
                .iter()
                .filter(|o| o.task == l)
                .map(|o| o.target)
                .collect();
            if ys.is_empty() {
                continue;
            }
            let mu = ys.iter().sum::<f64>() / ys.len() as f64;
            mean[l] = mu;
            if ys.len() >= 2 {
                let var = ys.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / ys.len() as f64;
                if var > 0.0 {
                    std[l] = var.sqrt();
                }
            }
        }
        TargetScaler { mean, std }
    }

    pub fn identity(num_tasks: usize) -> Self {
        TargetScaler {
            mean: vec![0.0; num_tasks],
            std: vec![1.0; num_tasks],
        }
    }

    pub fn transform(&self, data: &ObservationSet) -> ObservationSet {
        let t: Vec<f64> = data
            .observations()
            .iter()
            .map(|o| (o.target - self.mean[o.task]) / self.std[o.task])
            .collect();
        data.with_targets(&t).expect("same observation count")
    }

    pub fn inverse(&self, task: usize, value: f64) -> f64 {
        value * self.std[task] + self.mean[task]
    }

    /// Variance back in original units.
    pub fn inverse_variance(&self, task: usize, variance: f64) -> f64 {
        variance * self.std[task] * self.std[task]
    }
}
