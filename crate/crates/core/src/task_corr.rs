//! Inter-task correlation matrices `A = a0²·I + B·Bᵀ`.
//!
//! `B` is `M×k`; its columns are the low-rank factors. The parameters are
//! flattened as `[a0, B column-major]`. The parameterization is not
//! identifiable (column signs and rotations of `B` leave `A` unchanged), so
//! comparisons should go through [`TaskCorrMatrix::materialize`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCorrMatrix {
    num_tasks: usize,
    rank: usize,
    pub a0: f64,
    /// `M×k` factor, stored column-major.
    b: Vec<f64>,
}

impl TaskCorrMatrix {
    pub fn new(num_tasks: usize, rank: usize, a0: f64, b: DMatrix<f64>) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::Parameter(
                "task matrix needs at least one task".into(),
            ));
        }
        if rank > num_tasks {
            return Err(Error::Parameter(format!(
                "rank {rank} exceeds the number of tasks {num_tasks}"
            )));
        }
        if b.shape() != (num_tasks, rank) {
            return Err(Error::Shape(format!(
                "factor is {}x{}, expected {num_tasks}x{rank}",
                b.nrows(),
                b.ncols()
            )));
        }
        let tc = TaskCorrMatrix {
            num_tasks,
            rank,
            a0,
            b: b.as_slice().to_vec(),
        };
        tc.validate()?;
        Ok(tc)
    }

    /// `a0²·I` with no low-rank part.
    pub fn scaled_identity(num_tasks: usize, a0: f64) -> Self {
        TaskCorrMatrix {
            num_tasks,
            rank: 0,
            a0,
            b: Vec::new(),
        }
    }

    /// All-zero parameters: materializes to the zero matrix.
    pub fn zeros(num_tasks: usize, rank: usize) -> Self {
        TaskCorrMatrix {
            num_tasks,
            rank,
            a0: 0.0,
            b: vec![0.0; num_tasks * rank],
        }
    }

    /// Random start: `a0 ~ U[0.5, 1.5]·scale`, `B ~ N(0, (0.5·scale)²)`.
    pub fn random<R: Rng + ?Sized>(num_tasks: usize, rank: usize, scale: f64, rng: &mut R) -> Self {
        let a0 = rng.random_range(0.5..1.5) * scale;
        let normal = Normal::new(0.0, 0.5 * scale).expect("positive standard deviation");
        let b = (0..num_tasks * rank).map(|_| normal.sample(rng)).collect();
        TaskCorrMatrix {
            num_tasks,
            rank,
            a0,
            b,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn factor(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.num_tasks, self.rank, &self.b)
    }

    pub fn num_params(&self) -> usize {
        1 + self.num_tasks * self.rank
    }

    /// `[a0, B column-major]`
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.push(self.a0);
        p.extend_from_slice(&self.b);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Parameter(format!(
                "task matrix takes {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        self.a0 = p[0];
        self.b.copy_from_slice(&p[1..]);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a0.is_finite() || self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite task matrix parameter".into()));
        }
        Ok(())
    }

    /// `A = a0²·I + B·Bᵀ`.
    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(self.materialize_unchecked())
    }

    pub(crate) fn materialize_unchecked(&self) -> DMatrix<f64> {
        let m = self.num_tasks;
        let a0sq = self.a0 * self.a0;
        let mut a = DMatrix::zeros(m, m);
        for p in 0..m {
            for q in 0..=p {
                let mut v = if p == q { a0sq } else { 0.0 };
                for j in 0..self.rank {
                    v += self.b[j * m + p] * self.b[j * m + q];
                }
                a[(p, q)] = v;
                a[(q, p)] = v;
            }
        }
        a
    }

    /// ∂A/∂θ for every parameter θ in [`params`](Self::params) order.
    pub fn grad(&self) -> Vec<DMatrix<f64>> {
        let m = self.num_tasks;
        let mut out = Vec::with_capacity(self.num_params());
        out.push(DMatrix::identity(m, m) * (2.0 * self.a0));
        for j in 0..self.rank {
            for row in 0..m {
                // e_row b_jᵀ + b_j e_rowᵀ
                let mut g = DMatrix::zeros(m, m);
                for q in 0..m {
                    let bq = self.b[j * m + q];
                    g[(row, q)] += bq;
                    g[(q, row)] += bq;
                }
                out.push(g);
            }
        }
        out
    }

    /// Contracts `Σ_{l,m} G[l,m] ∂A[l,m]/∂θ` for every parameter without
    /// materializing the individual derivative matrices.
    pub(crate) fn contract_grad(&self, g: &DMatrix<f64>, out: &mut [f64]) {
        let m = self.num_tasks;
        out[0] = 2.0 * self.a0 * g.trace();
        for j in 0..self.rank {
            for row in 0..m {
                let mut s = 0.0;
                for q in 0..m {
                    s += (g[(row, q)] + g[(q, row)]) * self.b[j * m + q];
                }
                out[1 + j * m + row] = s;
            }
        }
    }
}
