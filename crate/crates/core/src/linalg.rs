//! Dense Cholesky factorization with pivot diagnostics and the solves built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Diagonal jitter schedule tried in order when a covariance fails to factorize.
pub const JITTER_SCHEDULE: [f64; 3] = [0.0, 1e-8, 1e-6];

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric matrix, reading only its lower triangle.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Shape(format!(
                "cholesky of non-square {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    /// Factorizes `a + jitter·I`, walking [`JITTER_SCHEDULE`] until one succeeds.
    /// Returns the factor and the jitter that was applied.
    pub fn with_jitter(a: &DMatrix<f64>) -> Result<(Self, f64)> {
        let mut last = Error::NotPositiveDefinite { pivot: 0 };
        for &jitter in JITTER_SCHEDULE.iter() {
            let attempt = if jitter == 0.0 {
                Cholesky::new(a)
            } else {
                let mut b = a.clone();
                for i in 0..b.nrows() {
                    b[(i, i)] += jitter;
                }
                Cholesky::new(&b)
            };
            match attempt {
                Ok(c) => return Ok((c, jitter)),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// log|A| = 2 Σ log Lᵢᵢ
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L v = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let v = self.solve_lower(b);
        self.l
            .tr_solve_lower_triangular(&v)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let v = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        self.l
            .tr_solve_lower_triangular(&v)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Dense `A⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = self.solve_matrix(&DMatrix::identity(n, n));
        // symmetrize away rounding asymmetry
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        inv
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
