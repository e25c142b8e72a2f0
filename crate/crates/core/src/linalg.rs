//! Row-compressed sparse systems of the form `diag_i v_i - sum_j w_ij v_j = r_i`
//! with nonnegative off-diagonal weights, as produced by discounted Markov
//! generators and monotone finite-difference stencils.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct MSystem {
    diag: Vec<f64>,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    rhs: Vec<f64>,
}

impl MSystem {
    pub fn with_capacity(rows: usize, nnz: usize) -> Self {
        let mut row_start = Vec::with_capacity(rows + 1);
        row_start.push(0);
        MSystem {
            diag: Vec::with_capacity(rows),
            row_start,
            cols: Vec::with_capacity(nnz),
            weights: Vec::with_capacity(nnz),
            rhs: Vec::with_capacity(rows),
        }
    }

    /// Appends a row. Entries pointing at the row itself are folded into the
    /// diagonal; zero weights are dropped.
    pub fn push_row(&mut self, diag: f64, entries: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        let row = self.diag.len();
        let mut d = diag;
        for (col, w) in entries {
            if col == row {
                d -= w;
            } else if w != 0.0 {
                self.cols.push(col);
                self.weights.push(w);
            }
        }
        self.diag.push(d);
        self.rhs.push(rhs);
        self.row_start.push(self.cols.len());
    }

    pub fn rows(&self) -> usize {
        self.diag.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_start[i]..self.row_start[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.diag[i]
    }

    pub fn rhs(&self, i: usize) -> f64 {
        self.rhs[i]
    }

    /// Checks that every row is weakly diagonally dominant with nonnegative
    /// weights and a strictly positive margin. Returns the offending row.
    pub fn check_m_matrix(&self) -> std::result::Result<(), usize> {
        for i in 0..self.rows() {
            let off: f64 = self.row(i).map(|(_, w)| w).sum();
            let neg = self.row(i).any(|(_, w)| w < 0.0);
            if neg || !(self.diag[i] > off) {
                return Err(i);
            }
        }
        Ok(())
    }

    pub fn residual_sup(&self, v: &[f64]) -> f64 {
        (0..self.rows())
            .map(|i| {
                let off: f64 = self.row(i).map(|(j, w)| w * v[j]).sum();
                (self.diag[i] * v[i] - off - self.rhs[i]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Gauss-Seidel in natural row order from the given starting vector, until
    /// the sup-norm residual is at most `tol`.
    pub fn gauss_seidel(&self, v: &mut [f64], tol: f64, max_sweeps: usize) -> Result<usize> {
        for sweep in 1..=max_sweeps {
            for i in 0..self.rows() {
                let off: f64 = self.row(i).map(|(j, w)| w * v[j]).sum();
                v[i] = (self.rhs[i] + off) / self.diag[i];
            }
            // residual checks are as expensive as a sweep; amortize them
            if sweep % 8 == 0 || sweep == max_sweeps {
                let res = self.residual_sup(v);
                if res <= tol {
                    return Ok(sweep);
                }
                if sweep == max_sweeps {
                    return Err(Error::NonConvergence {
                        iterations: sweep,
                        residual: res,
                    });
                }
            }
        }
        Err(Error::NonConvergence {
            iterations: max_sweeps,
            residual: self.residual_sup(v),
        })
    }

    /// Direct sparse LU solve.
    pub fn solve_direct(&self) -> Result<Vec<f64>> {
        let n = self.rows();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut triplets = Vec::with_capacity(n + self.cols.len());
        for i in 0..n {
            triplets.push(Triplet::new(i, i, self.diag[i]));
            for (j, w) in self.row(i) {
                triplets.push(Triplet::new(i, j, -w));
            }
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        let lu = mat
            .sp_lu()
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        let b = Mat::<f64>::from_fn(n, 1, |i, _| self.rhs[i]);
        let x = lu.solve(&b);
        let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolve("non-finite solution".into()));
        }
        Ok(out)
    }
}
