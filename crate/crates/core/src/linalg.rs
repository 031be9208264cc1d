//! Dense row-major matrices and the ridge-regularized least-squares solver
//! behind every cascade stage.

use faer::linalg::matmul::matmul;
use faer::linalg::matmul::triangular::{matmul as triangular_matmul, BlockStructure};
use faer::linalg::solvers::{Llt, Solve};
use faer::{Accum, Mat, Par, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Some of faer's x86 kernels return with the upper halves of the vector
/// registers still dirty, which makes every later SSE-encoded instruction in
/// the process pay a transition penalty (several-fold slowdowns of scalar
/// code). Clearing the state after each call into faer avoids it.
#[inline]
fn reset_vector_state() {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx")]
        unsafe fn zero_upper() {
            std::arch::x86_64::_mm256_zeroupper();
        }
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support was checked at runtime just above.
            unsafe { zero_upper() }
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub(crate) fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators so the loop vectorizes; the order is fixed, so results are reproducible
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Cholesky-factored ridge normal equations for one design matrix `Φ` (rows
/// are samples). One factorization serves any number of target sets.
///
/// With at least as many samples as features the P×P system
/// `(ΦᵀΦ + ridge·I)` is factored; otherwise the M×M system
/// `(ΦΦᵀ + ridge·I)`, whose solution `α` gives `Wᵀ = Φᵀα`.
pub struct RidgeSolver {
    design: Mat<f64>,
    factor: Llt<f64>,
    dual: bool,
}

impl RidgeSolver {
    pub fn new(features: &Matrix, ridge: f64) -> Result<Self> {
        Self::from_faer(features.to_faer(), ridge)
    }

    pub(crate) fn from_faer(design: Mat<f64>, ridge: f64) -> Result<Self> {
        if design.nrows() == 0 {
            return Err(Error::Empty("ridge regression with no samples"));
        }
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge must be positive and finite, got {ridge}"
            )));
        }
        let all_finite = (0..design.ncols()).all(|j| design.col(j).iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::NonFinite("regression features"));
        }
        let dual = design.nrows() < design.ncols();
        let n = if dual { design.nrows() } else { design.ncols() };
        let mut gram = Mat::<f64>::zeros(n, n);
        let (lhs, rhs) = if dual {
            (design.as_ref(), design.transpose())
        } else {
            (design.transpose(), design.as_ref())
        };
        triangular_matmul(
            &mut gram,
            BlockStructure::TriangularLower,
            Accum::Replace,
            lhs,
            BlockStructure::Rectangular,
            rhs,
            BlockStructure::Rectangular,
            1.0,
            Par::Seq,
        );
        reset_vector_state();
        for i in 0..n {
            gram[(i, i)] += ridge;
        }
        let factor = gram.llt(Side::Lower);
        reset_vector_state();
        let factor = factor.map_err(|e| Error::Solve(format!("{e:?}")))?;
        Ok(Self {
            design,
            factor,
            dual,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.design.ncols()
    }

    /// `Φ·Wᵀ` for every design row (M × Q), with `W` given as Q × P.
    pub(crate) fn predict(&self, w: &Matrix) -> Mat<f64> {
        let wt = Mat::from_fn(w.cols(), w.rows(), |j, q| w.get(q, j));
        let mut out = Mat::<f64>::zeros(self.n_samples(), w.rows());
        matmul(&mut out, Accum::Replace, &self.design, &wt, 1.0, Par::Seq);
        reset_vector_state();
        out
    }

    /// Returns `W` (Q×P) minimizing `Σₘ‖yₘ − W·φₘ‖² + ridge·‖W‖²_F`.
    pub fn solve(&self, targets: &Matrix) -> Result<Matrix> {
        if targets.rows() != self.n_samples() {
            return Err(Error::DimensionMismatch(format!(
                "{} target rows for {} feature rows",
                targets.rows(),
                self.n_samples()
            )));
        }
        if !targets.is_finite() {
            return Err(Error::NonFinite("regression targets"));
        }
        let y = targets.to_faer();
        let mut wt = Mat::<f64>::zeros(self.n_features(), targets.cols());
        if self.dual {
            let alpha = self.factor.solve(&y);
            reset_vector_state();
            matmul(
                &mut wt,
                Accum::Replace,
                self.design.transpose(),
                &alpha,
                1.0,
                Par::Seq,
            );
        } else {
            let mut rhs = Mat::<f64>::zeros(self.n_features(), targets.cols());
            matmul(
                &mut rhs,
                Accum::Replace,
                self.design.transpose(),
                &y,
                1.0,
                Par::Seq,
            );
            reset_vector_state();
            wt = self.factor.solve(&rhs);
        }
        reset_vector_state();
        Ok(Matrix::from_fn(
            targets.cols(),
            self.n_features(),
            |q, p| wt[(p, q)],
        ))
    }
}

/// Closed-form ridge regression via the normal equations.
///
/// `features` is M×P (one sample per row), `targets` is M×Q; the result is
/// the Q×P map `W` minimizing `Σₘ‖targetₘ − W·featureₘ‖² + ridge·‖W‖²_F`.
pub fn fit_linear_stage(features: &Matrix, targets: &Matrix, ridge: f64) -> Result<Matrix> {
    if features.rows() != targets.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows vs {} target rows",
            features.rows(),
            targets.rows()
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("regression features"));
    }
    RidgeSolver::new(features, ridge)?.solve(targets)
}
