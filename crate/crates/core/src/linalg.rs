//! Cholesky factorisation with a jitter ladder, plus the few dense helpers built on it.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use crate::error::{Error, Result};

/// Relative jitter levels tried, in order, after a plain factorisation fails.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DMatrix<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factorises `k`, escalating through [`JITTER_LADDER`] (scaled by the mean diagonal)
    /// when the plain factorisation fails.
    pub fn new(k: &DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        if n == 0 {
            return Ok(Cholesky { l: DMatrix::zeros(0, 0), jitter: 0.0 });
        }
        let mean_diag = k.diagonal().iter().sum::<f64>() / n as f64;
        if let Some(l) = try_factor(k, 0.0) {
            return Ok(Cholesky { l, jitter: 0.0 });
        }
        let mut tried = Vec::with_capacity(JITTER_LADDER.len());
        for rel in JITTER_LADDER {
            let jitter = rel * mean_diag.abs().max(f64::MIN_POSITIVE);
            tried.push(jitter);
            if let Some(l) = try_factor(k, jitter) {
                log::debug!("cholesky needed jitter {jitter:e}");
                return Ok(Cholesky { l, jitter });
            }
        }
        Err(Error::Conditioning { ladder: tried })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Diagonal jitter that was added before the successful factorisation.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| Float::ln(*d)).sum::<f64>()
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l.solve_lower_triangular(b).expect("cholesky factor has a positive diagonal")
    }

    /// `K^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = self.solve_lower(b);
        self.l.tr_solve_lower_triangular(&z).expect("cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let linv = self
            .l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("cholesky factor has a positive diagonal");
        linv.tr_mul(&linv)
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

fn try_factor(k: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = k.nrows();
    let mut a = k.clone();
    if jitter > 0.0 {
        for i in 0..n {
            a[(i, i)] += jitter;
        }
    }
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = a.cholesky()?;
    let l = chol.unpack();
    // reject numerically singular factorisations that nalgebra lets through
    let floor = 1e-15 * max_diag;
    if l.diagonal().iter().any(|d| !(d * d > floor) || !d.is_finite()) {
        return None;
    }
    Some(l)
}

/// `max_{i,j} |a_ij - a_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}
