use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{invalid, Result};

type FieldFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A deterministic scalar field `R^D -> R`, used for operator coefficients and
/// right-hand sides.
#[derive(Clone)]
pub enum ScalarField {
    Constant(f64),
    Function(Arc<FieldFn>),
}

impl ScalarField {
    pub fn constant(c: f64) -> Self {
        ScalarField::Constant(c)
    }

    pub fn zero() -> Self {
        ScalarField::Constant(0.0)
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        ScalarField::Function(Arc::new(f))
    }

    /// Piecewise-linear interpolation of samples on a strictly increasing 1D grid,
    /// held constant beyond the ends.
    pub fn grid_1d(xs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if xs.len() != values.len() || xs.is_empty() {
            return Err(invalid("grid field needs matching, nonempty abscissae and values"));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("grid field abscissae must be strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid field values must be finite"));
        }
        Ok(ScalarField::from_fn(move |x| interp_1d(&xs, &values, x[0])))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarField::Constant(c) => *c,
            ScalarField::Function(f) => f(x),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ScalarField::Constant(_))
    }

    pub fn scaled(&self, a: f64) -> Self {
        match self {
            ScalarField::Constant(c) => ScalarField::Constant(a * c),
            ScalarField::Function(f) => {
                let f = f.clone();
                ScalarField::from_fn(move |x| a * f(x))
            }
        }
    }
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarField::Constant(c) => write!(f, "Constant({c})"),
            ScalarField::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl From<f64> for ScalarField {
    fn from(c: f64) -> Self {
        ScalarField::Constant(c)
    }
}

fn interp_1d(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + w * (ys[hi] - ys[lo])
}
