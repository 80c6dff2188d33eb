//! Squared-exponential covariance and its mixed partial derivatives.
//!
//! The kernel is `k(x, x') = a^2 exp(-1/2 |x - x'|^2_G)` with
//! `|v|^2_G = sum_d g_d v_d^2`. The entries `g_d` of [`KernelHyperparams::lengthscales`]
//! therefore act as *inverse squared* length scales: larger values mean faster
//! decorrelation.
//!
//! Derivatives are evaluated in closed form. Since `k` depends on `δ = x - x'` and
//! factorises across dimensions, `∂^α_x ∂^β_x' k = (-1)^|β| a^2 Π_d p_{n_d}(δ_d) e^{-g_d δ_d^2 / 2}`
//! with `n = α + β` and `p_n` the polynomial satisfying `∂^n e^{-g t^2/2} = p_n(t) e^{-g t^2/2}`.
//! The polynomials obey `p_{n+1} = p_n' - g t p_n`, which for this Gaussian collapses to the
//! three-term recurrence `p_{n+1}(t) = -g t p_n(t) - n g p_{n-1}(t)`.

use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

/// Default cap on the derivative order taken on each kernel argument.
pub const DEFAULT_MAX_ORDER: u32 = 2;

/// Amplitude and per-dimension inverse squared length scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHyperparams")]
pub struct KernelHyperparams {
    gamma_alpha: f64,
    lengthscales: Vec<f64>,
}

#[derive(Deserialize)]
struct RawHyperparams {
    gamma_alpha: f64,
    lengthscales: Vec<f64>,
}

impl TryFrom<RawHyperparams> for KernelHyperparams {
    type Error = Error;

    fn try_from(raw: RawHyperparams) -> Result<Self> {
        KernelHyperparams::new(raw.gamma_alpha, raw.lengthscales)
    }
}

impl KernelHyperparams {
    pub fn new(gamma_alpha: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(invalid("kernel needs at least one input dimension"));
        }
        if !(gamma_alpha > 0.0 && gamma_alpha.is_finite()) {
            return Err(invalid("gamma_alpha must be positive and finite"));
        }
        if lengthscales.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(invalid("every lengthscale entry must be positive and finite"));
        }
        Ok(KernelHyperparams { gamma_alpha, lengthscales })
    }

    /// Same inverse squared length scale on every axis.
    pub fn isotropic(gamma_alpha: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        KernelHyperparams::new(gamma_alpha, alloc::vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn gamma_alpha(&self) -> f64 {
        self.gamma_alpha
    }

    /// Prior variance `γ_α²` at coincident inputs.
    pub fn signal_variance(&self) -> f64 {
        self.gamma_alpha * self.gamma_alpha
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    /// `Σ_d g_d v_d²`.
    pub fn weighted_sq_norm(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.lengthscales).map(|(vi, g)| g * vi * vi).sum()
    }

    /// Weighted squared distance between two points.
    pub fn weighted_sq_dist(&self, x: &[f64], xp: &[f64]) -> f64 {
        x.iter()
            .zip(xp)
            .zip(&self.lengthscales)
            .map(|((a, b), g)| g * (a - b) * (a - b))
            .sum()
    }

    /// `[ln γ_α, ln g_1, ..., ln g_D]`.
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 1);
        v.push(Float::ln(self.gamma_alpha));
        v.extend(self.lengthscales.iter().map(|g| Float::ln(*g)));
        v
    }

    pub fn from_log_params(p: &[f64]) -> Result<Self> {
        if p.len() < 2 {
            return Err(invalid("log parameter vector too short"));
        }
        KernelHyperparams::new(Float::exp(p[0]), p[1..].iter().map(|v| Float::exp(*v)).collect())
    }
}

/// Per-dimension derivative orders.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(orders: Vec<u32>) -> Self {
        MultiIndex(orders)
    }

    pub fn zero(dim: usize) -> Self {
        MultiIndex(alloc::vec![0; dim])
    }

    /// `order` derivatives along axis `axis`.
    pub fn axis(dim: usize, axis: usize, order: u32) -> Self {
        let mut v = alloc::vec![0; dim];
        v[axis] = order;
        MultiIndex(v)
    }

    pub fn orders(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn total_order(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&o| o == 0)
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<Vec<u32>> for MultiIndex {
    fn from(v: Vec<u32>) -> Self {
        MultiIndex(v)
    }
}

/// Runtime bound on the derivative order applied to each kernel argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub max_order: u32,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { max_order: DEFAULT_MAX_ORDER }
    }
}

impl KernelConfig {
    pub fn check(&self, idx: &MultiIndex) -> Result<()> {
        let order = idx.total_order();
        if order > self.max_order {
            Err(Error::UnsupportedOrder { order, max: self.max_order })
        } else {
            Ok(())
        }
    }

    pub fn derivative(
        &self,
        alpha: &MultiIndex,
        beta: &MultiIndex,
        x: &[f64],
        xp: &[f64],
        hp: &KernelHyperparams,
    ) -> Result<f64> {
        self.check(alpha)?;
        self.check(beta)?;
        let d = hp.dim();
        check_dim(d, x.len())?;
        check_dim(d, xp.len())?;
        check_dim(d, alpha.dim())?;
        check_dim(d, beta.dim())?;
        Ok(derivative_unchecked(alpha.orders(), beta.orders(), x, xp, hp))
    }
}

pub fn se_kernel(x: &[f64], xp: &[f64], hp: &KernelHyperparams) -> Result<f64> {
    check_dim(hp.dim(), x.len())?;
    check_dim(hp.dim(), xp.len())?;
    Ok(hp.signal_variance() * Float::exp(-0.5 * hp.weighted_sq_dist(x, xp)))
}

/// `∂^α_x ∂^β_{x'} k(x, x')` with the default order cap.
pub fn se_kernel_derivative(
    alpha: &MultiIndex,
    beta: &MultiIndex,
    x: &[f64],
    xp: &[f64],
    hp: &KernelHyperparams,
) -> Result<f64> {
    KernelConfig::default().derivative(alpha, beta, x, xp, hp)
}

/// Value of `p_n(t)` for the Gaussian `exp(-g t²/2)`.
#[inline]
pub(crate) fn hermite_factor(n: u32, t: f64, g: f64) -> f64 {
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..n {
        let next = -g * t * cur - k as f64 * g * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `p_n, p_{n-1}, p_{n-2}` (lower ones zero when the index is negative).
#[inline]
fn hermite_triple(n: u32, t: f64, g: f64) -> (f64, f64, f64) {
    let (mut pm2, mut pm1, mut cur) = (0.0, 0.0, 1.0);
    for k in 0..n {
        let next = -g * t * cur - k as f64 * g * pm1;
        pm2 = pm1;
        pm1 = cur;
        cur = next;
    }
    (cur, pm1, pm2)
}

pub(crate) fn derivative_unchecked(
    alpha: &[u32],
    beta: &[u32],
    x: &[f64],
    xp: &[f64],
    hp: &KernelHyperparams,
) -> f64 {
    let mut poly = 1.0;
    let mut sq = 0.0;
    let mut beta_total = 0;
    for d in 0..x.len() {
        let t = x[d] - xp[d];
        let g = hp.lengthscales[d];
        sq += g * t * t;
        let n = alpha[d] + beta[d];
        beta_total += beta[d];
        if n > 0 {
            poly *= hermite_factor(n, t, g);
        }
    }
    let sign = if beta_total % 2 == 0 { 1.0 } else { -1.0 };
    sign * hp.signal_variance() * poly * Float::exp(-0.5 * sq)
}

/// Value of `∂^α_x ∂^β_{x'} k` together with its partial derivatives with respect to each
/// raw lengthscale entry `g_d`, written into `grad_g`.
pub(crate) fn derivative_with_lengthscale_grad(
    alpha: &[u32],
    beta: &[u32],
    x: &[f64],
    xp: &[f64],
    hp: &KernelHyperparams,
    grad_g: &mut [f64],
) -> f64 {
    let dim = x.len();
    let mut sq = 0.0;
    let mut beta_total = 0;
    // factor_d = p_n(t), dfactor_d = ∂_g [p_n e^{-g t²/2}] / e^{-g t²/2}
    let mut factors = [0.0f64; 8];
    let mut dfactors = [0.0f64; 8];
    let mut heap_f;
    let mut heap_df;
    let (factors, dfactors): (&mut [f64], &mut [f64]) = if dim <= 8 {
        (&mut factors[..dim], &mut dfactors[..dim])
    } else {
        heap_f = alloc::vec![0.0; dim];
        heap_df = alloc::vec![0.0; dim];
        (&mut heap_f[..], &mut heap_df[..])
    };
    for d in 0..dim {
        let t = x[d] - xp[d];
        let g = hp.lengthscales[d];
        sq += g * t * t;
        let n = alpha[d] + beta[d];
        beta_total += beta[d];
        let (p, p1, p2) = hermite_triple(n, t, g);
        let nf = n as f64;
        factors[d] = p;
        dfactors[d] = -0.5 * (t * t * p + 2.0 * nf * t * p1 + nf * (nf - 1.0) * p2);
    }
    let sign = if beta_total % 2 == 0 { 1.0 } else { -1.0 };
    let scale = sign * hp.signal_variance() * Float::exp(-0.5 * sq);
    let mut value = scale;
    for f in factors.iter() {
        value *= f;
    }
    for d in 0..dim {
        let mut v = scale * dfactors[d];
        for (e, f) in factors.iter().enumerate() {
            if e != d {
                v *= f;
            }
        }
        grad_g[d] = v;
    }
    value
}
