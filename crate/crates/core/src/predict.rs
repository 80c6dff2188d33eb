//! Posterior prediction of `u` and its derivatives with zero-residual constraints imposed
//! on a local extended set, and the product-of-experts boundary correction.

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::field::ScalarField;
use crate::gpr::{Rows, TrainedModel};
use crate::kernel::{KernelHyperparams, MultiIndex};
use crate::linalg::Cholesky;
use crate::operator::{cross_covariance, DerivativeTarget, Functional};
use crate::points::{linspace, tensor_grid, PointSet};

/// Variances below `-VARIANCE_FLOOR` are reported before being clamped to zero.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Lower bound on the boundary expert's variance.
pub const EXPERT_VARIANCE_FLOOR: f64 = 1e-8;

/// Shape of the equally spaced neighbourhood where zero residuals are imposed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedSetConfig {
    pub half_width: Vec<f64>,
    pub count: Vec<usize>,
}

impl ExtendedSetConfig {
    pub fn new(half_width: Vec<f64>, count: Vec<usize>) -> Result<Self> {
        let cfg = ExtendedSetConfig { half_width, count };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn uniform(dim: usize, half_width: f64, count: usize) -> Result<Self> {
        ExtendedSetConfig::new(alloc::vec![half_width; dim], alloc::vec![count; dim])
    }

    /// One-dimensional set covering `[x - half_width, x + half_width]` with spacing close to `step`.
    pub fn from_step(half_width: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(invalid("extended-set step must be positive"));
        }
        let count = Float::round(2.0 * half_width / step) as usize + 1;
        ExtendedSetConfig::uniform(1, half_width, count)
    }

    pub fn dim(&self) -> usize {
        self.half_width.len()
    }

    pub fn size(&self) -> usize {
        self.count.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.half_width.is_empty() || self.half_width.len() != self.count.len() {
            return Err(invalid("extended-set half widths and counts must be nonempty and of equal length"));
        }
        if self.half_width.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(invalid("extended-set half widths must be positive"));
        }
        if self.count.iter().any(|&c| c == 0) {
            return Err(invalid("extended-set counts must be at least 1"));
        }
        Ok(())
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, lo), hi)| *v >= *lo && *v <= *hi)
    }
}

/// Scalar Gaussian belief.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGaussian {
    pub mean: f64,
    pub variance: f64,
}

/// A known value of `∂^α u` at a boundary or initial point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcbcAnchor {
    pub x0: Vec<f64>,
    pub value: f64,
    pub derivative: MultiIndex,
}

impl IcbcAnchor {
    pub fn new(x0: Vec<f64>, value: f64, derivative: MultiIndex) -> Result<Self> {
        if !value.is_finite() || x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("anchor location and value must be finite"));
        }
        check_dim(x0.len(), derivative.dim())?;
        Ok(IcbcAnchor { x0, value, derivative })
    }
}

/// Equally spaced grid over `[x* - w, x* + w]` per axis, optionally clipped to `domain`.
pub fn build_extended_set(x_star: &[f64], cfg: &ExtendedSetConfig, domain: Option<&BoxDomain>) -> Result<PointSet> {
    cfg.validate()?;
    check_dim(cfg.dim(), x_star.len())?;
    if let Some(b) = domain {
        check_dim(x_star.len(), b.lo.len())?;
        check_dim(x_star.len(), b.hi.len())?;
        if !b.contains(x_star) {
            return Err(invalid("test point lies outside the domain box"));
        }
    }
    let axes: Vec<Vec<f64>> = x_star
        .iter()
        .zip(&cfg.half_width)
        .zip(&cfg.count)
        .map(|((x, w), &c)| if c == 1 { alloc::vec![*x] } else { linspace(x - w, x + w, c) })
        .collect();
    let grid = tensor_grid(&axes)?;
    let Some(b) = domain else { return Ok(grid) };
    let mut clipped = PointSet::empty(x_star.len());
    for p in grid.rows().filter(|p| b.contains(p)) {
        clipped.push(p)?;
    }
    if clipped.is_empty() {
        clipped.push(x_star)?;
    }
    Ok(clipped)
}

/// Conditioning data at one test point: the factor of the joint matrix over the training
/// observations and the extended-set residuals, shared by every derivative target.
pub struct LocalConditioner<'m> {
    model: &'m TrainedModel,
    x_star: Vec<f64>,
    extset: PointSet,
    ext_functionals: Vec<Functional>,
    // V = L_u^{-1} K_{uχ}
    v: DMatrix<f64>,
    schur: Cholesky,
    // second block of the whitened targets
    white_ext: DVector<f64>,
}

impl<'m> LocalConditioner<'m> {
    pub fn new(model: &'m TrainedModel, x_star: &[f64], extset: &PointSet) -> Result<Self> {
        check_dim(model.dim(), x_star.len())?;
        let m = extset.len();
        if m > 0 {
            check_dim(model.dim(), extset.dim())?;
        }
        let hp = model.hyperparams();
        let pts = model.dataset().points();
        let n = pts.len();
        let constraint = match (model.constraint(), m) {
            (_, 0) => None,
            (Some(c), _) => Some(c),
            (None, _) => return Err(invalid("an extended set requires a constrained model")),
        };
        let mut ext_functionals = Vec::with_capacity(m);
        let mut rhs = DVector::zeros(m);
        if let Some(c) = constraint {
            for (j, x) in extset.rows().enumerate() {
                let f = c.operator.functional_at(x);
                if !f.is_finite() {
                    return Err(invalid("operator coefficient is not finite on the extended set"));
                }
                ext_functionals.push(f);
                rhs[j] = c.rhs_at(x);
            }
        }
        let value = Functional::for_value(model.dim());
        let mut k_ue = DMatrix::zeros(n, m);
        for (i, xi) in pts.rows().enumerate() {
            for (j, xj) in extset.rows().enumerate() {
                let v = cross_covariance(&value, xi, &ext_functionals[j], xj, hp);
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: n + j, value: v });
                }
                k_ue[(i, j)] = v;
            }
        }
        let mut ext_rows = Rows::with_capacity(m);
        for (j, x) in extset.rows().enumerate() {
            ext_rows.push(x, ext_functionals[j].clone(), model.noise().sigma_r2);
        }
        let k_ee = ext_rows.covariance(hp)?;
        let lu = model.observation_factor();
        let v = if m > 0 {
            lu.l().solve_lower_triangular(&k_ue).expect("observation factor has a positive diagonal")
        } else {
            DMatrix::zeros(n, 0)
        };
        let schur_mat = k_ee - v.tr_mul(&v);
        let schur = Cholesky::new(&schur_mat)?;
        let white_ext = if m > 0 {
            let r = rhs - v.tr_mul(model.observation_white());
            schur.solve_lower(&r)
        } else {
            DVector::zeros(0)
        };
        Ok(LocalConditioner { model, x_star: x_star.to_vec(), extset: extset.clone(), ext_functionals, v, schur, white_ext })
    }

    pub fn extended_set(&self) -> &PointSet {
        &self.extset
    }

    pub fn posterior(&self, target: &DerivativeTarget) -> Result<PosteriorGaussian> {
        let model = self.model;
        let hp = model.hyperparams();
        check_dim(model.dim(), target.derivative().dim())?;
        let tf = target.functional();
        let x = &self.x_star;
        let value = Functional::for_value(model.dim());
        let pts = model.dataset().points();
        let k_u = DVector::from_iterator(pts.len(), pts.rows().map(|xi| cross_covariance(&tf, x, &value, xi, hp)));
        let prior = cross_covariance(&tf, x, &tf, x, hp);
        let z1 = model.observation_factor().solve_lower(&k_u);
        let mut mean = z1.dot(model.observation_white());
        let mut reduction = z1.norm_squared();
        if !self.extset.is_empty() {
            let k_e = DVector::from_iterator(
                self.extset.len(),
                self.extset.rows().zip(&self.ext_functionals).map(|(xj, f)| cross_covariance(&tf, x, f, xj, hp)),
            );
            let z2 = self.schur.solve_lower(&(k_e - self.v.tr_mul(&z1)));
            mean += z2.dot(&self.white_ext);
            reduction += z2.norm_squared();
        }
        let mut variance = prior - reduction;
        if !(mean.is_finite() && variance.is_finite()) {
            return Err(invalid("posterior moments are not finite"));
        }
        if variance < 0.0 {
            if variance < -VARIANCE_FLOOR * prior.abs().max(1.0) {
                log::warn!("posterior variance {variance:e} clamped to zero");
            }
            variance = 0.0;
        }
        Ok(PosteriorGaussian { mean, variance })
    }
}

/// Posterior of `target` at `x_star` given the training data and zero-residual (more
/// precisely `r = f`) observations on `extset`.
pub fn posterior(
    model: &TrainedModel,
    target: &DerivativeTarget,
    x_star: &[f64],
    extset: &PointSet,
) -> Result<PosteriorGaussian> {
    LocalConditioner::new(model, x_star, extset)?.posterior(target)
}

fn expert_variance(x_star: &[f64], anchor: &IcbcAnchor, hp: &KernelHyperparams) -> f64 {
    let d2 = hp.weighted_sq_dist(x_star, &anchor.x0);
    (Float::exp_m1(d2)).max(EXPERT_VARIANCE_FLOOR)
}

/// Product of `base` with the boundary expert `N(anchor.value, exp(|x* - x0|²) - 1)`.
pub fn poe_correct(base: PosteriorGaussian, anchor: &IcbcAnchor, x_star: &[f64], hp: &KernelHyperparams) -> PosteriorGaussian {
    let sb = expert_variance(x_star, anchor, hp);
    if base.variance <= 0.0 {
        return base;
    }
    let (pa, pb) = (1.0 / base.variance, 1.0 / sb);
    let variance = 1.0 / (pa + pb);
    let mean = variance * (pa * base.mean + pb * anchor.value);
    PosteriorGaussian { mean, variance }
}

/// Normalising constant `N(ū; u_anchor, S + S_b)` of the expert product.
pub fn poe_normalizer(base: PosteriorGaussian, anchor: &IcbcAnchor, x_star: &[f64], hp: &KernelHyperparams) -> f64 {
    let s = base.variance + expert_variance(x_star, anchor, hp);
    let d = base.mean - anchor.value;
    Float::exp(-0.5 * d * d / s) / Float::sqrt(2.0 * PI * s)
}

/// Nearest anchor for `derivative`, ties to the lowest index.
pub fn nearest_anchor<'a>(anchors: &'a [IcbcAnchor], derivative: &MultiIndex, x: &[f64]) -> Option<&'a IcbcAnchor> {
    let mut best: Option<(&IcbcAnchor, f64)> = None;
    for a in anchors.iter().filter(|a| &a.derivative == derivative) {
        let d: f64 = a.x0.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((a, d));
        }
    }
    best.map(|(a, _)| a)
}

/// Settings shared by every point of a batch prediction.
#[derive(Clone, Debug, Default)]
pub struct FieldOptions<'a> {
    pub extended: Option<&'a ExtendedSetConfig>,
    pub domain: Option<&'a BoxDomain>,
    pub anchors: &'a [IcbcAnchor],
}

/// Posteriors of every target at one point.
pub fn predict_point(
    model: &TrainedModel,
    targets: &[DerivativeTarget],
    x: &[f64],
    opts: &FieldOptions<'_>,
) -> Result<Vec<PosteriorGaussian>> {
    let extset = match (opts.extended, model.is_constrained()) {
        (Some(cfg), true) => build_extended_set(x, cfg, opts.domain)?,
        _ => PointSet::empty(model.dim()),
    };
    let local = LocalConditioner::new(model, x, &extset)?;
    targets
        .iter()
        .map(|t| {
            let base = local.posterior(t)?;
            Ok(match nearest_anchor(opts.anchors, t.derivative(), x) {
                Some(a) => poe_correct(base, a, x, model.hyperparams()),
                None => base,
            })
        })
        .collect()
}

/// Posteriors on a grid, indexed `[target][grid point]`.
pub fn predict_field(
    model: &TrainedModel,
    targets: &[DerivativeTarget],
    grid: &PointSet,
    opts: &FieldOptions<'_>,
) -> Result<Vec<Vec<PosteriorGaussian>>> {
    if grid.is_empty() {
        return Err(invalid("prediction grid is empty"));
    }
    let mut out: Vec<Vec<PosteriorGaussian>> = targets.iter().map(|_| Vec::with_capacity(grid.len())).collect();
    for (index, x) in grid.rows().enumerate() {
        let post = predict_point(model, targets, x, opts)
            .map_err(|e| Error::AtGridPoint { index, source: alloc::boxed::Box::new(e) })?;
        for (col, p) in out.iter_mut().zip(post) {
            col.push(p);
        }
    }
    Ok(out)
}

/// The posterior mean of `target` as a lazily evaluated field; evaluation failures map to NaN.
pub fn posterior_mean_field(model: Arc<TrainedModel>, target: DerivativeTarget, extended: Option<ExtendedSetConfig>) -> ScalarField {
    ScalarField::from_fn(move |x| {
        let opts = FieldOptions { extended: extended.as_ref(), ..Default::default() };
        predict_point(&model, core::slice::from_ref(&target), x, &opts).map(|p| p[0].mean).unwrap_or(f64::NAN)
    })
}
