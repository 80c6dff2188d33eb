//! Joint covariance over observations and residual constraints, the negative log
//! marginal likelihood and hyperparameter training.
//!
//! Rows of the joint system are point functionals of `u`: the first `n` rows are the
//! noisy observations `y_i = u(x_i) + ε_i`, the optional next `n` rows are the residual
//! observations `L u(x_i) = f(x_i)`. All positive hyperparameters are optimised in
//! log space: `θ = [ln γ_α, ln g_1, ..., ln g_D, ln σ_u²]`, the last entry only when the
//! observation noise is trainable.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::kernel::{KernelConfig, KernelHyperparams};
use crate::lbfgs::{minimize, LbfgsConfig};
use crate::linalg::Cholesky;
use crate::operator::{cross_covariance, cross_covariance_with_grad, AffineConstraint, Functional};
use crate::points::PointSet;

/// Noisy scalar observations at `n` locations in `R^D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    points: PointSet,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(points: PointSet, y: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        check_dim(points.len(), y.len())?;
        if y.iter().chain(points.as_flat()).any(|v| !v.is_finite()) {
            return Err(invalid("dataset contains non-finite values"));
        }
        let dups = points.duplicate_pairs();
        if !dups.is_empty() {
            log::warn!("dataset has {} pairs of coincident input locations", dups.len());
        }
        Ok(Dataset { points, y })
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    /// The dataset with `y` multiplied by `a`.
    pub fn scaled(&self, a: f64) -> Dataset {
        Dataset { points: self.points.clone(), y: self.y.iter().map(|v| a * v).collect() }
    }

    pub fn permuted(&self, order: &[usize]) -> Dataset {
        Dataset { points: self.points.select(order), y: order.iter().map(|&i| self.y[i]).collect() }
    }
}

/// Observation-noise and residual-slack variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_u2: f64,
    /// Whether `sigma_u2` is optimised together with the kernel hyperparameters.
    pub train_sigma_u2: bool,
    /// Slack added to the residual block; tuned, never optimised.
    pub sigma_r2: f64,
}

impl NoiseConfig {
    pub fn new(sigma_u2: f64, sigma_r2: f64) -> Result<Self> {
        let cfg = NoiseConfig { sigma_u2, train_sigma_u2: true, sigma_r2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fixed(sigma_u2: f64, sigma_r2: f64) -> Result<Self> {
        Ok(NoiseConfig { train_sigma_u2: false, ..NoiseConfig::new(sigma_u2, sigma_r2)? })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_u2 >= 0.0 && self.sigma_u2.is_finite()) {
            return Err(invalid("sigma_u2 must be finite and nonnegative"));
        }
        if !(self.sigma_r2 > 0.0 && self.sigma_r2.is_finite()) {
            return Err(invalid("sigma_r2 must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

/// An explicit starting point added to the random restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartPoint {
    pub hp: KernelHyperparams,
    pub sigma_u2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub restarts: usize,
    pub seed: u64,
    pub lbfgs: LbfgsConfig,
    pub gradient: GradientMode,
    pub kernel: KernelConfig,
    /// Log-space box outside which the objective is treated as undefined.
    pub log_bound: f64,
    pub extra_starts: Vec<StartPoint>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            restarts: 8,
            seed: 0,
            lbfgs: LbfgsConfig::default(),
            gradient: GradientMode::Analytic,
            kernel: KernelConfig::default(),
            log_bound: 25.0,
            extra_starts: Vec::new(),
        }
    }
}

/// Outcome of one optimiser start.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub initial_nlml: Option<f64>,
    pub final_nlml: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Rows of a joint Gaussian system: a point, the functional observed there and the
/// variance added on the diagonal.
pub(crate) struct Rows<'a> {
    pub points: Vec<&'a [f64]>,
    pub functionals: Vec<Functional>,
    pub diag: Vec<f64>,
}

impl<'a> Rows<'a> {
    pub fn with_capacity(n: usize) -> Self {
        Rows { points: Vec::with_capacity(n), functionals: Vec::with_capacity(n), diag: Vec::with_capacity(n) }
    }

    pub fn push(&mut self, x: &'a [f64], f: Functional, diag: f64) {
        self.points.push(x);
        self.functionals.push(f);
        self.diag.push(diag);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Observation rows at the data followed, when a constraint is given, by residual rows.
    pub fn training(points: &'a PointSet, constraint: Option<&AffineConstraint>, noise: &NoiseConfig) -> Result<Self> {
        let n = points.len();
        let dim = points.dim();
        let mut rows = Rows::with_capacity(if constraint.is_some() { 2 * n } else { n });
        for x in points.rows() {
            rows.push(x, Functional::for_value(dim), noise.sigma_u2);
        }
        if let Some(c) = constraint {
            check_dim(dim, c.dim())?;
            for x in points.rows() {
                let f = c.operator.functional_at(x);
                if !f.is_finite() {
                    return Err(invalid("operator coefficient is not finite at a training point"));
                }
                rows.push(x, f, noise.sigma_r2);
            }
        }
        Ok(rows)
    }

    pub fn covariance(&self, hp: &KernelHyperparams) -> Result<DMatrix<f64>> {
        let n = self.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = cross_covariance(&self.functionals[i], self.points[i], &self.functionals[j], self.points[j], hp);
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j, value: v });
                }
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += self.diag[i];
        }
        Ok(k)
    }
}

fn check_orders(constraint: Option<&AffineConstraint>, cfg: &KernelConfig) -> Result<()> {
    if let Some(c) = constraint {
        for t in c.operator.terms() {
            cfg.check(&t.derivative)?;
        }
    }
    Ok(())
}

/// The joint covariance `[[K_uu + σ_u² I, K_ur], [K_ru, K_rr + σ_r² I]]`, or just the
/// observation block when `constraint` is `None`. No jitter is included.
pub fn assemble_joint_covariance(
    points: &PointSet,
    constraint: Option<&AffineConstraint>,
    hp: &KernelHyperparams,
    noise: &NoiseConfig,
) -> Result<DMatrix<f64>> {
    check_dim(hp.dim(), points.dim())?;
    check_orders(constraint, &KernelConfig::default())?;
    Rows::training(points, constraint, noise)?.covariance(hp)
}

/// `[y; f(X)]` for a constrained model, `y` otherwise.
pub fn joint_targets(dataset: &Dataset, constraint: Option<&AffineConstraint>) -> Vec<f64> {
    let mut out = dataset.y().to_vec();
    if let Some(c) = constraint {
        out.extend(dataset.points().rows().map(|x| c.rhs_at(x)));
    }
    out
}

fn nlml_from_factor(chol: &Cholesky, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let z = chol.solve_lower(y);
    let n = y.len() as f64;
    let value = 0.5 * chol.log_det() + 0.5 * z.norm_squared() + 0.5 * n * Float::ln(2.0 * PI);
    (value, z)
}

/// Negative log marginal likelihood of `yjoint` under the joint covariance.
///
/// `yjoint` has `n` entries for an unconstrained fit and `2n` otherwise.
pub fn nlml(
    points: &PointSet,
    yjoint: &[f64],
    constraint: Option<&AffineConstraint>,
    hp: &KernelHyperparams,
    noise: &NoiseConfig,
) -> Result<f64> {
    let k = assemble_joint_covariance(points, constraint, hp, noise)?;
    check_dim(k.nrows(), yjoint.len())?;
    let chol = Cholesky::new(&k)?;
    Ok(nlml_from_factor(&chol, &DVector::from_column_slice(yjoint)).0)
}

/// Layout of the log-parameter vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamLayout {
    dim: usize,
    train_noise: bool,
}

impl ParamLayout {
    fn len(&self) -> usize {
        1 + self.dim + usize::from(self.train_noise)
    }

    fn pack(&self, hp: &KernelHyperparams, sigma_u2: f64) -> Vec<f64> {
        let mut v = hp.to_log_params();
        if self.train_noise {
            v.push(Float::ln(sigma_u2));
        }
        v
    }

    fn unpack(&self, theta: &[f64], fixed: &NoiseConfig) -> Result<(KernelHyperparams, NoiseConfig)> {
        let hp = KernelHyperparams::from_log_params(&theta[..1 + self.dim])?;
        let mut noise = *fixed;
        if self.train_noise {
            noise.sigma_u2 = Float::exp(theta[1 + self.dim]);
        }
        Ok((hp, noise))
    }
}

/// NLML and its gradient with respect to the log parameters
/// `[ln γ_α, ln g_1..ln g_D, (ln σ_u²)]`.
pub fn nlml_with_gradient(
    points: &PointSet,
    yjoint: &[f64],
    constraint: Option<&AffineConstraint>,
    hp: &KernelHyperparams,
    noise: &NoiseConfig,
) -> Result<(f64, Vec<f64>)> {
    check_dim(hp.dim(), points.dim())?;
    check_orders(constraint, &KernelConfig::default())?;
    let rows = Rows::training(points, constraint, noise)?;
    check_dim(rows.len(), yjoint.len())?;
    analytic_objective(&rows, yjoint, hp, noise.train_sigma_u2.then_some(noise.sigma_u2), points.len())
}

fn analytic_objective(
    rows: &Rows<'_>,
    yjoint: &[f64],
    hp: &KernelHyperparams,
    trained_sigma_u2: Option<f64>,
    n_obs: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = rows.len();
    let dim = hp.dim();
    let mut k = DMatrix::zeros(n, n);
    // dK/dg_d stored per dimension
    let mut dk: Vec<DMatrix<f64>> = (0..dim).map(|_| DMatrix::zeros(n, n)).collect();
    let mut grad_g = alloc::vec![0.0; dim];
    let mut scratch = alloc::vec![0.0; dim];
    for i in 0..n {
        for j in 0..=i {
            let v = cross_covariance_with_grad(
                &rows.functionals[i],
                rows.points[i],
                &rows.functionals[j],
                rows.points[j],
                hp,
                &mut grad_g,
                &mut scratch,
            );
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, col: j, value: v });
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
            for d in 0..dim {
                dk[d][(i, j)] = grad_g[d];
                dk[d][(j, i)] = grad_g[d];
            }
        }
    }
    let kernel_part = k.clone();
    for i in 0..n {
        k[(i, i)] += rows.diag[i];
    }
    let chol = Cholesky::new(&k)?;
    let y = DVector::from_column_slice(yjoint);
    let (value, _) = nlml_from_factor(&chol, &y);
    let alpha = chol.solve(&y);
    // W = K^{-1} - α αᵀ ; dNLML/dp = ½ tr(W dK/dp)
    let mut w = chol.inverse();
    w -= &alpha * alpha.transpose();
    let half_trace = |m: &DMatrix<f64>| 0.5 * w.component_mul(m).sum();

    let mut grad = Vec::with_capacity(1 + dim + 1);
    grad.push(half_trace(&kernel_part) * 2.0);
    for (d, m) in dk.iter().enumerate() {
        grad.push(half_trace(m) * hp.lengthscales()[d]);
    }
    if let Some(s2) = trained_sigma_u2 {
        let tr: f64 = (0..n_obs).map(|i| w[(i, i)]).sum();
        grad.push(0.5 * tr * s2);
    }
    Ok((value, grad))
}

/// An immutable fitted model.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    hp: KernelHyperparams,
    noise: NoiseConfig,
    constraint: Option<AffineConstraint>,
    dataset: Dataset,
    yjoint: Vec<f64>,
    chol: Cholesky,
    nlml_value: f64,
    converged: bool,
    restarts: Vec<RestartOutcome>,
    // observation block K_uu + σ_u² I, reused by every prediction
    obs_chol: Cholesky,
    obs_white: DVector<f64>,
}

impl TrainedModel {
    /// Builds the factorisations for fixed hyperparameters.
    pub fn from_parts(
        dataset: Dataset,
        constraint: Option<AffineConstraint>,
        hp: KernelHyperparams,
        noise: NoiseConfig,
    ) -> Result<Self> {
        noise.validate()?;
        check_dim(hp.dim(), dataset.dim())?;
        let k = assemble_joint_covariance(dataset.points(), constraint.as_ref(), &hp, &noise)?;
        let yjoint = joint_targets(&dataset, constraint.as_ref());
        let chol = Cholesky::new(&k)?;
        let (nlml_value, _) = nlml_from_factor(&chol, &DVector::from_column_slice(&yjoint));
        let n = dataset.len();
        let obs_chol = if constraint.is_some() { Cholesky::new(&k.view((0, 0), (n, n)).into_owned())? } else { chol.clone() };
        let obs_white = obs_chol.solve_lower(&DVector::from_column_slice(dataset.y()));
        Ok(TrainedModel {
            hp,
            noise,
            constraint,
            dataset,
            yjoint,
            chol,
            nlml_value,
            converged: true,
            restarts: Vec::new(),
            obs_chol,
            obs_white,
        })
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hp
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    pub fn constraint(&self) -> Option<&AffineConstraint> {
        self.constraint.as_ref()
    }

    pub fn is_constrained(&self) -> bool {
        self.constraint.is_some()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    /// `[y; f(X)]` (or `y` for an unconstrained model).
    pub fn yjoint(&self) -> &[f64] {
        &self.yjoint
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    pub fn nlml_value(&self) -> f64 {
        self.nlml_value
    }

    /// False when the best restart stopped at the iteration cap.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn restarts(&self) -> &[RestartOutcome] {
        &self.restarts
    }

    pub(crate) fn observation_factor(&self) -> &Cholesky {
        &self.obs_chol
    }

    /// `L_u^{-1} y` for the observation block factor `L_u`.
    pub(crate) fn observation_white(&self) -> &DVector<f64> {
        &self.obs_white
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Median nonzero pairwise coordinate distance along each axis.
fn median_spacing(points: &PointSet) -> Vec<f64> {
    (0..points.dim())
        .map(|d| {
            let mut gaps = Vec::new();
            for i in 0..points.len() {
                for j in (i + 1)..points.len() {
                    let g = (points.row(i)[d] - points.row(j)[d]).abs();
                    if g > 0.0 {
                        gaps.push(g);
                    }
                }
            }
            median(gaps).unwrap_or(1.0)
        })
        .collect()
}

fn mean_var(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Fits kernel hyperparameters (and `σ_u²` when trainable) by multi-start L-BFGS.
pub fn train(
    dataset: &Dataset,
    constraint: Option<&AffineConstraint>,
    noise_init: &NoiseConfig,
    cfg: &TrainingConfig,
) -> Result<TrainedModel> {
    noise_init.validate()?;
    check_orders(constraint, &cfg.kernel)?;
    if let Some(c) = constraint {
        check_dim(dataset.dim(), c.dim())?;
    }
    let dim = dataset.dim();
    let layout = ParamLayout { dim, train_noise: noise_init.train_sigma_u2 };
    let yjoint = joint_targets(dataset, constraint);
    let rows = Rows::training(dataset.points(), constraint, noise_init)?;
    let bound = cfg.log_bound;

    let eval = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        if theta.iter().any(|t| !t.is_finite() || t.abs() > bound) {
            return None;
        }
        let (hp, noise) = layout.unpack(theta, noise_init).ok()?;
        match cfg.gradient {
            GradientMode::Analytic => {
                let mut rows = Rows { points: rows.points.clone(), functionals: rows.functionals.clone(), diag: rows.diag.clone() };
                for d in rows.diag.iter_mut().take(dataset.len()) {
                    *d = noise.sigma_u2;
                }
                analytic_objective(&rows, &yjoint, &hp, noise.train_sigma_u2.then_some(noise.sigma_u2), dataset.len()).ok()
            }
            GradientMode::FiniteDifference => {
                let f = |t: &[f64]| -> Option<f64> {
                    let (hp, noise) = layout.unpack(t, noise_init).ok()?;
                    nlml(dataset.points(), &yjoint, constraint, &hp, &noise).ok()
                };
                let f0 = f(theta)?;
                let h = 1e-5;
                let mut g = Vec::with_capacity(theta.len());
                let mut t = theta.to_vec();
                for i in 0..theta.len() {
                    t[i] = theta[i] + h;
                    let up = f(&t)?;
                    t[i] = theta[i] - h;
                    let dn = f(&t)?;
                    t[i] = theta[i];
                    g.push((up - dn) / (2.0 * h));
                }
                Some((f0, g))
            }
        }
    };

    let starts = initial_points(dataset, noise_init, cfg, &layout);
    let mut outcomes = Vec::with_capacity(starts.len());
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut last_err = None;
    for theta0 in &starts {
        let initial = eval(theta0).map(|(f, _)| f);
        match minimize(eval, theta0, &cfg.lbfgs) {
            Some(m) => {
                outcomes.push(RestartOutcome {
                    initial_nlml: initial,
                    final_nlml: Some(m.f),
                    iterations: m.iterations,
                    converged: m.converged,
                });
                if best.as_ref().map_or(true, |(_, f, _)| m.f < *f) {
                    best = Some((m.x, m.f, m.converged));
                }
            }
            None => {
                outcomes.push(RestartOutcome { initial_nlml: None, final_nlml: None, iterations: 0, converged: false });
                last_err = Some(Error::Conditioning { ladder: crate::linalg::JITTER_LADDER.to_vec() });
            }
        }
    }
    let (theta, _, converged) = best.ok_or_else(|| {
        Error::TrainingFailed(Box::new(last_err.unwrap_or_else(|| invalid("no optimiser starts were configured"))))
    })?;
    if !converged {
        log::warn!("hyperparameter optimisation stopped at the iteration cap");
    }
    let (hp, noise) = layout.unpack(&theta, noise_init)?;
    let mut model = TrainedModel::from_parts(dataset.clone(), constraint.cloned(), hp, noise)?;
    model.converged = converged;
    model.restarts = outcomes;
    Ok(model)
}

fn initial_points(dataset: &Dataset, noise: &NoiseConfig, cfg: &TrainingConfig, layout: &ParamLayout) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spacing = median_spacing(dataset.points());
    let (_, var) = mean_var(dataset.y());
    let sd = Float::sqrt(var).max(1e-3);
    let sigma_u2 = if noise.train_sigma_u2 { (0.1 * var).max(1e-6) } else { noise.sigma_u2 };
    let mut out = Vec::with_capacity(cfg.restarts + cfg.extra_starts.len());
    for r in 0..cfg.restarts {
        let mut theta = Vec::with_capacity(layout.len());
        theta.push(Float::ln(sd));
        for s in &spacing {
            // log-uniform over [1e-2, 1e2] / s², the first start at the centre
            let e: f64 = if r == 0 { 0.0 } else { rng.random_range(-2.0..2.0) };
            theta.push(-2.0 * Float::ln(*s) + e * core::f64::consts::LN_10);
        }
        if layout.train_noise {
            theta.push(Float::ln(sigma_u2));
        }
        out.push(theta);
    }
    for s in &cfg.extra_starts {
        if s.hp.dim() == layout.dim {
            out.push(layout.pack(&s.hp, if layout.train_noise { s.sigma_u2.max(1e-12) } else { noise.sigma_u2 }));
        }
    }
    out
}

/// `10 σ̂_u²`, with `σ̂_u²` taken from an unconstrained pre-fit.
pub fn default_sigma_r2(dataset: &Dataset, cfg: &TrainingConfig) -> Result<f64> {
    let (_, var) = mean_var(dataset.y());
    let init = NoiseConfig::new((0.1 * var).max(1e-6), 1.0)?;
    let plain = train(dataset, None, &init, cfg)?;
    Ok((10.0 * plain.noise().sigma_u2).max(1e-10))
}
