//! Scalar parameter identification by grid search over the combined data-fit and
//! equation-residual loss.

use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gpr::{train, Dataset, NoiseConfig, TrainedModel, TrainingConfig};
use crate::picard::{picard_solve, NonlinearProblem, PicardConfig};
use crate::points::PointSet;
use crate::predict::{predict_point, ExtendedSetConfig, FieldOptions};

pub type ProblemFamily = Arc<dyn Fn(f64) -> Arc<dyn NonlinearProblem> + Send + Sync>;

/// Candidate parameters, the equation they select and where its residual is measured.
#[derive(Clone)]
pub struct ParamScenario {
    pub param_grid: Vec<f64>,
    pub problem_of: ProblemFamily,
    pub design_points: PointSet,
}

impl ParamScenario {
    pub fn new(param_grid: Vec<f64>, problem_of: ProblemFamily, design_points: PointSet) -> Result<Self> {
        if param_grid.is_empty() || param_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("parameter grid must be nonempty and strictly increasing"));
        }
        if design_points.is_empty() {
            return Err(invalid("design point set is empty"));
        }
        Ok(ParamScenario { param_grid, problem_of, design_points })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdentMode {
    /// Refit the equation-constrained model for every candidate parameter.
    Gprc,
    /// Fit an unconstrained model once and reuse its derivative posteriors.
    GprBaseline,
}

#[derive(Clone, Debug)]
pub struct IdentConfig {
    pub extended: Option<ExtendedSetConfig>,
    pub noise: NoiseConfig,
    pub training: TrainingConfig,
    /// Linearised refits per candidate in GPRC mode.
    pub picard_iters: usize,
    /// Weight of the residual term relative to the data term.
    pub residual_weight: f64,
    /// Quadratic refinement around the grid minimiser.
    pub refine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub mu: Vec<f64>,
    pub loss: Vec<f64>,
    pub argmin_mu: f64,
    /// Three-point quadratic refinement of `argmin_mu`, when requested and available.
    pub refined_mu: Option<f64>,
}

fn mean_sq(v: impl Iterator<Item = f64>) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for x in v {
        acc += x * x;
        n += 1;
    }
    acc / n as f64
}

/// Posterior means of every target at every point, indexed `[point][target]`.
fn means_at(
    model: &TrainedModel,
    problem: &dyn NonlinearProblem,
    points: &PointSet,
    extended: Option<&ExtendedSetConfig>,
) -> Result<Vec<Vec<f64>>> {
    let opts = FieldOptions { extended, ..Default::default() };
    points
        .rows()
        .map(|x| Ok(predict_point(model, problem.residual_targets(), x, &opts)?.iter().map(|p| p.mean).collect()))
        .collect()
}

fn data_term(model: &TrainedModel, dataset: &Dataset, extended: Option<&ExtendedSetConfig>) -> Result<f64> {
    let opts = FieldOptions { extended, ..Default::default() };
    let target = [crate::operator::DerivativeTarget::value(dataset.dim())];
    let mut resid = Vec::with_capacity(dataset.len());
    for (x, y) in dataset.points().rows().zip(dataset.y()) {
        resid.push(y - predict_point(model, &target, x, &opts)?[0].mean);
    }
    Ok(mean_sq(resid.into_iter()))
}

/// Unconstrained fit whose derivative means are shared across every candidate parameter.
pub struct BaselineFit {
    pub model: TrainedModel,
    data_term: f64,
    design_means: Vec<Vec<f64>>,
}

impl BaselineFit {
    pub fn new(dataset: &Dataset, scenario: &ParamScenario, cfg: &IdentConfig) -> Result<Self> {
        let model = train(dataset, None, &cfg.noise, &cfg.training)?;
        let probe = (scenario.problem_of)(scenario.param_grid[0]);
        let design_means = means_at(&model, probe.as_ref(), &scenario.design_points, None)?;
        let data_term = data_term(&model, dataset, None)?;
        Ok(BaselineFit { model, data_term, design_means })
    }

    pub fn data_term(&self) -> f64 {
        self.data_term
    }

    pub fn loss(&self, mu: f64, scenario: &ParamScenario, weight: f64) -> f64 {
        let problem = (scenario.problem_of)(mu);
        let r = scenario
            .design_points
            .rows()
            .zip(&self.design_means)
            .map(|(x, means)| problem.true_residual(x, means));
        self.data_term + weight * mean_sq(r)
    }
}

fn gprc_loss(mu: f64, dataset: &Dataset, scenario: &ParamScenario, cfg: &IdentConfig) -> Result<f64> {
    let problem = (scenario.problem_of)(mu);
    let picard_cfg = PicardConfig::new(cfg.picard_iters.max(1), 0.0, scenario.design_points.clone())?;
    let outcome = picard_solve(dataset, problem.as_ref(), cfg.extended.as_ref(), &cfg.noise, &cfg.training, &picard_cfg)
        .map_err(|f| f.error)?;
    let (iteration, model) = outcome.best_constrained();
    let rmse = outcome.history[iteration].residual_rmse;
    Ok(data_term(model, dataset, cfg.extended.as_ref())? + cfg.residual_weight * rmse * rmse)
}

/// `L(μ) = (1/n) Σ (y_i - û_i)² + w (1/m) Σ r_j(μ)²`; inner failures give `+inf`.
pub fn loss_at(mu: f64, dataset: &Dataset, scenario: &ParamScenario, mode: IdentMode, cfg: &IdentConfig) -> f64 {
    let result = match mode {
        IdentMode::Gprc => gprc_loss(mu, dataset, scenario, cfg),
        IdentMode::GprBaseline => BaselineFit::new(dataset, scenario, cfg).map(|b| b.loss(mu, scenario, cfg.residual_weight)),
    };
    match result {
        Ok(v) if v.is_finite() => v,
        Ok(v) => {
            log::warn!("loss at mu={mu} is not finite ({v})");
            f64::INFINITY
        }
        Err(e) => {
            log::warn!("loss at mu={mu} failed: {e}");
            f64::INFINITY
        }
    }
}

/// Builds a curve from per-candidate losses; ties go to the smaller parameter.
pub fn curve_from_losses(mu: Vec<f64>, loss: Vec<f64>, refine: bool) -> Result<LossCurve> {
    let mut best: Option<usize> = None;
    for (i, l) in loss.iter().enumerate() {
        if l.is_finite() && best.map_or(true, |b| *l < loss[b]) {
            best = Some(i);
        }
    }
    let b = best.ok_or(Error::IdentificationFailed)?;
    let refined_mu = if refine { quadratic_vertex(&mu, &loss, b) } else { None };
    Ok(LossCurve { argmin_mu: mu[b], mu, loss, refined_mu })
}

fn quadratic_vertex(mu: &[f64], loss: &[f64], b: usize) -> Option<f64> {
    if b == 0 || b + 1 >= mu.len() {
        return None;
    }
    let (x0, x1, x2) = (mu[b - 1], mu[b], mu[b + 1]);
    let (y0, y1, y2) = (loss[b - 1], loss[b], loss[b + 1]);
    if !(y0.is_finite() && y2.is_finite()) {
        return None;
    }
    let num = (x1 - x0) * (x1 - x0) * (y1 - y2) - (x1 - x2) * (x1 - x2) * (y1 - y0);
    let den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0);
    if den == 0.0 {
        return None;
    }
    let v = x1 - 0.5 * num / den;
    (v > x0 && v < x2).then_some(v)
}

/// Evaluates the loss over the whole grid.
pub fn identify(dataset: &Dataset, scenario: &ParamScenario, mode: IdentMode, cfg: &IdentConfig) -> Result<LossCurve> {
    let loss: Vec<f64> = match mode {
        IdentMode::GprBaseline => {
            let base = BaselineFit::new(dataset, scenario, cfg).map_err(|_| Error::IdentificationFailed)?;
            scenario.param_grid.iter().map(|&mu| base.loss(mu, scenario, cfg.residual_weight)).collect()
        }
        IdentMode::Gprc => scenario.param_grid.iter().map(|&mu| loss_at(mu, dataset, scenario, mode, cfg)).collect(),
    };
    curve_from_losses(scenario.param_grid.clone(), loss, cfg.refine)
}
