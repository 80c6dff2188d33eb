//! Picard linearisation: refit a constrained model around the previous posterior mean.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::ScalarField;
use crate::gpr::{train, Dataset, NoiseConfig, StartPoint, TrainedModel, TrainingConfig};
use crate::kernel::MultiIndex;
use crate::operator::{AffineConstraint, DerivativeTarget};
use crate::points::PointSet;
use crate::predict::{posterior_mean_field, predict_point, ExtendedSetConfig, FieldOptions};

/// A differential equation `F(x, u, ∂u, ...) = 0` together with the splitting used to
/// linearise it around a state estimate `u₀`.
pub trait NonlinearProblem: Send + Sync {
    fn dim(&self) -> usize;

    /// The linear equation obtained by freezing the nonlinear factors at `u0`.
    fn linearize(&self, u0: ScalarField) -> AffineConstraint;

    /// Derivatives of `u` needed by [`NonlinearProblem::true_residual`].
    fn residual_targets(&self) -> &[DerivativeTarget];

    /// `F` at `x`, given the values of [`NonlinearProblem::residual_targets`] in order.
    fn true_residual(&self, x: &[f64], values: &[f64]) -> f64;
}

/// Adapter exposing a linear equation through the [`NonlinearProblem`] interface.
pub struct LinearProblem {
    constraint: AffineConstraint,
    targets: Vec<DerivativeTarget>,
}

impl LinearProblem {
    pub fn new(constraint: AffineConstraint) -> Self {
        let mut targets: Vec<DerivativeTarget> = Vec::new();
        for t in constraint.operator.terms() {
            let dt = DerivativeTarget(t.derivative.clone());
            if !targets.contains(&dt) {
                targets.push(dt);
            }
        }
        LinearProblem { constraint, targets }
    }

    pub fn constraint(&self) -> &AffineConstraint {
        &self.constraint
    }
}

impl NonlinearProblem for LinearProblem {
    fn dim(&self) -> usize {
        self.constraint.dim()
    }

    fn linearize(&self, _u0: ScalarField) -> AffineConstraint {
        self.constraint.clone()
    }

    fn residual_targets(&self) -> &[DerivativeTarget] {
        &self.targets
    }

    fn true_residual(&self, x: &[f64], values: &[f64]) -> f64 {
        let lookup = |m: &MultiIndex| {
            let i = self.targets.iter().position(|t| t.derivative() == m).expect("target list covers every term");
            values[i]
        };
        self.constraint.operator.apply(x, lookup) - self.constraint.rhs_at(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    /// Number of linearised refits after the initial unconstrained fit.
    pub max_iters: usize,
    /// Stop once an iteration improves the true-residual RMSE by less than this.
    pub rmse_tol: f64,
    pub eval_grid: PointSet,
}

impl PicardConfig {
    pub fn new(max_iters: usize, rmse_tol: f64, eval_grid: PointSet) -> Result<Self> {
        if max_iters == 0 {
            return Err(invalid("picard needs at least one iteration"));
        }
        if eval_grid.is_empty() {
            return Err(invalid("picard evaluation grid is empty"));
        }
        Ok(PicardConfig { max_iters, rmse_tol, eval_grid })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardRecord {
    pub iteration: usize,
    pub nlml: f64,
    pub residual_rmse: f64,
}

#[derive(Clone, Debug)]
pub struct PicardOutcome {
    pub best: Arc<TrainedModel>,
    pub best_iteration: usize,
    pub history: Vec<PicardRecord>,
    /// Every fitted model, index = iteration (0 is the unconstrained fit).
    pub iterates: Vec<Arc<TrainedModel>>,
}

impl PicardOutcome {
    /// Lowest-residual iterate among the constrained refits.
    pub fn best_constrained(&self) -> (usize, &Arc<TrainedModel>) {
        let mut best = 1;
        for r in &self.history[1..] {
            if r.residual_rmse < self.history[best].residual_rmse {
                best = r.iteration;
            }
        }
        (best, &self.iterates[best])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PicardFailure {
    pub history: Vec<PicardRecord>,
    pub error: Error,
}

/// Root mean square of the true residual on `grid` using posterior means of the
/// problem's residual targets.
pub fn true_residual_rmse(
    model: &TrainedModel,
    problem: &dyn NonlinearProblem,
    grid: &PointSet,
    extended: Option<&ExtendedSetConfig>,
) -> Result<f64> {
    let targets = problem.residual_targets();
    let opts = FieldOptions { extended, ..Default::default() };
    let mut acc = 0.0;
    for (index, x) in grid.rows().enumerate() {
        let post = predict_point(model, targets, x, &opts).map_err(|e| Error::AtGridPoint { index, source: Box::new(e) })?;
        let means: Vec<f64> = post.iter().map(|p| p.mean).collect();
        let r = problem.true_residual(x, &means);
        acc += r * r;
    }
    Ok(Float::sqrt(acc / grid.len() as f64))
}

pub fn picard_solve(
    dataset: &Dataset,
    problem: &dyn NonlinearProblem,
    extended: Option<&ExtendedSetConfig>,
    noise: &NoiseConfig,
    training: &TrainingConfig,
    cfg: &PicardConfig,
) -> core::result::Result<PicardOutcome, PicardFailure> {
    let mut history = Vec::new();
    let fail = |history: &Vec<PicardRecord>, error: Error| PicardFailure { history: history.clone(), error };
    if cfg.eval_grid.is_empty() || cfg.max_iters == 0 {
        return Err(fail(&history, invalid("invalid picard configuration")));
    }

    let plain = train(dataset, None, noise, training).map_err(|e| fail(&history, e))?;
    let rmse = true_residual_rmse(&plain, problem, &cfg.eval_grid, None).map_err(|e| fail(&history, e))?;
    history.push(PicardRecord { iteration: 0, nlml: plain.nlml_value(), residual_rmse: rmse });
    let mut iterates = alloc::vec![Arc::new(plain)];

    for iteration in 1..=cfg.max_iters {
        let prev = iterates.last().expect("at least the initial fit").clone();
        let prev_ext = if prev.is_constrained() { extended.cloned() } else { None };
        let u0 = posterior_mean_field(prev.clone(), DerivativeTarget::value(dataset.dim()), prev_ext);
        let constraint = problem.linearize(u0);
        let mut tcfg = training.clone();
        tcfg.extra_starts.push(StartPoint { hp: prev.hyperparams().clone(), sigma_u2: prev.noise().sigma_u2 });
        let model = train(dataset, Some(&constraint), noise, &tcfg).map_err(|e| fail(&history, e))?;
        let rmse = true_residual_rmse(&model, problem, &cfg.eval_grid, extended).map_err(|e| fail(&history, e))?;
        let improvement = history.last().map(|r| r.residual_rmse - rmse).unwrap_or(f64::INFINITY);
        history.push(PicardRecord { iteration, nlml: model.nlml_value(), residual_rmse: rmse });
        iterates.push(Arc::new(model));
        log::debug!("picard iteration {iteration}: residual rmse {rmse:.6}");
        if iteration > 1 && improvement < cfg.rmse_tol {
            break;
        }
    }

    let mut best_iteration = 0;
    for r in &history {
        if r.residual_rmse < history[best_iteration].residual_rmse {
            best_iteration = r.iteration;
        }
    }
    Ok(PicardOutcome { best: iterates[best_iteration].clone(), best_iteration, history, iterates })
}
