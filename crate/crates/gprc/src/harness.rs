//! Runs methods on scenarios and reports per-derivative errors.

use std::sync::Arc;

use gprc_core::gpr::default_sigma_r2;
use gprc_core::ident::{curve_from_losses, ProblemFamily};
use gprc_core::picard::{picard_solve, PicardConfig, PicardRecord};
use gprc_core::predict::predict_point;
use gprc_core::{
    identify, loss_at, train, Dataset, IdentConfig, IdentMode, LossCurve, ParamScenario, DerivativeTarget, ExtendedSetConfig, FieldOptions, NoiseConfig, PointSet, PosteriorGaussian,
    TrainedModel, TrainingConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{AnchorPolicy, Scenario, ScenarioConfig, ScenarioKind, VanDerPol};

/// A fitting strategy compared by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Gpr,
    /// Constrained fit; `None` uses the scenario's residual noise.
    Gprc { sigma_r2: Option<f64> },
    /// Picard refits starting from an unconstrained fit.
    Picard { sigma_r2: Option<f64>, iters: usize },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Gpr => "GPR".into(),
            Method::Gprc { sigma_r2: Some(s) } => format!("GPRC(sr2={s:e})"),
            Method::Gprc { sigma_r2: None } => "GPRC".into(),
            Method::Picard { sigma_r2: Some(s), iters } => format!("Picard{iters}(sr2={s:e})"),
            Method::Picard { sigma_r2: None, iters } => format!("Picard{iters}"),
        }
    }

    pub fn is_constrained(&self) -> bool {
        !matches!(self, Method::Gpr)
    }
}

/// Methods compared by default for each scenario.
pub fn default_methods(kind: ScenarioKind) -> Vec<Method> {
    match kind {
        ScenarioKind::LinearOde => vec![
            Method::Gpr,
            Method::Gprc { sigma_r2: Some(1e-3) },
            Method::Gprc { sigma_r2: Some(1e-1) },
            Method::Gprc { sigma_r2: Some(1e2) },
        ],
        ScenarioKind::Poisson => vec![Method::Gpr, Method::Gprc { sigma_r2: None }],
        ScenarioKind::VanDerPol => vec![Method::Gpr, Method::Picard { sigma_r2: None, iters: 1 }],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub noise_var: f64,
    pub sigma_r2: Option<f64>,
    /// Target labels, aligned with `rmse`.
    pub targets: Vec<String>,
    pub rmse: Vec<f64>,
    /// RMSE of the true equation residual evaluated with posterior means.
    pub residual_rmse: f64,
    pub nlml: f64,
    /// Picard history, empty for single fits.
    pub history: Vec<PicardRecord>,
    pub grid_hash: String,
    pub truth_hash: String,
    pub data_hash: String,
}

impl RmseReport {
    pub fn rmse_of(&self, target: &str) -> Option<f64> {
        self.targets.iter().position(|t| t == target).map(|i| self.rmse[i])
    }
}

/// Label used in files and reports: derivative orders joined with `:`.
pub fn target_label(t: &DerivativeTarget) -> String {
    t.derivative().orders().iter().map(|o| o.to_string()).collect::<Vec<_>>().join(":")
}

pub fn parse_target(s: &str) -> Result<DerivativeTarget> {
    let orders = s
        .split(':')
        .map(|p| p.trim().parse::<u32>().map_err(|_| Error::Format(format!("bad derivative target `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivativeTarget::new(orders))
}

/// FNV-1a over the bit patterns of `values`.
pub fn hash_values(values: impl IntoIterator<Item = f64>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

pub fn training_config(cfg: &ScenarioConfig) -> TrainingConfig {
    TrainingConfig { restarts: cfg.restarts, seed: cfg.seed.wrapping_add(1), ..TrainingConfig::default() }
}

/// Posteriors on `grid` evaluated in parallel, indexed `[target][point]`.
pub fn predict_grid(
    model: &TrainedModel,
    targets: &[DerivativeTarget],
    grid: &PointSet,
    opts: &FieldOptions<'_>,
) -> Result<Vec<Vec<PosteriorGaussian>>> {
    let rows: Vec<&[f64]> = grid.rows().collect();
    let per_point = rows
        .par_iter()
        .enumerate()
        .map(|(index, x)| {
            predict_point(model, targets, x, opts)
                .map_err(|e| gprc_core::Error::AtGridPoint { index, source: Box::new(e) })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut out: Vec<Vec<PosteriorGaussian>> = targets.iter().map(|_| Vec::with_capacity(rows.len())).collect();
    for post in per_point {
        for (col, p) in out.iter_mut().zip(post) {
            col.push(p);
        }
    }
    Ok(out)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// Output of one method on one scenario.
pub struct MethodRun {
    pub report: RmseReport,
    pub model: Arc<TrainedModel>,
    /// Posteriors on the evaluation grid, `[target][point]`.
    pub posteriors: Vec<Vec<PosteriorGaussian>>,
}

fn resolve_sigma_r2(requested: Option<f64>, scenario: &Scenario, dataset: &Dataset, training: &TrainingConfig) -> Result<f64> {
    match requested {
        Some(s) => Ok(s),
        None if scenario.config.sigma_r2 > 0.0 => Ok(scenario.config.sigma_r2),
        None => Ok(default_sigma_r2(dataset, training)?),
    }
}

pub fn run_method(scenario: &Scenario, dataset: &Dataset, method: Method) -> Result<MethodRun> {
    let cfg = &scenario.config;
    let training = training_config(cfg);
    let init_u2 = cfg.noise_var.max(1e-6);
    let targets = scenario.targets();
    let grid = scenario.eval_grid();
    let problem = scenario.problem();

    let (model, sigma_r2, history) = match method {
        Method::Gpr => {
            let noise = noise_config(cfg, init_u2, 1.0)?;
            (Arc::new(train(dataset, None, &noise, &training)?), None, Vec::new())
        }
        Method::Gprc { sigma_r2 } => {
            let s = resolve_sigma_r2(sigma_r2, scenario, dataset, &training)?;
            let noise = noise_config(cfg, init_u2, s)?;
            let constraint = problem.linearize(gprc_core::ScalarField::zero());
            (Arc::new(train(dataset, Some(&constraint), &noise, &training)?), Some(s), Vec::new())
        }
        Method::Picard { sigma_r2, iters } => {
            let s = resolve_sigma_r2(sigma_r2, scenario, dataset, &training)?;
            let noise = noise_config(cfg, init_u2, s)?;
            let pcfg = PicardConfig::new(iters.max(1), 0.0, grid.clone())?;
            let outcome = picard_solve(dataset, problem.as_ref(), Some(&cfg.extended), &noise, &training, &pcfg)
                .map_err(|f| Error::Core(f.error))?;
            let (_, best) = outcome.best_constrained();
            (best.clone(), Some(s), outcome.history)
        }
    };

    log::debug!("{}: {:?} {:?} nlml {}", method.label(), model.hyperparams(), model.noise(), model.nlml_value());
    let anchors = match (cfg.anchors, method.is_constrained()) {
        (AnchorPolicy::All, _) | (AnchorPolicy::ConstrainedOnly, true) => scenario.anchors(),
        _ => Vec::new(),
    };
    let domain = scenario.ext_domain();
    let opts = FieldOptions {
        extended: method.is_constrained().then_some(&cfg.extended),
        domain: domain.as_ref(),
        anchors: &anchors,
    };
    let posteriors = predict_grid(&model, &targets, &grid, &opts)?;

    let truth = scenario.truth();
    let mut errors = Vec::with_capacity(targets.len());
    let mut truth_values = Vec::new();
    for (t, post) in targets.iter().zip(&posteriors) {
        let exact: Vec<f64> = grid.rows().map(|x| truth.derivative(x, t.derivative())).collect();
        let mean: Vec<f64> = post.iter().map(|p| p.mean).collect();
        errors.push(rmse(&mean, &exact));
        truth_values.extend(exact);
    }
    // residual of the true equation, using the same (corrected) posterior means
    let rtargets = problem.residual_targets();
    let rpost = predict_grid(&model, rtargets, &grid, &opts)?;
    let mut acc = 0.0;
    for (i, x) in grid.rows().enumerate() {
        let v: Vec<f64> = rpost.iter().map(|col| col[i].mean).collect();
        acc += problem.true_residual(x, &v).powi(2);
    }
    let residual_rmse = (acc / grid.len() as f64).sqrt();

    let report = RmseReport {
        scenario: scenario.name().to_string(),
        method: method.label(),
        seed: cfg.seed,
        noise_var: cfg.noise_var,
        sigma_r2,
        targets: targets.iter().map(target_label).collect(),
        rmse: errors,
        residual_rmse,
        nlml: model.nlml_value(),
        history,
        grid_hash: hash_values(grid.as_flat().iter().copied()),
        truth_hash: hash_values(truth_values),
        data_hash: hash_values(dataset.points().as_flat().iter().chain(dataset.y()).copied()),
    };
    Ok(MethodRun { report, model, posteriors })
}

pub fn noise_config(cfg: &ScenarioConfig, sigma_u2: f64, sigma_r2: f64) -> Result<NoiseConfig> {
    Ok(if cfg.train_sigma_u2 { NoiseConfig::new(sigma_u2, sigma_r2)? } else { NoiseConfig::fixed(sigma_u2, sigma_r2)? })
}

/// Draws the scenario data once and runs every method on it.
pub fn run_scenario(scenario: &Scenario, methods: &[Method]) -> Result<Vec<RmseReport>> {
    let dataset = scenario.sample()?;
    methods.iter().map(|m| Ok(run_method(scenario, &dataset, *m)?.report)).collect()
}

/// Axis varied by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Spacing of the extended set at fixed half-width.
    Step,
    /// Half-width of the extended set at fixed point count.
    Width,
    SigmaR2,
    NObs,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(SweepAxis::Step),
            "width" => Ok(SweepAxis::Width),
            "sigma-r2" => Ok(SweepAxis::SigmaR2),
            "n-obs" => Ok(SweepAxis::NObs),
            other => Err(Error::Format(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: RmseReport,
}

/// Re-runs one method while varying a single setting.
pub fn sweep(base: &Scenario, method: Method, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.config.clone();
        let mut method = method;
        let dim = base.dim();
        match axis {
            SweepAxis::Step => {
                let w = cfg.extended.half_width[0];
                cfg.extended = ExtendedSetConfig::from_step(w, value)?;
                if dim > 1 {
                    cfg.extended = ExtendedSetConfig::uniform(dim, w, cfg.extended.count[0])?;
                }
            }
            SweepAxis::Width => {
                cfg.extended = ExtendedSetConfig::uniform(dim, value, cfg.extended.count[0])?;
            }
            SweepAxis::SigmaR2 => {
                cfg.sigma_r2 = value;
                method = match method {
                    Method::Gprc { .. } => Method::Gprc { sigma_r2: Some(value) },
                    Method::Picard { iters, .. } => Method::Picard { sigma_r2: Some(value), iters },
                    Method::Gpr => Method::Gpr,
                };
            }
            SweepAxis::NObs => {
                if base.kind == ScenarioKind::Poisson {
                    return Err(Error::Format("the Poisson scenario uses fixed observation sites".into()));
                }
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Format(format!("observation count must be a positive integer, got {value}")));
                }
                cfg.n_obs = value as usize;
            }
        }
        let scenario = Scenario::new(base.kind, cfg)?;
        let dataset = scenario.sample()?;
        let report = run_method(&scenario, &dataset, method)?.report;
        log::info!("sweep {axis:?} = {value}: rmse {:?}", report.rmse);
        out.push(SweepPoint { value, report });
    }
    Ok(out)
}

/// Candidate grid `lo, lo + step, ..., hi`.
pub fn param_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Error::Format(format!("bad parameter grid {lo}..{hi} step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    // integer multiples keep values like 0.3 exact to the last bit where possible
    Ok((0..=n).map(|i| ((lo / step + i as f64) * step * 1e12).round() / 1e12).collect())
}

pub fn ident_config(cfg: &ScenarioConfig, mode: IdentMode, refine: bool) -> Result<IdentConfig> {
    let training = training_config(cfg);
    let init = cfg.noise_var.max(1e-6);
    Ok(IdentConfig {
        extended: (mode == IdentMode::Gprc).then(|| cfg.extended.clone()),
        noise: noise_config(cfg, init, cfg.sigma_r2)?,
        training,
        picard_iters: cfg.picard_iters,
        residual_weight: 1.0,
        refine,
    })
}

/// Grid-search identification of the Van der Pol parameter from the scenario's data.
pub fn run_identification(scenario: &Scenario, mode: IdentMode, grid: Vec<f64>, refine: bool) -> Result<LossCurve> {
    if scenario.kind != ScenarioKind::VanDerPol {
        return Err(Error::Format(format!("identification is defined for van-der-pol, not {}", scenario.name())));
    }
    let dataset = scenario.sample()?;
    let (lo, hi) = scenario.config.span;
    let family: ProblemFamily = Arc::new(|mu| Arc::new(VanDerPol::new(mu)) as Arc<dyn gprc_core::picard::NonlinearProblem>);
    let params = ParamScenario::new(grid, family, PointSet::linspace(lo, hi, 200))?;
    let cfg = ident_config(&scenario.config, mode, refine)?;
    match mode {
        IdentMode::GprBaseline => Ok(identify(&dataset, &params, mode, &cfg)?),
        IdentMode::Gprc => {
            let loss: Vec<f64> =
                params.param_grid.par_iter().map(|&mu| loss_at(mu, &dataset, &params, mode, &cfg)).collect();
            Ok(curve_from_losses(params.param_grid.clone(), loss, refine)?)
        }
    }
}
