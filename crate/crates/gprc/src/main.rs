use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gprc::harness::{
    default_methods, param_grid, parse_target, predict_grid, run_identification, run_method, sweep, Method,
    RmseReport, SweepAxis, SweepPoint,
};
use gprc::io::{self, IdentReport, OperatorSpec};
use gprc::scenario::{self, Scenario, ScenarioConfig, ScenarioKind, VDP_MU};
use gprc_core::gpr::default_sigma_r2;
use gprc_core::picard::{picard_solve, PicardConfig};
use gprc_core::{
    train, ExtendedSetConfig, FieldOptions, IcbcAnchor, IdentMode, NoiseConfig, TrainingConfig,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gprc", version, about = "Derivative estimation with equation-constrained Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for noise sampling and optimiser restarts.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Variance of the residual (equation) noise.
    #[arg(long = "sigma-r2", global = true)]
    sigma_r2: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON file overriding scenario or training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a CSV dataset, optionally constrained by an operator file.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        operator: Option<PathBuf>,
        /// Initial observation noise variance (default: a tenth of the data variance).
        #[arg(long = "sigma-u2")]
        sigma_u2: Option<f64>,
        /// Keep the observation noise variance fixed.
        #[arg(long)]
        fixed_noise: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate posterior means and variances of derivative targets on a grid.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV with a header and one column per input dimension.
        #[arg(long)]
        grid: PathBuf,
        /// Comma-separated derivative orders, axes joined by `:` (e.g. `0,1,2` or `0:0,1:1`).
        #[arg(long, default_value = "0")]
        targets: String,
        /// Extended-set half-width per axis for constrained models.
        #[arg(long, default_value_t = 3.0)]
        half_width: f64,
        /// Extended-set points per axis.
        #[arg(long, default_value_t = 60)]
        count: usize,
        /// JSON list of initial/boundary anchors.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Picard iterations for a nonlinear scenario.
    Picard {
        #[arg(default_value = "van-der-pol")]
        scenario: String,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Use this dataset instead of sampling the scenario.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid-search identification of the Van der Pol parameter.
    Identify {
        #[arg(default_value = "van-der-pol")]
        scenario: String,
        #[arg(long, value_enum, default_value_t = Mode::Gprc)]
        mode: Mode,
        #[arg(long)]
        n_obs: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        mu_min: f64,
        #[arg(long, default_value_t = 1.0)]
        mu_max: f64,
        #[arg(long, default_value_t = 0.1)]
        mu_step: f64,
        /// Refine the grid minimiser by quadratic interpolation.
        #[arg(long)]
        refine: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the default method set on a built-in scenario.
    Experiment {
        /// linear-ode, poisson or van-der-pol.
        scenario: String,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Vary one setting of a scenario and report RMSE per value.
    Sweep {
        scenario: String,
        /// step, width, sigma-r2 or n-obs.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long, value_enum, default_value_t = SweepMethod::Gprc)]
        method: SweepMethod,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Gprc,
    Gpr,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepMethod {
    Gpr,
    Gprc,
    Picard,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Shallow-merges the object in `path` over `base`.
fn merge_json<T: Serialize + serde::de::DeserializeOwned>(base: &T, path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let mut value = serde_json::to_value(base)?;
    let overlay: serde_json::Value = io::read_json(path)?;
    let (Some(dst), Some(src)) = (value.as_object_mut(), overlay.as_object()) else {
        bail!("{}: expected a JSON object", path.display());
    };
    for (k, v) in src {
        if !dst.contains_key(k) {
            bail!("{}: unknown setting `{k}`", path.display());
        }
        dst.insert(k.clone(), v.clone());
    }
    serde_json::from_value(value).with_context(|| path.display().to_string())
}

fn load_scenario(name: &str, common: &Common) -> anyhow::Result<Scenario> {
    let kind = ScenarioKind::parse(name)?;
    let mut cfg: ScenarioConfig = merge_json(&ScenarioConfig::for_kind(kind), common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = common.sigma_r2 {
        cfg.sigma_r2 = s;
    }
    if kind == ScenarioKind::Poisson {
        scenario::self_check()?;
    }
    Ok(Scenario::new(kind, cfg)?)
}

fn training_from(common: &Common) -> anyhow::Result<TrainingConfig> {
    let mut t: TrainingConfig = merge_json(&TrainingConfig::default(), common.config.as_deref())?;
    if let Some(seed) = common.seed {
        t.seed = seed;
    }
    Ok(t)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit { data, operator, sigma_u2, fixed_noise, common } => {
            let dataset = io::read_dataset_csv(&data)?;
            let spec = operator.as_deref().map(io::read_operator).transpose()?;
            let constraint = spec.as_ref().map(OperatorSpec::to_constraint).transpose()?;
            let training = training_from(&common)?;
            let var = variance(dataset.y());
            let u2 = sigma_u2.unwrap_or((0.1 * var).max(1e-6));
            let r2 = match (common.sigma_r2, &constraint) {
                (Some(s), _) => s,
                (None, Some(_)) => default_sigma_r2(&dataset, &training)?,
                (None, None) => 1.0,
            };
            let noise = if fixed_noise { NoiseConfig::fixed(u2, r2)? } else { NoiseConfig::new(u2, r2)? };
            let model = train(&dataset, constraint.as_ref(), &noise, &training)?;
            let path = common.out.join("model.json");
            io::save_model(&path, &model, spec)?;
            log::info!("nlml {:.6}, converged {}; wrote {}", model.nlml_value(), model.converged(), path.display());
        }
        Command::Predict { model, grid, targets, half_width, count, anchors, common } => {
            let model = io::load_model(&model)?;
            let grid = io::read_points_csv(&grid)?;
            let targets = targets.split(',').map(parse_target).collect::<gprc::Result<Vec<_>>>()?;
            let ext = ExtendedSetConfig::uniform(model.dim(), half_width, count)?;
            let anchors: Vec<IcbcAnchor> = match anchors {
                Some(p) => io::read_json(&p)?,
                None => Vec::new(),
            };
            let opts = FieldOptions { extended: Some(&ext), domain: None, anchors: &anchors };
            let post = predict_grid(&model, &targets, &grid, &opts)?;
            let path = common.out.join("predictions.csv");
            io::write_predictions_csv(&path, &grid, &targets, &post)?;
            log::info!("wrote {}", path.display());
        }
        Command::Picard { scenario, iters, tol, data, common } => {
            let sc = load_scenario(&scenario, &common)?;
            let dataset = match data {
                Some(p) => io::read_dataset_csv(&p)?,
                None => sc.sample()?,
            };
            let cfg = &sc.config;
            let training = gprc::harness::training_config(cfg);
            let noise = gprc::harness::noise_config(cfg, cfg.noise_var.max(1e-6), cfg.sigma_r2)?;
            let pcfg = PicardConfig::new(iters, tol, sc.eval_grid())?;
            let problem = sc.problem();
            let outcome = match picard_solve(&dataset, problem.as_ref(), Some(&cfg.extended), &noise, &training, &pcfg) {
                Ok(o) => o,
                Err(f) => {
                    io::write_history_csv(&common.out.join("history.csv"), &f.history)?;
                    return Err(f.error).context("picard iteration failed; partial history written");
                }
            };
            io::write_history_csv(&common.out.join("history.csv"), &outcome.history)?;
            let targets = sc.targets();
            let ext = (outcome.best_iteration > 0).then_some(&cfg.extended);
            let opts = FieldOptions { extended: ext, ..Default::default() };
            let grid = sc.eval_grid();
            let post = predict_grid(&outcome.best, &targets, &grid, &opts)?;
            io::write_predictions_csv(&common.out.join("predictions.csv"), &grid, &targets, &post)?;
            for r in &outcome.history {
                println!("iteration {}: nlml {:.4} residual rmse {:.6}", r.iteration, r.nlml, r.residual_rmse);
            }
            println!("best iteration {}", outcome.best_iteration);
        }
        Command::Identify { scenario, mode, n_obs, mu_min, mu_max, mu_step, refine, common } => {
            let mut sc = load_scenario(&scenario, &common)?;
            if let Some(n) = n_obs {
                let mut cfg = sc.config.clone();
                cfg.n_obs = n;
                sc = Scenario::new(sc.kind, cfg)?;
            }
            let mode = match mode {
                Mode::Gprc => IdentMode::Gprc,
                Mode::Gpr => IdentMode::GprBaseline,
            };
            let start = Instant::now();
            let curve = run_identification(&sc, mode, param_grid(mu_min, mu_max, mu_step)?, refine)?;
            let runtime = start.elapsed().as_secs_f64();
            io::write_loss_csv(&common.out.join("loss.csv"), &curve)?;
            let report = IdentReport {
                scenario: sc.name().into(),
                mode: format!("{mode:?}"),
                true_mu: VDP_MU,
                argmin_mu: curve.argmin_mu,
                refined_mu: curve.refined_mu,
                seed: sc.config.seed,
                n_obs: sc.config.n_obs,
                noise_var: sc.config.noise_var,
                runtime_secs: runtime,
                curve,
            };
            io::write_json(&common.out.join("report.json"), &report)?;
            println!("argmin mu = {} ({runtime:.1}s)", report.argmin_mu);
        }
        Command::Experiment { scenario, seeds, common } => {
            let base = load_scenario(&scenario, &common)?;
            let methods = default_methods(base.kind);
            let mut reports = Vec::new();
            for s in 0..seeds.max(1) {
                let mut cfg = base.config.clone();
                cfg.seed = base.config.seed + s;
                let sc = Scenario::new(base.kind, cfg)?;
                let data = sc.sample()?;
                io::write_dataset_csv(&common.out.join(format!("data_seed{}.csv", sc.config.seed)), &data)?;
                let grid = sc.eval_grid();
                let targets = sc.targets();
                for (i, m) in methods.iter().enumerate() {
                    let run = run_method(&sc, &data, *m).with_context(|| format!("{} on {}", m.label(), sc.name()))?;
                    let name = format!("predictions_m{i}_seed{}.csv", sc.config.seed);
                    io::write_predictions_csv(&common.out.join(name), &grid, &targets, &run.posteriors)?;
                    print_report(&run.report);
                    reports.push(run.report);
                }
            }
            write_reports(&common.out.join("reports.csv"), &reports)?;
            let manifest = Manifest { scenario: base.name(), config: &base.config, methods: &methods, reports: &reports };
            io::write_json(&common.out.join("manifest.json"), &manifest)?;
        }
        Command::Sweep { scenario, axis, values, method, common } => {
            let sc = load_scenario(&scenario, &common)?;
            let axis = SweepAxis::parse(&axis)?;
            let method = match method {
                SweepMethod::Gpr => Method::Gpr,
                SweepMethod::Gprc => Method::Gprc { sigma_r2: None },
                SweepMethod::Picard => Method::Picard { sigma_r2: None, iters: sc.config.picard_iters },
            };
            if values.is_empty() {
                bail!("--values needs at least one entry");
            }
            let points = sweep(&sc, method, axis, &values)?;
            write_sweep(&common.out.join("sweep.csv"), &points)?;
            for p in &points {
                print!("{} = {}: ", format!("{axis:?}").to_lowercase(), p.value);
                print_report(&p.report);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    config: &'a ScenarioConfig,
    methods: &'a [Method],
    reports: &'a [RmseReport],
}

fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn print_report(r: &RmseReport) {
    let cols: Vec<String> = r.targets.iter().zip(&r.rmse).map(|(t, e)| format!("{t}={e:.4}")).collect();
    println!("{} seed {} {:<20} {} r={:.4}", r.scenario, r.seed, r.method, cols.join(" "), r.residual_rmse);
}

fn report_rows(r: &RmseReport) -> impl Iterator<Item = (String, f64)> + '_ {
    r.targets.iter().cloned().zip(r.rmse.iter().copied()).chain(std::iter::once(("r".to_string(), r.residual_rmse)))
}

fn write_reports(path: &Path, reports: &[RmseReport]) -> anyhow::Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "method", "seed", "noise_var", "sigma_r2", "target", "rmse"])?;
    for r in reports {
        for (t, e) in report_rows(r) {
            let s = r.sigma_r2.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([&r.scenario, &r.method, &r.seed.to_string(), &r.noise_var.to_string(), &s, &t, &e.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_sweep(path: &Path, points: &[SweepPoint]) -> anyhow::Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["value", "method", "target", "rmse"])?;
    for p in points {
        for (t, e) in report_rows(&p.report) {
            w.write_record([p.value.to_string(), p.report.method.clone(), t, e.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
