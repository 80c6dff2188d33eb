//! Built-in experiments: a damped linear oscillator, a 2D Poisson problem and the
//! Van der Pol oscillator.

use std::f64::consts::PI;
use std::sync::Arc;

use gprc_core::picard::{LinearProblem, NonlinearProblem};
use gprc_core::points::{linspace, tensor_grid};
use gprc_core::{
    AffineConstraint, DerivativeTarget, ExtendedSetConfig, IcbcAnchor, LinearOperator, MultiIndex, OperatorTerm,
    PointSet, ScalarField,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{ode_integrate, DenseSolution};

/// Damping and stiffness of `u'' + b u' + c u = 0`.
pub const LINEAR_ODE_B: f64 = 1.0;
pub const LINEAR_ODE_C: f64 = 3.0;
/// Van der Pol parameter used to generate data.
pub const VDP_MU: f64 = 0.5;
/// Truth integration step.
pub const TRUTH_STEP: f64 = 1e-3;

/// Observation sites for the Poisson problem, scattered over the unit square interior.
pub const POISSON_SITES: [[f64; 2]; 15] = [
    [0.10, 0.15],
    [0.30, 0.08],
    [0.55, 0.12],
    [0.85, 0.10],
    [0.20, 0.40],
    [0.45, 0.35],
    [0.70, 0.30],
    [0.92, 0.45],
    [0.10, 0.70],
    [0.35, 0.62],
    [0.60, 0.55],
    [0.80, 0.72],
    [0.25, 0.90],
    [0.55, 0.88],
    [0.88, 0.92],
];

/// Source term `g(x) = e^{-x1} (x1 - 2 + x2³ + 6 x2)`.
pub fn poisson_g(x: &[f64]) -> f64 {
    (-x[0]).exp() * (x[0] - 2.0 + x[1].powi(3) + 6.0 * x[1])
}

/// Partial derivatives of `u = e^{-x1} (x1 + x2³)` up to second order per axis.
pub fn poisson_solution(x: &[f64], d: &[u32]) -> f64 {
    let e = (-x[0]).exp();
    let (a, b) = (x[0], x[1]);
    // ∂^i_{x1} of e^{-x1}(x1 + p) = (-1)^i e^{-x1} (x1 - i + p)
    let p_of = |j: u32| match j {
        0 => b.powi(3),
        1 => 3.0 * b * b,
        2 => 6.0 * b,
        3 => 6.0,
        _ => 0.0,
    };
    let (i, j) = (d[0], d[1]);
    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
    // the x1 term only survives when no x2 derivative is taken
    let lin = if j == 0 { a - i as f64 } else { 0.0 };
    sign * e * (lin + p_of(j))
}

/// Derivative-level ground truth.
pub trait Truth: Send + Sync {
    fn derivative(&self, x: &[f64], d: &MultiIndex) -> f64;
}

type Accel = Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

pub struct OdeTruth(DenseSolution<Accel>);

impl Truth for OdeTruth {
    fn derivative(&self, x: &[f64], d: &MultiIndex) -> f64 {
        let (u, v, a) = self.0.eval(x[0]);
        match d.orders()[0] {
            0 => u,
            1 => v,
            2 => a,
            o => panic!("ODE truth provides derivatives up to order 2, asked for {o}"),
        }
    }
}

pub struct PoissonTruth;

impl Truth for PoissonTruth {
    fn derivative(&self, x: &[f64], d: &MultiIndex) -> f64 {
        poisson_solution(x, d.orders())
    }
}

/// `u'' - μ (1 - u²) u' + u = 0`, linearised by freezing the `u²` factor at `u₀`.
pub struct VanDerPol {
    pub mu: f64,
    targets: Vec<DerivativeTarget>,
}

impl VanDerPol {
    pub fn new(mu: f64) -> Self {
        VanDerPol { mu, targets: (0..3).map(|o| DerivativeTarget::new(vec![o])).collect() }
    }
}

impl NonlinearProblem for VanDerPol {
    fn dim(&self) -> usize {
        1
    }

    fn linearize(&self, u0: ScalarField) -> AffineConstraint {
        let mu = self.mu;
        let damping = ScalarField::from_fn(move |x| {
            let u = u0.eval(x);
            -mu * (1.0 - u * u)
        });
        let op = LinearOperator::new(vec![
            OperatorTerm::new(1.0, MultiIndex::new(vec![2])),
            OperatorTerm::new(damping, MultiIndex::new(vec![1])),
            OperatorTerm::new(1.0, MultiIndex::new(vec![0])),
        ])
        .expect("fixed one-dimensional operator");
        AffineConstraint::homogeneous(op)
    }

    fn residual_targets(&self) -> &[DerivativeTarget] {
        &self.targets
    }

    fn true_residual(&self, _x: &[f64], v: &[f64]) -> f64 {
        v[2] - self.mu * (1.0 - v[0] * v[0]) * v[1] + v[0]
    }
}

pub fn linear_ode_constraint(b: f64, c: f64) -> AffineConstraint {
    AffineConstraint::homogeneous(
        LinearOperator::new(vec![
            OperatorTerm::new(1.0, MultiIndex::new(vec![2])),
            OperatorTerm::new(b, MultiIndex::new(vec![1])),
            OperatorTerm::new(c, MultiIndex::new(vec![0])),
        ])
        .expect("fixed one-dimensional operator"),
    )
}

pub fn poisson_constraint() -> AffineConstraint {
    AffineConstraint::new(LinearOperator::laplacian(2), ScalarField::from_fn(poisson_g))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    LinearOde,
    Poisson,
    VanDerPol,
}

impl ScenarioKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear-ode" => Ok(ScenarioKind::LinearOde),
            "poisson" => Ok(ScenarioKind::Poisson),
            "van-der-pol" => Ok(ScenarioKind::VanDerPol),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::LinearOde => "linear-ode",
            ScenarioKind::Poisson => "poisson",
            ScenarioKind::VanDerPol => "van-der-pol",
        }
    }
}

/// Which fitted methods receive the initial/boundary-condition correction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorPolicy {
    None,
    ConstrainedOnly,
    All,
}

/// Tunable settings of a scenario; every field can be overridden from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub noise_var: f64,
    pub sigma_r2: f64,
    pub n_obs: usize,
    /// Fixed observation sites (2D scenarios); empty for equally spaced 1D sampling.
    pub sites: Vec<[f64; 2]>,
    /// Observation and evaluation interval for the 1D scenarios.
    pub span: (f64, f64),
    pub extended: ExtendedSetConfig,
    pub anchors: AnchorPolicy,
    /// Also anchor derivative targets, not only the state.
    pub derivative_anchors: bool,
    /// Discard extended-set points outside the observation span (box for 2D).
    pub clip_extended: bool,
    /// Evaluation points per axis.
    pub eval_points: usize,
    pub restarts: usize,
    pub train_sigma_u2: bool,
    pub picard_iters: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::for_kind(ScenarioKind::LinearOde)
    }
}

impl ScenarioConfig {
    pub fn for_kind(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::LinearOde => ScenarioConfig {
                seed: 0,
                noise_var: 0.1,
                sigma_r2: 0.1,
                n_obs: 21,
                sites: Vec::new(),
                span: (0.0, 3.0),
                extended: ExtendedSetConfig::uniform(1, 3.0, 60).expect("valid"),
                anchors: AnchorPolicy::None,
                derivative_anchors: true,
                clip_extended: true,
                eval_points: 200,
                restarts: 8,
                train_sigma_u2: false,
                picard_iters: 1,
            },
            ScenarioKind::Poisson => ScenarioConfig {
                seed: 0,
                noise_var: 0.01,
                sigma_r2: 0.3,
                n_obs: POISSON_SITES.len(),
                sites: POISSON_SITES.to_vec(),
                span: (0.0, 1.0),
                extended: ExtendedSetConfig::uniform(2, 0.33, 5).expect("valid"),
                anchors: AnchorPolicy::ConstrainedOnly,
                derivative_anchors: true,
                clip_extended: true,
                eval_points: 41,
                restarts: 8,
                train_sigma_u2: false,
                picard_iters: 1,
            },
            ScenarioKind::VanDerPol => ScenarioConfig {
                seed: 0,
                noise_var: 0.01,
                sigma_r2: 0.1,
                n_obs: 40,
                sites: Vec::new(),
                span: (0.0, 20.0),
                extended: ExtendedSetConfig::uniform(1, 0.2, 4).expect("valid"),
                anchors: AnchorPolicy::None,
                derivative_anchors: true,
                clip_extended: true,
                eval_points: 200,
                restarts: 8,
                train_sigma_u2: false,
                picard_iters: 1,
            },
        }
    }
}

/// A scenario with its ground truth materialised.
pub struct Scenario {
    pub kind: ScenarioKind,
    pub config: ScenarioConfig,
    truth: Arc<dyn Truth>,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, config: ScenarioConfig) -> Result<Self> {
        let truth: Arc<dyn Truth> = match kind {
            ScenarioKind::LinearOde => {
                let accel: Accel = Box::new(|_t, u, v| -LINEAR_ODE_B * v - LINEAR_ODE_C * u);
                Arc::new(OdeTruth(ode_integrate(accel, (PI - 0.1, 0.0), (0.0, config.span.1.max(0.0)), TRUTH_STEP)?))
            }
            ScenarioKind::VanDerPol => {
                let accel: Accel = Box::new(|_t, u, v| VDP_MU * (1.0 - u * u) * v - u);
                Arc::new(OdeTruth(ode_integrate(accel, (2.0, 0.0), (0.0, config.span.1.max(0.0)), TRUTH_STEP)?))
            }
            ScenarioKind::Poisson => Arc::new(PoissonTruth),
        };
        if config.span.0 < 0.0 && kind != ScenarioKind::Poisson {
            return Err(Error::Format("ODE scenarios start at t = 0".into()));
        }
        Ok(Scenario { kind, config, truth })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let kind = ScenarioKind::parse(name)?;
        Scenario::new(kind, ScenarioConfig::for_kind(kind))
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ScenarioKind::Poisson => 2,
            _ => 1,
        }
    }

    pub fn truth(&self) -> &dyn Truth {
        self.truth.as_ref()
    }

    /// Equation whose residual is reported; the Van der Pol one is nonlinear.
    pub fn problem(&self) -> Arc<dyn NonlinearProblem> {
        self.problem_with_mu(VDP_MU)
    }

    pub fn problem_with_mu(&self, mu: f64) -> Arc<dyn NonlinearProblem> {
        match self.kind {
            ScenarioKind::LinearOde => Arc::new(LinearProblem::new(linear_ode_constraint(LINEAR_ODE_B, LINEAR_ODE_C))),
            ScenarioKind::Poisson => Arc::new(LinearProblem::new(poisson_constraint())),
            ScenarioKind::VanDerPol => Arc::new(VanDerPol::new(mu)),
        }
    }

    /// Targets whose errors are reported.
    pub fn targets(&self) -> Vec<DerivativeTarget> {
        match self.kind {
            ScenarioKind::Poisson => vec![
                DerivativeTarget::new(vec![0, 0]),
                DerivativeTarget::new(vec![1, 1]),
                DerivativeTarget::new(vec![0, 2]),
            ],
            _ => (0..3).map(|o| DerivativeTarget::new(vec![o])).collect(),
        }
    }

    pub fn observation_sites(&self) -> PointSet {
        match self.kind {
            ScenarioKind::Poisson => PointSet::from_rows(2, &self.config.sites).expect("two columns"),
            _ => PointSet::linspace(self.config.span.0, self.config.span.1, self.config.n_obs),
        }
    }

    /// Noisy observations drawn with the scenario seed.
    pub fn sample(&self) -> Result<gprc_core::Dataset> {
        let sites = self.observation_sites();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let normal = Normal::new(0.0, self.config.noise_var.max(0.0).sqrt())
            .map_err(|e| Error::Format(format!("noise variance: {e}")))?;
        let zero = MultiIndex::zero(self.dim());
        let y = sites.rows().map(|x| self.truth.derivative(x, &zero) + normal.sample(&mut rng)).collect();
        Ok(gprc_core::Dataset::new(sites, y)?)
    }

    pub fn eval_grid(&self) -> PointSet {
        let n = self.config.eval_points;
        match self.kind {
            ScenarioKind::Poisson => tensor_grid(&[linspace(0.0, 1.0, n), linspace(0.0, 1.0, n)]).expect("two axes"),
            _ => PointSet::linspace(self.config.span.0, self.config.span.1, n),
        }
    }

    /// Known initial or boundary values of the reported targets.
    pub fn anchors(&self) -> Vec<IcbcAnchor> {
        let mut all = self.all_anchors();
        if !self.config.derivative_anchors {
            all.retain(|a| a.derivative.is_zero());
        }
        all
    }

    fn all_anchors(&self) -> Vec<IcbcAnchor> {
        let targets = self.targets();
        match self.kind {
            ScenarioKind::LinearOde | ScenarioKind::VanDerPol => targets
                .iter()
                .map(|t| IcbcAnchor::new(vec![0.0], self.truth.derivative(&[0.0], t.derivative()), t.derivative().clone()))
                .collect::<std::result::Result<_, _>>()
                .expect("finite initial values"),
            ScenarioKind::Poisson => {
                // u and ∂²u/∂x2² follow from the Dirichlet data and the equation
                let sides = linspace(0.0, 1.0, 41);
                let mut boundary = Vec::new();
                for &s in &sides {
                    boundary.extend([[0.0, s], [1.0, s], [s, 0.0], [s, 1.0]]);
                }
                let mut out = Vec::new();
                for t in [&targets[0], &targets[2]] {
                    for b in &boundary {
                        let v = self.truth.derivative(b, t.derivative());
                        out.push(IcbcAnchor::new(b.to_vec(), v, t.derivative().clone()).expect("finite"));
                    }
                }
                out
            }
        }
    }

    /// Box the extended sets are clipped to, when the scenario asks for it.
    pub fn ext_domain(&self) -> Option<gprc_core::BoxDomain> {
        if !self.config.clip_extended {
            return None;
        }
        let (lo, hi) = self.config.span;
        Some(gprc_core::BoxDomain { lo: vec![lo; self.dim()], hi: vec![hi; self.dim()] })
    }
}

/// Checks the analytic Poisson solution against its equation on a 20×20 grid.
pub fn self_check() -> Result<f64> {
    let grid = tensor_grid(&[linspace(0.0, 1.0, 20), linspace(0.0, 1.0, 20)])?;
    let mut worst = 0.0f64;
    for x in grid.rows() {
        let lap = poisson_solution(x, &[2, 0]) + poisson_solution(x, &[0, 2]);
        worst = worst.max((lap - poisson_g(x)).abs());
    }
    if worst > 1e-10 {
        return Err(Error::Format(format!("Poisson truth violates its equation by {worst:e}")));
    }
    Ok(worst)
}
