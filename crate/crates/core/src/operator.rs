//! Linear differential operators with variable coefficients and the cross-covariances
//! they induce between `u`, the residual `r = L u` and derivative targets.

use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Result};
use crate::field::ScalarField;
use crate::kernel::{derivative_unchecked, derivative_with_lengthscale_grad, KernelConfig, KernelHyperparams, MultiIndex};

#[derive(Clone, Debug)]
pub struct OperatorTerm {
    pub coefficient: ScalarField,
    pub derivative: MultiIndex,
}

impl OperatorTerm {
    pub fn new(coefficient: impl Into<ScalarField>, derivative: MultiIndex) -> Self {
        OperatorTerm { coefficient: coefficient.into(), derivative }
    }
}

/// `L u = Σ_i c_i(x) ∂^{α_i} u`.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    dim: usize,
    terms: Vec<OperatorTerm>,
}

impl LinearOperator {
    pub fn new(terms: Vec<OperatorTerm>) -> Result<Self> {
        let first = terms.first().ok_or_else(|| invalid("operator needs at least one term"))?;
        let dim = first.derivative.dim();
        if dim == 0 {
            return Err(invalid("operator multi-indices must have at least one entry"));
        }
        for t in &terms {
            check_dim(dim, t.derivative.dim())?;
        }
        Ok(LinearOperator { dim, terms })
    }

    pub fn identity(dim: usize) -> Self {
        LinearOperator { dim, terms: alloc::vec![OperatorTerm::new(1.0, MultiIndex::zero(dim))] }
    }

    /// `Σ_d ∂²/∂x_d²`.
    pub fn laplacian(dim: usize) -> Self {
        let terms = (0..dim).map(|d| OperatorTerm::new(1.0, MultiIndex::axis(dim, d, 2))).collect();
        LinearOperator { dim, terms }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[OperatorTerm] {
        &self.terms
    }

    pub fn max_order(&self) -> u32 {
        self.terms.iter().map(|t| t.derivative.total_order()).max().unwrap_or(0)
    }

    pub fn scaled(&self, a: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| OperatorTerm { coefficient: t.coefficient.scaled(a), derivative: t.derivative.clone() })
            .collect();
        LinearOperator { dim: self.dim, terms }
    }

    /// Sum of two operators; duplicate multi-indices are kept as separate terms.
    pub fn plus(&self, other: &LinearOperator) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(LinearOperator { dim: self.dim, terms })
    }

    pub fn functional_at(&self, x: &[f64]) -> Functional {
        Functional {
            terms: self.terms.iter().map(|t| (t.coefficient.eval(x), t.derivative.clone())).collect(),
        }
    }

    /// Applies the operator given a lookup of derivative values of `u` at `x`.
    pub fn apply(&self, x: &[f64], mut derivative: impl FnMut(&MultiIndex) -> f64) -> f64 {
        self.terms.iter().map(|t| t.coefficient.eval(x) * derivative(&t.derivative)).sum()
    }
}

/// `L u = f`.
#[derive(Clone, Debug)]
pub struct AffineConstraint {
    pub operator: LinearOperator,
    pub rhs: ScalarField,
}

impl AffineConstraint {
    pub fn new(operator: LinearOperator, rhs: impl Into<ScalarField>) -> Self {
        AffineConstraint { operator, rhs: rhs.into() }
    }

    pub fn homogeneous(operator: LinearOperator) -> Self {
        AffineConstraint { operator, rhs: ScalarField::zero() }
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    pub fn rhs_at(&self, x: &[f64]) -> f64 {
        self.rhs.eval(x)
    }
}

/// A derivative of `u` requested at prediction time; the zero multi-index is `u` itself.
#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct DerivativeTarget(pub MultiIndex);

impl DerivativeTarget {
    pub fn value(dim: usize) -> Self {
        DerivativeTarget(MultiIndex::zero(dim))
    }

    pub fn new(orders: Vec<u32>) -> Self {
        DerivativeTarget(MultiIndex::new(orders))
    }

    pub fn derivative(&self) -> &MultiIndex {
        &self.0
    }

    pub fn functional(&self) -> Functional {
        Functional { terms: alloc::vec![(1.0, self.0.clone())] }
    }
}

/// A linear functional `Σ_i c_i ∂^{α_i} u(x)` with coefficients already evaluated at `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Functional {
    pub terms: Vec<(f64, MultiIndex)>,
}

impl Functional {
    pub fn for_value(dim: usize) -> Functional {
        Functional { terms: alloc::vec![(1.0, MultiIndex::zero(dim))] }
    }

    pub fn max_order(&self) -> u32 {
        self.terms.iter().map(|(_, m)| m.total_order()).max().unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.terms.iter().all(|(c, _)| c.is_finite())
    }
}

/// The second process in a cross-covariance with a derivative target.
#[derive(Clone, Copy, Debug)]
pub enum Process<'a> {
    U,
    Residual(&'a AffineConstraint),
    Target(&'a DerivativeTarget),
}

impl Process<'_> {
    pub fn functional_at(&self, x: &[f64]) -> Functional {
        match self {
            Process::U => Functional::for_value(x.len()),
            Process::Residual(c) => c.operator.functional_at(x),
            Process::Target(t) => t.functional(),
        }
    }
}

/// `Cov(a u(x), b u(x'))` for two point functionals.
pub fn cross_covariance(a: &Functional, x: &[f64], b: &Functional, xp: &[f64], hp: &KernelHyperparams) -> f64 {
    let mut acc = 0.0;
    for (ca, ma) in &a.terms {
        if *ca == 0.0 {
            continue;
        }
        for (cb, mb) in &b.terms {
            if *cb == 0.0 {
                continue;
            }
            acc += ca * cb * derivative_unchecked(ma.orders(), mb.orders(), x, xp, hp);
        }
    }
    acc
}

/// Like [`cross_covariance`], also accumulating the derivative with respect to each raw
/// lengthscale entry into `grad_g` (which is overwritten).
pub(crate) fn cross_covariance_with_grad(
    a: &Functional,
    x: &[f64],
    b: &Functional,
    xp: &[f64],
    hp: &KernelHyperparams,
    grad_g: &mut [f64],
    scratch: &mut [f64],
) -> f64 {
    grad_g.iter_mut().for_each(|g| *g = 0.0);
    let mut acc = 0.0;
    for (ca, ma) in &a.terms {
        if *ca == 0.0 {
            continue;
        }
        for (cb, mb) in &b.terms {
            if *cb == 0.0 {
                continue;
            }
            let w = ca * cb;
            acc += w * derivative_with_lengthscale_grad(ma.orders(), mb.orders(), x, xp, hp, scratch);
            for (g, s) in grad_g.iter_mut().zip(scratch.iter()) {
                *g += w * s;
            }
        }
    }
    acc
}

fn checked(
    cfg: &KernelConfig,
    a: &Functional,
    x: &[f64],
    b: &Functional,
    xp: &[f64],
    hp: &KernelHyperparams,
) -> Result<f64> {
    check_dim(hp.dim(), x.len())?;
    check_dim(hp.dim(), xp.len())?;
    for (_, m) in a.terms.iter().chain(&b.terms) {
        check_dim(hp.dim(), m.dim())?;
        cfg.check(m)?;
    }
    Ok(cross_covariance(a, x, b, xp, hp))
}

/// `k_rr(x, x') = L_x L_{x'} k(x, x')`. The right-hand side does not enter.
pub fn kernel_rr(x: &[f64], xp: &[f64], constraint: &AffineConstraint, hp: &KernelHyperparams) -> Result<f64> {
    let op = &constraint.operator;
    checked(&KernelConfig::default(), &op.functional_at(x), x, &op.functional_at(xp), xp, hp)
}

/// `k_ur(x, x') = L_{x'} k(x, x')`.
pub fn kernel_ur(x: &[f64], xp: &[f64], constraint: &AffineConstraint, hp: &KernelHyperparams) -> Result<f64> {
    let op = &constraint.operator;
    checked(&KernelConfig::default(), &Functional::for_value(x.len()), x, &op.functional_at(xp), xp, hp)
}

/// `k_ru(x, x') = L_x k(x, x')`.
pub fn kernel_ru(x: &[f64], xp: &[f64], constraint: &AffineConstraint, hp: &KernelHyperparams) -> Result<f64> {
    let op = &constraint.operator;
    checked(&KernelConfig::default(), &op.functional_at(x), x, &Functional::for_value(xp.len()), xp, hp)
}

/// Covariance between `∂^α u(x)` and the process `other` at `x'`.
pub fn kernel_lt(
    x: &[f64],
    xp: &[f64],
    target: &DerivativeTarget,
    other: Process<'_>,
    hp: &KernelHyperparams,
) -> Result<f64> {
    checked(&KernelConfig::default(), &target.functional(), x, &other.functional_at(xp), xp, hp)
}
