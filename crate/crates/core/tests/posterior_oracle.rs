use gprc_core::operator::{cross_covariance, Functional};
use gprc_core::predict::{build_extended_set, nearest_anchor, poe_normalizer, LocalConditioner, EXPERT_VARIANCE_FLOOR};
use gprc_core::{
    poe_correct, posterior, AffineConstraint, Dataset, DerivativeTarget, IcbcAnchor, KernelHyperparams, LinearOperator,
    MultiIndex, NoiseConfig, OperatorTerm, PointSet, PosteriorGaussian, ScalarField, TrainedModel,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn ode() -> AffineConstraint {
    let op = LinearOperator::new(vec![
        OperatorTerm::new(1.0, MultiIndex::new(vec![2])),
        OperatorTerm::new(1.0, MultiIndex::new(vec![1])),
        OperatorTerm::new(ScalarField::from_fn(|x| 3.0 + 0.2 * x[0]), MultiIndex::new(vec![0])),
    ])
    .unwrap();
    AffineConstraint::new(op, ScalarField::from_fn(|x| (2.0 * x[0]).cos()))
}

fn poisson() -> AffineConstraint {
    AffineConstraint::new(LinearOperator::laplacian(2), ScalarField::from_fn(|x| x[0] - x[1]))
}

/// Brute-force conditioning of `∂^α u(x*)` on `[y; f(χ)]` via a dense LU solve.
fn dense_posterior(model: &TrainedModel, target: &DerivativeTarget, x_star: &[f64], ext: &PointSet) -> PosteriorGaussian {
    let hp = model.hyperparams();
    let c = model.constraint();
    let pts = model.dataset().points();
    let value = Functional::for_value(model.dim());
    let mut rows: Vec<(Vec<f64>, Functional, f64, f64)> = pts
        .rows()
        .zip(model.dataset().y())
        .map(|(x, y)| (x.to_vec(), value.clone(), model.noise().sigma_u2, *y))
        .collect();
    for x in ext.rows() {
        let c = c.unwrap();
        rows.push((x.to_vec(), c.operator.functional_at(x), model.noise().sigma_r2, c.rhs_at(x)));
    }
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = cross_covariance(&rows[i].1, &rows[i].0, &rows[j].1, &rows[j].0, hp);
        }
        k[(i, i)] += rows[i].2;
    }
    let tf = target.functional();
    let ks = DVector::from_iterator(n, rows.iter().map(|r| cross_covariance(&tf, x_star, &r.1, &r.0, hp)));
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.3));
    let lu = k.lu();
    let mean = ks.dot(&lu.solve(&y).unwrap());
    let variance = cross_covariance(&tf, x_star, &tf, x_star, hp) - ks.dot(&lu.solve(&ks).unwrap());
    PosteriorGaussian { mean, variance }
}

#[derive(Clone, Debug)]
struct Case {
    model: TrainedModel,
    x_star: Vec<f64>,
    ext: PointSet,
    target: DerivativeTarget,
}

fn case(max_n: usize, max_m: usize) -> impl Strategy<Value = Case> {
    (1..=max_n, 0..=max_m, any::<bool>(), any::<u64>(), 0.5f64..2.0, 0.02f64..0.5, 0.05f64..1.0).prop_map(
        move |(n, m, two_d, seed, amp, su2, sr2)| {
            let mut s = seed;
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            let dim = if two_d { 2 } else { 1 };
            let pts = PointSet::new(dim, (0..n * dim).map(|_| 2.0 * next()).collect()).unwrap();
            let y = (0..n).map(|_| next() - 0.5).collect();
            let ext = PointSet::new(dim, (0..m * dim).map(|_| 2.0 * next()).collect()).unwrap();
            let x_star: Vec<f64> = (0..dim).map(|_| 2.0 * next()).collect();
            let g = (0..dim).map(|_| 0.4 + next()).collect();
            let mut orders = vec![0u32; dim];
            orders[0] = (3.0 * next()) as u32;
            if dim == 2 && next() < 0.5 {
                orders[1] = 1;
                orders[0] = orders[0].min(1);
            }
            let constraint = if two_d { poisson() } else { ode() };
            let model = TrainedModel::from_parts(
                Dataset::new(pts, y).unwrap(),
                Some(constraint),
                KernelHyperparams::new(amp, g).unwrap(),
                NoiseConfig::fixed(su2, sr2).unwrap(),
            )
            .unwrap();
            Case { model, x_star, ext, target: DerivativeTarget::new(orders) }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_dense_conditioning(c in case(5, 4)) {
        let got = posterior(&c.model, &c.target, &c.x_star, &c.ext).unwrap();
        let want = dense_posterior(&c.model, &c.target, &c.x_star, &c.ext);
        prop_assert!((got.mean - want.mean).abs() <= 1e-8, "mean {} vs {}", got.mean, want.mean);
        prop_assert!((got.variance - want.variance.max(0.0)).abs() <= 1e-8, "var {} vs {}", got.variance, want.variance);
    }

    #[test]
    fn residual_observations_contract_variance(c in case(5, 4)) {
        let with = posterior(&c.model, &c.target, &c.x_star, &c.ext).unwrap();
        let without = posterior(&c.model, &c.target, &c.x_star, &PointSet::empty(c.model.dim())).unwrap();
        let tf = c.target.functional();
        let prior = cross_covariance(&tf, &c.x_star, &tf, &c.x_star, c.model.hyperparams());
        prop_assert!(with.variance >= 0.0);
        prop_assert!(with.variance <= without.variance + 1e-10);
        prop_assert!(without.variance <= prior + 1e-10);
    }

    #[test]
    fn poe_variance_below_both_experts(
        mean in -5.0f64..5.0,
        var in 1e-6f64..10.0,
        value in -5.0f64..5.0,
        x0 in -2.0f64..2.0,
        x in -2.0f64..2.0,
        g in 0.1f64..4.0,
    ) {
        let hp = KernelHyperparams::new(1.0, vec![g]).unwrap();
        let anchor = IcbcAnchor::new(vec![x0], value, MultiIndex::zero(1)).unwrap();
        let base = PosteriorGaussian { mean, variance: var };
        let out = poe_correct(base, &anchor, &[x], &hp);
        let expert = (g * (x - x0) * (x - x0)).exp_m1().max(EXPERT_VARIANCE_FLOOR);
        prop_assert!(out.variance <= var.min(expert) * (1.0 + 1e-12));
        prop_assert!(out.mean >= mean.min(value) - 1e-12 && out.mean <= mean.max(value) + 1e-12);
        let z = poe_normalizer(base, &anchor, &[x], &hp);
        prop_assert!(z.is_finite() && z > 0.0);
    }
}

#[test]
fn poe_has_documented_limits() {
    let hp = KernelHyperparams::new(1.0, vec![1.0]).unwrap();
    let anchor = IcbcAnchor::new(vec![0.0], 2.0, MultiIndex::zero(1)).unwrap();
    let base = PosteriorGaussian { mean: 0.0, variance: 1.0 };
    let at = poe_correct(base, &anchor, &[0.0], &hp);
    assert!((at.mean - 2.0).abs() < 1e-7 && at.variance <= EXPERT_VARIANCE_FLOOR);
    let far = poe_correct(base, &anchor, &[10.0], &hp);
    assert!((far.mean - base.mean).abs() < 1e-20 && (far.variance - 1.0).abs() < 1e-20);
    let d2: f64 = 0.5 * 0.5;
    let mid = poe_correct(base, &anchor, &[0.5], &hp);
    let sb = d2.exp_m1();
    assert!((mid.variance - sb / (1.0 + sb)).abs() < 1e-14);
}

#[test]
fn nearest_anchor_matches_derivative_and_distance() {
    let a = vec![
        IcbcAnchor::new(vec![0.0], 1.0, MultiIndex::zero(1)).unwrap(),
        IcbcAnchor::new(vec![1.0], 2.0, MultiIndex::zero(1)).unwrap(),
        IcbcAnchor::new(vec![0.9], 3.0, MultiIndex::new(vec![1])).unwrap(),
    ];
    assert_eq!(nearest_anchor(&a, &MultiIndex::zero(1), &[0.8]).unwrap().value, 2.0);
    assert_eq!(nearest_anchor(&a, &MultiIndex::zero(1), &[0.5]).unwrap().value, 1.0);
    assert_eq!(nearest_anchor(&a, &MultiIndex::new(vec![1]), &[0.0]).unwrap().value, 3.0);
    assert!(nearest_anchor(&a, &MultiIndex::new(vec![2]), &[0.0]).is_none());
}

#[test]
fn duplicated_extended_point_is_accepted() {
    let model = TrainedModel::from_parts(
        Dataset::new(PointSet::from_scalars(&[0.0, 0.5, 1.0]), vec![0.1, 0.4, -0.2]).unwrap(),
        Some(ode()),
        KernelHyperparams::new(1.0, vec![1.0]).unwrap(),
        NoiseConfig::fixed(0.01, 0.1).unwrap(),
    )
    .unwrap();
    let ext = PointSet::from_scalars(&[0.4, 0.4, 0.6]);
    let t = DerivativeTarget::new(vec![2]);
    let got = posterior(&model, &t, &[0.5], &ext).unwrap();
    let want = dense_posterior(&model, &t, &[0.5], &ext);
    assert!((got.mean - want.mean).abs() < 1e-8 && (got.variance - want.variance).abs() < 1e-8);
}

#[test]
fn conditioner_is_shared_across_targets() {
    let model = TrainedModel::from_parts(
        Dataset::new(PointSet::from_scalars(&[0.0, 0.7, 1.4, 2.1]), vec![1.0, 0.3, -0.4, -0.2]).unwrap(),
        Some(ode()),
        KernelHyperparams::new(1.2, vec![0.9]).unwrap(),
        NoiseConfig::fixed(0.01, 0.1).unwrap(),
    )
    .unwrap();
    let ext = build_extended_set(&[1.0], &gprc_core::ExtendedSetConfig::uniform(1, 0.5, 5).unwrap(), None).unwrap();
    let local = LocalConditioner::new(&model, &[1.0], &ext).unwrap();
    for k in 0..3 {
        let t = DerivativeTarget::new(vec![k]);
        assert_eq!(local.posterior(&t).unwrap(), posterior(&model, &t, &[1.0], &ext).unwrap());
    }
}

#[test]
fn output_scaling_is_equivariant() {
    let ds = Dataset::new(PointSet::from_scalars(&[0.0, 0.6, 1.1, 1.9]), vec![0.5, -0.3, 0.2, 0.9]).unwrap();
    let op = ode().operator;
    let hp = KernelHyperparams::new(0.8, vec![1.3]).unwrap();
    let a = 7.0;
    let base = TrainedModel::from_parts(
        ds.clone(),
        Some(AffineConstraint::homogeneous(op.clone())),
        hp.clone(),
        NoiseConfig::fixed(0.02, 0.1).unwrap(),
    )
    .unwrap();
    let scaled = TrainedModel::from_parts(
        ds.scaled(a),
        Some(AffineConstraint::homogeneous(op)),
        KernelHyperparams::new(0.8 * a, vec![1.3]).unwrap(),
        NoiseConfig::fixed(0.02 * a * a, 0.1 * a * a).unwrap(),
    )
    .unwrap();
    let ext = PointSet::from_scalars(&[0.8, 1.0, 1.2]);
    for k in 0..3 {
        let t = DerivativeTarget::new(vec![k]);
        let p = posterior(&base, &t, &[1.0], &ext).unwrap();
        let q = posterior(&scaled, &t, &[1.0], &ext).unwrap();
        assert!((q.mean - a * p.mean).abs() < 1e-9 * (a * p.mean).abs().max(1.0));
        assert!((q.variance - a * a * p.variance).abs() < 1e-9 * (a * a * p.variance).abs().max(1.0));
    }
}
