use std::fs;

use gprc::io::{
    load_model, read_dataset_csv, read_operator, read_points_csv, save_model, write_dataset_csv, write_history_csv,
    write_predictions_csv, FieldSpec, ModelDocument, OperatorSpec, TermSpec,
};
use gprc::Error;
use gprc_core::picard::PicardRecord;
use gprc_core::{
    posterior, Dataset, DerivativeTarget, KernelHyperparams, NoiseConfig, PointSet, PosteriorGaussian, TrainedModel,
};
use proptest::prelude::*;

fn damped_spec() -> OperatorSpec {
    OperatorSpec {
        terms: vec![
            TermSpec { coeff: FieldSpec::Constant(1.0), orders: vec![2] },
            TermSpec { coeff: FieldSpec::Constant(1.0), orders: vec![1] },
            TermSpec { coeff: FieldSpec::Constant(3.0), orders: vec![0] },
        ],
        rhs: FieldSpec::Constant(0.0),
    }
}

fn small_dataset() -> Dataset {
    let xs = [0.0, 0.4, 0.9, 1.5, 2.2];
    Dataset::new(PointSet::from_scalars(&xs), xs.iter().map(|t: &f64| (-t).exp() * t.cos()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_csv_round_trips(rows in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let flat: Vec<f64> = rows.iter().flat_map(|r| [r.0, r.1]).collect();
        let ds = Dataset::new(PointSet::new(2, flat).unwrap(), rows.iter().map(|r| r.2).collect()).unwrap();
        write_dataset_csv(&path, &ds).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        prop_assert_eq!(back.points().as_flat(), ds.points().as_flat());
        prop_assert_eq!(back.y(), ds.y());
    }
}

#[test]
fn dataset_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "t,u\n0.0, 1.5\n0.5,2\n").unwrap();
    let ds = read_dataset_csv(&path).unwrap();
    assert_eq!(ds.dim(), 1);
    assert_eq!(ds.y(), &[1.5, 2.0]);

    fs::write(&path, "t,u\n0.0,1.5\n0.5\n").unwrap();
    assert!(read_dataset_csv(&path).is_err());
    fs::write(&path, "t,u\n0.0,abc\n").unwrap();
    assert!(matches!(read_dataset_csv(&path), Err(Error::Format(_)) | Err(Error::Csv(_))));
    fs::write(&path, "u\n1.0\n").unwrap();
    assert!(read_dataset_csv(&path).is_err());
    assert!(matches!(read_dataset_csv(&dir.path().join("missing.csv")), Err(Error::Io { .. })));

    fs::write(&path, "x_1,x_2\n0.1,0.2\n0.3,0.4\n").unwrap();
    let g = read_points_csv(&path).unwrap();
    assert_eq!((g.dim(), g.len()), (2, 2));
}

#[test]
fn operator_json_forms() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("op.json");
    let json = r#"{
        "terms": [
            {"coeff": 1.0, "orders": [2]},
            {"coeff": {"grid": {"x": [0.0, 1.0, 2.0], "values": [0.0, 1.0, 2.0], "transform": "one_minus_square"}, "scale": -0.5}, "orders": [1]},
            {"coeff": 1.0, "orders": [0]}
        ]
    }"#;
    fs::write(&path, json).unwrap();
    let spec = read_operator(&path).unwrap();
    assert_eq!(spec.rhs, FieldSpec::Constant(0.0));
    let c = spec.to_constraint().unwrap();
    let f = c.operator.functional_at(&[0.5]);
    // transform at the nodes (1, 0), then interpolate, then scale
    assert!(f.terms.iter().any(|(coef, m)| m.orders() == [1] && (coef + 0.25).abs() < 1e-15));

    let poisson = r#"{"terms": [{"coeff": 1, "orders": [2, 0]}, {"coeff": 1, "orders": [0, 2]}], "rhs": {"builtin": "poisson_g"}}"#;
    fs::write(&path, poisson).unwrap();
    let c = read_operator(&path).unwrap().to_constraint().unwrap();
    assert!((c.rhs_at(&[0.3, 0.4]) - gprc::scenario::poisson_g(&[0.3, 0.4])).abs() < 1e-15);

    let bad = r#"{"terms": [{"coeff": 1, "orders": [2]}], "rhs": {"builtin": "nope"}}"#;
    fs::write(&path, bad).unwrap();
    assert!(matches!(read_operator(&path).unwrap().to_constraint(), Err(Error::UnknownBuiltin(_))));
    let wrong_dim = r#"{"terms": [{"coeff": 1, "orders": [2]}], "rhs": {"builtin": "poisson_g"}}"#;
    fs::write(&path, wrong_dim).unwrap();
    assert!(read_operator(&path).unwrap().to_constraint().is_err());
    fs::write(&path, r#"{"terms": []}"#).unwrap();
    assert!(read_operator(&path).unwrap().to_constraint().is_err());
}

#[test]
fn model_round_trip_reproduces_posteriors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let spec = damped_spec();
    let model = TrainedModel::from_parts(
        small_dataset(),
        Some(spec.to_constraint().unwrap()),
        KernelHyperparams::new(1.1, vec![0.7]).unwrap(),
        NoiseConfig::new(0.01, 0.1).unwrap(),
    )
    .unwrap();
    save_model(&path, &model, Some(spec)).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.nlml_value(), model.nlml_value());
    let ext = PointSet::from_scalars(&[0.8, 1.0, 1.2]);
    for k in 0..3 {
        let t = DerivativeTarget::new(vec![k]);
        assert_eq!(posterior(&back, &t, &[1.0], &ext).unwrap(), posterior(&model, &t, &[1.0], &ext).unwrap());
    }

    let mut doc: ModelDocument = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!((doc.format.as_str(), doc.version), ("gprc-model", 1));
    doc.nlml += 1.0;
    assert!(matches!(doc.rebuild(), Err(Error::ModelMismatch { .. })));
    doc.nlml -= 1.0;
    doc.version = 2;
    assert!(doc.rebuild().is_err());

    let plain = TrainedModel::from_parts(
        small_dataset(),
        None,
        KernelHyperparams::new(1.0, vec![1.0]).unwrap(),
        NoiseConfig::new(0.01, 1.0).unwrap(),
    )
    .unwrap();
    assert!(save_model(&path, &plain, Some(damped_spec())).is_err());
    save_model(&path, &plain, None).unwrap();
    assert_eq!(load_model(&path).unwrap().nlml_value(), plain.nlml_value());
}

#[test]
fn prediction_and_history_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let grid = PointSet::from_rows(2, &[[0.0, 1.0], [0.5, 0.25]]).unwrap();
    let targets = [DerivativeTarget::new(vec![0, 0]), DerivativeTarget::new(vec![1, 1])];
    let g = |m: f64| PosteriorGaussian { mean: m, variance: 0.5 };
    let post = vec![vec![g(1.0), g(2.0)], vec![g(3.0), g(4.0)]];
    let path = dir.path().join("p.csv");
    write_predictions_csv(&path, &grid, &targets, &post).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x_1,x_2,target,mean,variance");
    assert_eq!(lines[1], "0,1,0:0,1,0.5");
    assert_eq!(lines[2], "0,1,1:1,3,0.5");
    assert_eq!(lines[4], "0.5,0.25,1:1,4,0.5");

    let path = dir.path().join("h.csv");
    let hist = [PicardRecord { iteration: 0, nlml: 1.5, residual_rmse: 0.25 }];
    write_history_csv(&path, &hist).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "iteration,nlml,residual_rmse\n0,1.5,0.25\n");
}
