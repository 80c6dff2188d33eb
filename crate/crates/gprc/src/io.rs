//! CSV and JSON formats: datasets, operators, models, predictions and reports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use gprc_core::picard::PicardRecord;
use gprc_core::{
    AffineConstraint, Dataset, DerivativeTarget, KernelHyperparams, LinearOperator, LossCurve, MultiIndex, NoiseConfig,
    OperatorTerm, PointSet, PosteriorGaussian, ScalarField, TrainedModel,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::harness::target_label;
use crate::scenario::{poisson_g, poisson_solution};

pub const MODEL_FORMAT: &str = "gprc-model";
pub const MODEL_VERSION: u32 = 1;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Reads a header row followed by rows of `D` floats.
pub fn read_points_csv(path: &Path) -> Result<PointSet> {
    let (dim, rows) = read_float_table(path)?;
    PointSet::new(dim, rows.concat()).context(|| path.display().to_string())
}

fn read_float_table(path: &Path) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let width = rdr.headers()?.len();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        if row.len() != width {
            return Err(Error::Format(format!("{}: row {} has {} fields, header has {width}", path.display(), i + 1, row.len())));
        }
        rows.push(row);
    }
    Ok((width, rows))
}

/// Dataset CSV: header, `D` location columns, then the observation column.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let (width, rows) = read_float_table(path)?;
    if width < 2 {
        return Err(Error::Format(format!("{}: need at least one location column and one value column", path.display())));
    }
    let dim = width - 1;
    let mut flat = Vec::with_capacity(rows.len() * dim);
    let mut y = Vec::with_capacity(rows.len());
    for row in &rows {
        flat.extend_from_slice(&row[..dim]);
        y.push(row[dim]);
    }
    let points = PointSet::new(dim, flat)?;
    Dataset::new(points, y).context(|| path.display().to_string())
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (1..=data.dim()).map(|d| format!("x_{d}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (x, y) in data.points().rows().zip(data.y()) {
        w.write_record(x.iter().chain(std::iter::once(y)).map(|v| v.to_string()))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// A coefficient or right-hand side: a constant, a named builtin or a 1D grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Constant(f64),
    Builtin {
        builtin: String,
        #[serde(default = "one")]
        scale: f64,
    },
    Grid {
        grid: GridField,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// Piecewise-linear samples `values` at nodes `x`; `transform` maps each sample first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<GridTransform>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridTransform {
    /// `v ↦ 1 - v²`.
    OneMinusSquare,
}

/// Builtin field names accepted in operator files.
pub const BUILTINS: [&str; 2] = ["poisson_g", "poisson_u"];

fn builtin(name: &str) -> Result<ScalarField> {
    match name {
        "poisson_g" => Ok(ScalarField::from_fn(|x| poisson_g(x))),
        "poisson_u" => Ok(ScalarField::from_fn(|x| poisson_solution(x, &[0, 0]))),
        other => Err(Error::UnknownBuiltin(other.to_string())),
    }
}

impl FieldSpec {
    pub fn to_field(&self) -> Result<ScalarField> {
        match self {
            FieldSpec::Constant(c) => Ok(ScalarField::constant(*c)),
            FieldSpec::Builtin { builtin: name, scale } => Ok(builtin(name)?.scaled(*scale)),
            FieldSpec::Grid { grid, scale } => {
                let values = match grid.transform {
                    Some(GridTransform::OneMinusSquare) => grid.values.iter().map(|v| 1.0 - v * v).collect(),
                    None => grid.values.clone(),
                };
                Ok(ScalarField::grid_1d(grid.x.clone(), values)?.scaled(*scale))
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self {
            FieldSpec::Builtin { builtin: name, .. } if name.starts_with("poisson") && dim != 2 => {
                Err(Error::Format(format!("builtin `{name}` is defined on two-dimensional inputs")))
            }
            FieldSpec::Grid { .. } if dim != 1 => Err(Error::Format("grid fields are one-dimensional".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub coeff: FieldSpec,
    /// Derivative order per axis.
    pub orders: Vec<u32>,
}

/// JSON description of `Σ c_i ∂^{α_i} u = rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub terms: Vec<TermSpec>,
    #[serde(default = "zero_rhs")]
    pub rhs: FieldSpec,
}

fn zero_rhs() -> FieldSpec {
    FieldSpec::Constant(0.0)
}

impl OperatorSpec {
    pub fn to_constraint(&self) -> Result<AffineConstraint> {
        let Some(first) = self.terms.first() else {
            return Err(Error::Format("operator has no terms".into()));
        };
        let dim = first.orders.len();
        self.rhs.check_dim(dim)?;
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            t.coeff.check_dim(dim)?;
            terms.push(OperatorTerm::new(t.coeff.to_field()?, MultiIndex::new(t.orders.clone())));
        }
        Ok(AffineConstraint::new(LinearOperator::new(terms)?, self.rhs.to_field()?))
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?)).context(|| path.display().to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn read_operator(path: &Path) -> Result<OperatorSpec> {
    read_json(path)
}

/// Serialised trained model; the factorisation is rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub hyperparams: KernelHyperparams,
    pub noise: NoiseConfig,
    pub dim: usize,
    pub points: Vec<f64>,
    pub y: Vec<f64>,
    pub operator: Option<OperatorSpec>,
    pub nlml: f64,
}

impl ModelDocument {
    pub fn new(model: &TrainedModel, operator: Option<OperatorSpec>) -> Result<Self> {
        if model.is_constrained() != operator.is_some() {
            return Err(Error::Format("operator description must accompany exactly the constrained models".into()));
        }
        let data = model.dataset();
        Ok(ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            hyperparams: model.hyperparams().clone(),
            noise: model.noise().clone(),
            dim: data.dim(),
            points: data.points().as_flat().to_vec(),
            y: data.y().to_vec(),
            operator,
            nlml: model.nlml_value(),
        })
    }

    /// Rebuilds the model and checks that it reproduces the stored likelihood.
    pub fn rebuild(&self) -> Result<TrainedModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "expected {MODEL_FORMAT} version {MODEL_VERSION}, found {} version {}",
                self.format, self.version
            )));
        }
        let dataset = Dataset::new(PointSet::new(self.dim, self.points.clone())?, self.y.clone())?;
        let constraint = self.operator.as_ref().map(OperatorSpec::to_constraint).transpose()?;
        let model = TrainedModel::from_parts(dataset, constraint, self.hyperparams.clone(), self.noise.clone())?;
        let rebuilt = model.nlml_value();
        if !((rebuilt - self.nlml).abs() <= 1e-6 * self.nlml.abs().max(1.0)) {
            return Err(Error::ModelMismatch { stored: self.nlml, rebuilt });
        }
        Ok(model)
    }
}

pub fn save_model(path: &Path, model: &TrainedModel, operator: Option<OperatorSpec>) -> Result<()> {
    write_json(path, &ModelDocument::new(model, operator)?)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    read_json::<ModelDocument>(path)?.rebuild().context(|| path.display().to_string())
}

/// Columns `x_1..x_D, target, mean, variance`, one row per point and target.
pub fn write_predictions_csv(
    path: &Path,
    grid: &PointSet,
    targets: &[DerivativeTarget],
    posteriors: &[Vec<PosteriorGaussian>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (1..=grid.dim()).map(|d| format!("x_{d}")).collect();
    header.extend(["target".into(), "mean".into(), "variance".into()]);
    w.write_record(&header)?;
    for (i, x) in grid.rows().enumerate() {
        for (t, post) in targets.iter().zip(posteriors) {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(target_label(t));
            rec.push(post[i].mean.to_string());
            rec.push(post[i].variance.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn write_history_csv(path: &Path, history: &[PicardRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["iteration", "nlml", "residual_rmse"])?;
    for r in history {
        w.write_record([r.iteration.to_string(), r.nlml.to_string(), r.residual_rmse.to_string()])?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn write_loss_csv(path: &Path, curve: &LossCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["mu", "loss"])?;
    for (m, l) in curve.mu.iter().zip(&curve.loss) {
        w.write_record([m.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Identification summary written next to the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentReport {
    pub scenario: String,
    pub mode: String,
    pub true_mu: f64,
    pub argmin_mu: f64,
    pub refined_mu: Option<f64>,
    pub seed: u64,
    pub n_obs: usize,
    pub noise_var: f64,
    pub runtime_secs: f64,
    pub curve: LossCurve,
}
