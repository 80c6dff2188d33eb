#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod field;
pub mod kernel;
pub mod lbfgs;
pub mod linalg;
pub mod operator;
pub mod points;

pub use error::{Error, Result};
pub use field::ScalarField;
pub use kernel::{se_kernel, se_kernel_derivative, KernelConfig, KernelHyperparams, MultiIndex};
pub use operator::{
    kernel_lt, kernel_ru, kernel_rr, kernel_ur, AffineConstraint, DerivativeTarget, LinearOperator, OperatorTerm, Process,
};
pub use points::PointSet;
pub mod gpr;
pub use gpr::{assemble_joint_covariance, nlml, train, Dataset, NoiseConfig, TrainedModel, TrainingConfig};
pub mod predict;
pub use predict::{
    build_extended_set, poe_correct, posterior, predict_field, BoxDomain, ExtendedSetConfig, FieldOptions, IcbcAnchor,
    PosteriorGaussian,
};
pub mod picard;
pub mod ident;
pub use picard::{picard_solve, LinearProblem, NonlinearProblem, PicardConfig, PicardOutcome, PicardRecord};
pub use ident::{identify, loss_at, IdentConfig, IdentMode, LossCurve, ParamScenario};
