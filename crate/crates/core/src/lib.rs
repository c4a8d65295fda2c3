//! Discrete-time pooled logistic regression fitted through stacked estimating
//! equations, with g-computation risk curves and sandwich variance.
//!
//! The core is generic over [`Scalar`] (`f32` or `f64`). Aliases for the
//! common `f64` instantiations live at the crate root.

pub mod benchmark;
pub mod csv_io;
pub mod data;
pub mod design;
pub mod ee;
pub mod error;
pub mod gcomp;
pub mod inference;
pub mod linalg;
pub mod memory;
pub mod scalar;
pub mod simulation;
pub mod solver;
pub mod standard;

pub use benchmark::{run_benchmark, BenchmarkOptions, BenchmarkReport};
pub use csv_io::{load_csv, read_csv, CsvSchema};
pub use data::{discretize, indicator_matrices, IndicatorMatrices, SurvivalDataset, TimeGrid, Weights};
pub use design::{build_design, CovariateFormula, CovariateTerm, DisjointRows, TimeDesignMatrix, TimeForm};
pub use ee::{estimate_elements, expit, logit, score_stack, EfMode, EfStack, ElementModel, ParamLayout, PooledScore};
pub use error::{Error, Result};
pub use gcomp::{
    causal_contrast, estimate_risks, fit_pooled_logistic, ArmStrategy, FitOptions, FitResult, GCompResult, GComputationSpec,
    Intervention, RiskCurve, RiskCurveRow,
};
pub use inference::{sandwich, wald_ci, SandwichResult};
pub use scalar::Scalar;
pub use solver::{solve_roots, JacobianStep, SolveDiagnostics, SolverOptions};

pub type Dataset = SurvivalDataset<f64>;
pub type TimeDesign = TimeDesignMatrix<f64>;
pub type Sandwich = SandwichResult<f64>;
pub type Fit = FitResult<f64>;
pub type Curve = RiskCurve<f64>;
pub type GComp = GCompResult<f64>;
