//! Random-shift tests of independence between two spatial components:
//! random fields sampled at point locations, or pairs of point patterns.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gaussfield;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod pattern;
pub mod pointsim;
pub mod rng;
pub mod shifttest;
pub mod stats;
pub mod summaries;
pub mod variance;

pub use error::{Error, Result};
pub use gaussfield::{CovarianceModel, FieldRaster, GridDims, SampleDesign};
pub use geometry::{ShiftLaw, Window};
pub use harness::{binomial_ci, run_experiment, ExperimentSpec, ModelId, RejectionTable};
pub use pattern::PointPattern;
pub use shifttest::{
    run_test, Alternative, Envelope, Method, StatisticKind, Strategy, StrategyConfig, TestData, TestResult,
    TestStatisticSeries,
};
pub use variance::{PairCorrelation, VarianceEstimate, VarianceMethod};
