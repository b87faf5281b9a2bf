//! Two-stage statistical downscaling of coarse gridded fields.
//!
//! Stage 1 ([`trend`]) builds a deterministic trend from model and
//! observational climatologies plus bilinear interpolation. Stage 2
//! ([`basis`], [`bgl`], [`predict`]) models the remaining bivariate residual
//! (interpolated model anomaly, observation minus trend) with an EOF basis
//! and a sparse block-diagonal precision matrix over basis coefficients, then
//! predicts fine-scale residuals for months without observations, with
//! pointwise uncertainty.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod basis;
pub mod bgl;
pub mod error;
pub mod grid;
pub mod gsf;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod predict;
pub mod synthetic;
pub mod trend;

pub use error::{Error, Result};
pub use grid::{
    CoarseField, Field, FineField, GridKind, GridSpec, Season, SeasonMap, TimeIndex, YearMonth,
};
pub use par::Exec;
