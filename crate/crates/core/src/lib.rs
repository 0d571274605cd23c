//! Compositionally-warped additive mixed models.

pub mod basis;
pub mod error;
pub mod model;
pub mod optim;
pub mod reml;
pub mod simulate;
pub mod stats;
pub mod warp;

pub use error::{CammError, Result};
pub use warp::{StepKind, Template, WarpStack, WarpStep};
pub use model::{fit_camm, predict, CoefType, Dataset, FitResult, ModelSpec, WarpDepth};
