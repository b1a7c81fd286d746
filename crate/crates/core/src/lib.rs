//! Adaptive variance-based sensitivity analysis.
//!
//! Estimates first-order and total Sobol' indices from paired `A`/`B`/`A_Bi`
//! designs, decomposes total sensitivity into exact piecewise-constant local
//! densities along each input, and uses the averaged density to re-weight
//! subsequent batches of a Sobol' design.
//!
//! Conventions: Rust APIs index inputs `i` and outputs `j` from zero. All
//! user-facing formats (CLI flags, HTTP, CSV, evaluation logs) are 1-based.

pub mod campaign;
pub mod design;
pub mod error;
pub mod estimators;
pub mod model;
pub mod regional;
pub mod sobol;
pub mod uncertainty;

pub use campaign::{CampaignConfig, CampaignState, CampaignStatus};
pub use design::{DesignRow, EvaluationRequest, MatrixTag};
pub use error::SensaError;
pub use estimators::{EvaluationBlock, SensitivityIndices};
pub use regional::{AlphaEpsilon, CumulativeCurve, PiecewiseConstantDensity};
pub use sobol::SobolStream;

pub type Result<T, E = SensaError> = std::result::Result<T, E>;
