//! Regularized ptychographic phase retrieval.

pub mod epie;
pub mod field;
pub mod forward;
pub mod priors;
pub mod recon;
pub mod scan;

pub use field::{ComplexField2D, FieldError, RealField2D};
pub use forward::{DiffractionSet, ForwardError};
pub use priors::{PriorKind, PriorWeights};
pub use recon::{ReconConfig, ReconError, ReconOutput, ReconState};
pub use scan::{ScanError, ScanPlan};
