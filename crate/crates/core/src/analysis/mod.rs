//! Diagnostics: representational similarity, loss-landscape
//! interpolation, learning-rate sweeps and weight deviation.

mod deviation;
mod landscape;
mod rsa;
mod snapshot;
mod sweep;

pub use deviation::{parameter_deviation, DeviationReport, ModuleDeviation};
pub use landscape::{default_grid, loss_landscape, LandscapeCurve};
pub use rsa::{
    collect_representations, representations_at, rsa_layers, rsa_score, sample_tokens, RSAConfig,
    RSAResult, RepresentationSet, TokenSample,
};
pub use snapshot::{ModelSnapshot, SnapshotEntry};
pub use sweep::{
    lr_sweep, quartiles, Quartiles, SweepCell, SweepResult, SweepSpec, DEFAULT_SWEEP_LRS,
};
