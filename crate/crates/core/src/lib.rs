//! Mean-field dynamics of dropout training for two-layer networks.
//!
//! The finite-width algorithms (dropout, random-mask backpropagation,
//! propagation noise and their combinations) live in [`finite`]; their
//! large-width limits in the four scaling regimes live in [`limit`];
//! [`transport`] measures Wasserstein-1 distances and [`diagnostics`]
//! builds the coupled experiments on top.

pub mod diagnostics;
pub mod error;
pub mod finite;
pub mod harness;
pub mod limit;
pub mod model;
pub mod numeric;
pub mod record;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
pub use finite::{StepConfig, Variant};
pub use limit::{classify, HyperSchedule, Horizon, Phase};
pub use model::{Dataset, FeatureKind, FeatureMap, Model, ParticleEnsemble};
pub use record::{Recorder, Snapshot, TrajectoryRecord};
pub use rng::{MaskRow, MaskSource, MaskStream};
