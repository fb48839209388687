//! Configuration, synthetic data and sweeps.

pub mod config;
pub mod data;
pub mod sweep;

pub use config::{DatasetSpec, ExperimentConfig};
pub use data::{gen_teacher_student, gen_with_teacher, init_ensemble, InitLaw, TeacherSpec};
pub use sweep::{report, sweep, SweepGrid, SweepOutcome, SweepRow};
