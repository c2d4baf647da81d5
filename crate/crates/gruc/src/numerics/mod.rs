//! Self-contained numeric stack: dense `f64` tensors, a reverse-mode autodiff
//! tape, parameter storage with seeded Glorot init, Adam, the warmup/cosine
//! learning-rate schedule, and a finite-difference gradient checker.
//!
//! The tape is an arena: forward calls evaluate eagerly, record one node each,
//! and hand back opaque [`Var`] ids. `backward` walks the arena once in
//! reverse. There is no graph reuse across instances; a tape lives for one
//! forward/backward pair and is dropped.

mod adam;
mod gradcheck;
mod init;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, CoordReport, GradCheckConfig, GradCheckReport};
pub use init::glorot_uniform;
pub use params::{InitSpec, ParameterSet};
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
