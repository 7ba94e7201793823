//! Trajectory distillation on 2-D toy distributions.
//!
//! The pipeline has three stages:
//!
//! 1. a flow-matching *teacher* velocity field `v_theta(x, t)` trained so its
//!    probability-flow ODE carries noise at `t = 1` to data at `t = 0`
//!    ([`teacher`]),
//! 2. a *student* projection `G_phi(x_t, t, s)` distilled to jump along the
//!    teacher's trajectories in a single evaluation ([`scot`]),
//! 3. a few-step sampler that folds the projection over a decreasing time
//!    schedule and metrics that score the result ([`sampler`], [`metrics`]).
//!
//! Everything trains on a small reverse-mode tape ([`tape`]) that also
//! propagates forward-mode tangents, so the `d/ds` of the projection used by
//! the velocity-matching loss stays differentiable with respect to the
//! parameters. All randomness is counter-based and derived from one root seed
//! ([`rng`]); same seed + same config reproduces every artifact byte for byte.

pub mod data;
pub mod error;
pub mod fd;
pub mod linalg;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod sampler;
pub mod scot;
pub mod tape;
pub mod teacher;

pub use error::CoreError;
pub use linalg::Mat;
pub use nets::{Activation, ArchSpec, ArchTag, EmaShadow, ParamSet, TimeEmbeddingSpec};
pub use sampler::{ProjectionMap, StepSchedule};
pub use scot::{DistillState, LrSchedule, ProjectionConfig};
pub use tape::{NodeId, Tape};
pub use teacher::{TrajectoryPair, VelocityField};
