//! Desk-scale engine for iterative, condition-guided diffusion editing.
//!
//! The pieces: a noise schedule with closed-form convergence constants,
//! analytic noise-prediction oracles for labeled Gaussian worlds, a small
//! trainable denoiser for the image regime, the deterministic sampler
//! machinery (noising, reverse steps, inversion), the masked progressive
//! editing step and its recursion, convergence diagnostics, synthetic data
//! generators, and the evaluation metrics with two comparison baselines.

pub mod ddim;
pub mod error;
pub mod metrics;
pub mod mlp;
pub mod oracle;
pub mod pie;
pub mod schedule;
pub mod state;
pub mod synth;
pub mod theory;

pub use error::{PieError, Result};
pub use oracle::{Condition, Denoiser, GaussianWorldOracle, MarginalOracle};
pub use pie::{NoiseMode, PieConfig, RoiMask, StepRecord, Trajectory};
pub use schedule::NoiseSchedule;
pub use state::{Shape, State};
pub use synth::{BlobImageSpec, ClassSpec, LatentWorld};
