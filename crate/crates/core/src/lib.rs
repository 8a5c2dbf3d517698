//! Poisson log-normal model inference by importance-sampling EM, for the
//! full likelihood and for block composite likelihoods.

pub mod em;
pub mod error;
pub mod gaussian;
pub mod importance;
pub mod inference;
pub mod init;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod study;

pub use em::{BlockDesign, CompositeFitResult, FitConfig, FitResult, ParticleGrowth};
pub use error::{PlnError, Result};
pub use init::{init_moment, init_vem_lite, InitState};
pub use model::{Dataset, LatentMatrix, ModelParams, ParamLayout};
