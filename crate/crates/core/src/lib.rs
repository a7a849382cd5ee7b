//! Multi-ROI classification network for paired neuromelanin / susceptibility
//! MR volumes: shared-weight slice encoders per region of interest, feature
//! fusion into per-region tokens, a dense segmentation head, momentum
//! contrastive regularization, and the training/evaluation machinery around
//! them.

pub mod blocks;
pub mod checkpoint;
pub mod dpt;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image_ops;
pub mod losses;
pub mod metrics;
pub mod moco;
pub mod mrn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{MrnError, Result};
pub use params::{Binder, ParamSet};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
