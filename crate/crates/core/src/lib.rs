//! Branched additive image generators that learn class-distinction maps.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), the
//! synthetic datasets ([`data`]), the generator/mapping/discriminator networks
//! ([`model`]), composition and losses, training with checkpointing, and
//! evaluation.

pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod imaging;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use compose::{alpha_blend, compose_inference, AlphaVector, BranchSet};
pub use config::{RunConfig, TrainConfig};
pub use data::{Convention, DatasetManifest, EvalImage, LabeledImage, Split, SynthParams};
pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_checkpoint, infer, AblationRow, AblationVariant, EvalReport};
pub use losses::{LossReport, LossWeights, Reduction};
pub use model::{init_models, ModelSet, NetConfig};
pub use tensor::{Element, Tensor};
pub use train::{train, train_step, TrainOutcome, TrainRunOptions, TrainState};
