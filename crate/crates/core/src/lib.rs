//! Convolution-free transformer encoder–decoder for image denoising.
//!
//! The model cuts an image into overlapping dilated windows ("soft split"),
//! runs transformer blocks over the resulting tokens, re-tokenizes through
//! three stages with cyclic shifts in between, then mirrors the path back
//! with folds and inverse shifts. The decoder predicts a residual that is
//! added to the noisy input.
//!
//! Everything is built from scratch on a small dense [`Tensor`] and a
//! reverse-mode [`Tape`]:
//!
//! * [`tokenization`]: soft split, fold, cyclic shift, token/spatial reshape
//! * [`transformer`]: multi-head self-attention blocks
//! * [`model`]: shape planning, parameters, forward pass
//! * [`training`]: MSE objective, Adam, patch sampling, augmentation
//! * [`metrics`]: SSIM and RMSE
//! * [`volume`], [`phantom`], [`tiling`]: image containers, synthetic data,
//!   overlapped-patch inference

pub mod autodiff;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod phantom;
pub mod tensor;
pub mod tiling;
pub mod tokenization;
pub mod training;
pub mod transformer;
pub mod volume;
pub mod weights;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use metrics::{rmse, ssim, EvaluationReport, MetricReport};
pub use model::{plan_shapes, ModelConfig, ShapePlan, StagePlan, TedNet, TedNetParams};
pub use tensor::{Element, Tensor};
pub use tiling::tile_denoise;
pub use tokenization::{StageGeometry, TokenGrid};
pub use training::{train, TrainConfig, TrainOutcome};
pub use volume::ImageVolume;


