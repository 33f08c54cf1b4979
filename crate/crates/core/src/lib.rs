//! Content-aware mixed-precision quantization for patch-based single-image
//! super-resolution.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: a small dense 4-D tensor engine with a
//!   per-forward computation trace for reverse-mode gradients.
//! - [`quant`]: symmetric fake quantization with a learnable clamp bound.
//! - [`edge`]: Laplacian edge scores of image patches.
//! - [`bitops`]: the analytic BitOPs / feature-average-bit cost model.
//! - [`supernet`]: an EDSR-style toy network whose body activations can be
//!   quantized with a per-layer bit configuration.
//! - [`selector`] and [`train`]: per-layer MLP bit selectors, supernet
//!   training, BitOPs-weighted subnet sampling and LUT fine-tuning.
//! - [`lut`]: edge-to-bit lookup tables built from selector records.
//! - [`pipeline`], [`metrics`], [`data`], [`image_io`], [`checkpoint`],
//!   [`config`]: the end-to-end patch pipeline and its tooling.
//! - [`recipe`]: the complete train / record / build / fine-tune flow.

pub mod autograd;
pub mod bitops;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod edge;
pub mod error;
pub mod image_io;
pub mod lut;
pub mod metrics;
pub mod pipeline;
pub mod quant;
pub mod recipe;
pub mod selector;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use bitops::{BitConfig, CostReport};
pub use edge::EdgeScore;
pub use error::{CabmError, Result};
pub use lut::{BitRecord, EdgeToBitLut, Strategy};
pub use quant::QuantParams;
pub use supernet::{Supernet, SupernetSpec};
pub use tensor::{ConvSpec, Tensor};

/// Environment variable consulted for the default RNG seed.
pub const SEED_ENV: &str = "CABM_SEED";

/// Default seed when neither a flag nor [`SEED_ENV`] provides one.
pub const DEFAULT_SEED: u64 = 20230;
