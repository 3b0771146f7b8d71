//! Marginal (1D) heatmap regression for landmark detection and tracking.
//!
//! Predicting a pair of 1D heatmaps per landmark — the marginal
//! distributions of its x and y coordinates — shrinks the output from
//! `N·L²` points to `2·N·L`, which lets the resolution `L` grow large and
//! cuts the floor-quantization error of heatmap decoding. The crate
//! provides:
//!
//! - [`tensor`]: a dense f64 tensor with tape-based reverse-mode
//!   differentiation for every primitive the networks need.
//! - [`codec`]: exact encode/decode between continuous coordinates and
//!   1D/2D heatmaps, with closed-form quantization-error accounting.
//! - [`coattn`]: the co-attention module coupling x-axis and y-axis
//!   distributional features through learned affinity matrices.
//! - [`detector`]: an hourglass-backed detector with per-axis compression
//!   heads and a deconvolution output stage.
//! - [`tracker`]: streaming temporal refinement of detected heatmaps with
//!   exponentially decayed past-frame features.
//! - [`synth`]: a deterministic parametric face generator with exact
//!   continuous landmark ground truth, plus `.pts`/PGM file I/O.
//! - [`eval`]: NRMSE metrics and sweep/ablation harnesses.

pub mod checkpoint;
pub mod codec;
pub mod coattn;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tracker;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, Var};
