//! Sequential multi-modal semantic segmentation at desk scale.
//!
//! The pipeline treats the aligned modalities of one scene as an ordered
//! sequence of frames: a small hierarchical encoder (with low-rank adapters
//! on attention query/value projections) produces a feature pyramid per
//! frame, a memory bank carries earlier frames' mask-conditioned features
//! into later frames via cross-attention, and the per-frame prediction
//! masks are averaged into the final output. A training-only prototype
//! bank with momentum updates supplies an auxiliary alignment loss.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod params;
pub mod selfcheck;
pub mod spmm;
pub mod train;

pub use error::{Error, Result};
pub use numerics::NdArray;
