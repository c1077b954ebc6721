//! Sparse Mixture-of-Experts layers for vision backbones, desk scale.
//!
//! The crate is organized around seven areas:
//!
//! - [`tensor`]: dense tensors and a recorded-operation graph with
//!   reverse-mode differentiation and finite-difference checking.
//! - [`routing`]: gate networks, top-k selection, the load-balancing
//!   auxiliary loss, and batch-prioritized dispatch under expert capacity.
//! - [`moe`]: expert MLPs and the MoE transformer / ConvNeXt blocks.
//! - [`backbone`]: isotropic and hierarchical classifiers with MoE
//!   placement strategies, at paper scale (for accounting) and micro scale
//!   (for training).
//! - [`accounting`]: exact parameter counts, activated-parameter counts,
//!   and FLOP estimates.
//! - [`training`]: a deterministic supervised loop with decoupled weight
//!   decay and synthetic datasets.
//! - [`analysis`]: routing-trace statistics, expert-similarity matrices,
//!   usage CDFs, spatial maps, Pareto fronts, and CSV/JSON/SVG export.

pub mod error;
pub mod accounting;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod moe;
pub mod routing;
pub mod tensor;
pub mod training;
pub mod trace;

pub use error::{Error, Result};
