//! Dual-modal visual tracking at desk scale.
//!
//! A robust online-regression branch and an accurate offline-classification
//! branch produce heatmaps that are fused by a weighted sum; the box is then
//! refined by score voting over dense proposals. Feature extraction is
//! pluggable: a simulator-oracle provider and a hand-crafted image provider
//! stand in for a deep backbone.

pub mod config;
pub mod correlation;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod gridmath;
pub mod harness;
pub mod labels;
pub mod losses;
pub mod online;
pub mod sim;
pub mod tracker;

pub use error::{Error, Result};
