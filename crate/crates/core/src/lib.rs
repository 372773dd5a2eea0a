//! Randomized brain-patch function representation with KAN-augmented
//! ViT/DeiT classifiers.
//!
//! The pipeline runs in three stages: anchor and patch sampling over a
//! gray-matter mask ([`anchors`], [`features`]), a function representation
//! built from Pearson correlations between patch and anchor signals, and a
//! transformer classifier over fused function/position tokens
//! ([`embedding`], [`model`]) whose feed-forward blocks and head can be KAN
//! layers ([`kan`]). [`train`] and [`grid`] run cross-validated experiments;
//! [`metrics`] and [`stats`] score and compare them.

pub mod anchors;
pub mod autodiff;
pub mod error;
pub mod extract;
pub mod features;
pub mod embedding;
pub mod grid;
pub mod kan;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
