//! Desk-scale two-branch network for object detection and stuff
//! segmentation, with dual-resolution ROI feature fusion.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`graph`]) over dense f64 tensors ([`tensor`]), the neural building
//! blocks ([`layers`]), box geometry and proposal sampling ([`boxgeom`]),
//! the model assembly and checkpoint format ([`model`]), the training
//! loop with feature constraining ([`train`]), a synthetic
//! objects-in-stuff-context dataset generator ([`data`]), and VOC-style
//! detection / segmentation evaluators ([`evalkit`]).

pub mod boxgeom;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod graph;
pub mod layers;
pub mod model;
pub mod pnm;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use rng::Rng;
pub use tensor::Tensor;
