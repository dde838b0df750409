//! Learns printable adversarial patches that suppress person detections in a
//! single-shot detector and measures the effect with PR curves and recall.
//!
//! Pipeline: [`data`] pseudo-labels images with the target detector,
//! [`trainer`] optimizes a [`patch::Patch`] through [`applier`] and a frozen
//! [`detector`], and [`evaluator`] compares recall across patch conditions.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod applier;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod fsutil;
pub mod patch;
pub mod raster;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
