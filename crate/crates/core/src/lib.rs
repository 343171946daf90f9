//! Multimodal sequential recommendation with four interaction experts
//! (image-unique, text-unique, synergy, redundancy) and an adaptive
//! fusion layer, built on a small reverse-mode autodiff engine.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod prism;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
