//! Joint image and bilingual sentence embeddings that use the image as a
//! pivot between languages.
//!
//! Sentences are encoded with per-language GRUs and images with a linear map
//! over precomputed CNN features. Training minimizes an in-batch contrastive
//! hinge loss under either cosine or order-violation similarity, optionally
//! with an extra term that pulls descriptions of the same image in both
//! languages together. Everything is differentiated by the small tape engine
//! in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
