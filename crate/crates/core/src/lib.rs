//! Lymphocyte detection from sparse free-form annotations.
//!
//! The crate covers the full pipeline: stain normalisation, compilation of
//! point/scribble annotations into label and weight images, randomised patch
//! sampling, an encoder-decoder fully convolutional network with its
//! gradients, SGD training and fine-tuning, and post-processing of
//! probability maps into scored detections.

pub mod annotation;
pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod postprocess;
pub mod raster;
pub mod stain;
pub mod synth;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
