//! Open-vocabulary visual relationship detection on synthetic 2-D scenes.
//!
//! The model is an encoder-only vision transformer whose patch tokens act
//! directly as object proposals. A relationship-attention layer scores every
//! ordered token pair, a hard top-k selection keeps the most promising pairs,
//! and a small head classifies each survivor against free-form text queries
//! embedded into the same space. Everything — autodiff, optimizer, matching,
//! metrics, data generation — is implemented here from scratch over plain
//! `Vec<f32>` matrices, runs deterministically from seeds, and is exercised
//! end to end by the test suite.

pub mod error;
pub mod bench;
pub mod cli;
pub mod eval;
pub mod gradcheck;
pub mod tensor;
pub mod tape;
pub mod checkpoint;
pub mod dataset;
pub mod loss;
pub mod model;
pub mod params;
pub mod relation;
pub mod optim;
pub mod boxes;
pub mod hungarian;
pub mod scenes;
pub mod text;
pub mod train;
pub mod encoder;

pub use error::{Error, Result};
