//! Screenshot-to-layout-program generation with a hierarchical,
//! attention-guided LSTM decoder.
//!
//! * [`dsl`]: the layout language and its block split
//! * [`render`]: rasterizer, HTML emitter, PPM/PGM codecs
//! * [`synth`]: seeded program generator and dataset builder
//! * [`nn`]: layers with analytic gradients, parameters, Adam
//! * [`model`]: encoder, block/token decoders, training, greedy and beam inference
//! * [`metrics`]: token error, block partitioning accuracy, attention dumps
//! * [`config`]: flat `key=value` run configuration with presets
//! * [`gradcheck`]: finite-difference verification of every backward pass

pub mod config;
pub mod dsl;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use tensor::{NnError, Scalar, Tensor};
