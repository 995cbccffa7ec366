//! Layers with hand-written backward passes, the parameter store and Adam.

pub mod adam;
pub mod attention;
pub mod conv;
pub mod lstm;
pub mod ops;
pub mod params;

pub use adam::{adam_step, AdamConfig};
pub use attention::{attend, attend_backward, attention, project_regions, AttentionCache, AttentionWeights};
pub use conv::{conv2d, conv2d_backward, maxpool2d, maxpool2d_backward, ConvGeom};
pub use lstm::{lstm_cell, lstm_cell_backward, LstmCache, LstmWeights};
pub use ops::{cross_entropy, dropout, linear, linear_backward, region_pool, region_pool_backward, sigmoid, softmax};
pub use params::{init_params, Grads, Init, ModelParams, ParamSpec, WeightsError};
pub use crate::tensor::NnError;
