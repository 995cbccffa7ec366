//! The hierarchical screenshot-to-code model: a conv encoder, a block LSTM
//! with a stop head, soft attention per block and a two-layer token LSTM.

pub mod config;
pub mod decode;
pub mod network;
pub mod train;

pub use config::ModelConfig;
pub use decode::{DecodeResult, Hypothesis, Strategy};
pub use network::{forward_train, BlockInput, BlockState, EncoderOutput, Model, ModelError, Tape, TokenInput, TokenState};
pub use train::{load_split, Example, StepLog, TrainConfig, Trainer};
