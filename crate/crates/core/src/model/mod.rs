//! The 1-D residual network, its initialization and its weight files.

mod config;
pub mod io;
mod layers;
mod network;

pub use config::ResNetConfig;
pub use io::{load_model_expecting, load_weights, save_weights, ModelWeights};
pub use layers::{BatchNorm1d, Conv1d, Dense, TensorKind, BN_EPS, BN_MOMENTUM};
pub use network::{BlockCache, ForwardCache, Gradients, ResNet, ResidualBlock, RunMode};
