pub mod adjudicator;
pub mod classes;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod seeds;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use classes::{Abnormality, N_CLASSES};
pub use error::{Error, Result};
pub use model::{ResNet, ResNetConfig};
pub use tensor::{Element, Tensor};
