pub mod ablate;
pub mod autodiff;
pub mod bhfm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod head;
pub mod image_encoder;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mpg;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod union_encoder;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
