pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flops;
pub mod harness;
pub mod hier;
pub mod losses;
pub mod macs;
pub mod nn;
pub mod parallel;
pub mod predictor;
pub mod tensor;
pub mod vit;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
