//! Rotation-controlled LoRA unlearning at desk scale.

pub mod error;
pub mod matrix;
pub mod par;
pub mod data;
pub mod lora;
pub mod toymodel;
pub mod harness;
pub mod rotmath;
pub mod ood;
pub mod compensator;

pub use error::{RcuError, Result};
pub use matrix::Matrix;
