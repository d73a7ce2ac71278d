//! Desk-scale laboratory for int-8 post-training-quantization backdoors.
//!
//! The crate trains small image classifiers, quantizes them with a faithful
//! affine int-8 converter (full-integer and dynamic-range modes), mounts the
//! two-stage attack that hides a backdoor in the full-precision weights so it
//! only activates after conversion, and runs the detection suite (accuracy
//! metrics, input-blend entropy screening, trigger reverse-engineering) that
//! the dormant model is built to evade.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod nn;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tape, Tensor, Var};
