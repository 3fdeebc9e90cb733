// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tensor64};
pub mod attacks;
pub mod cert;
pub mod cli;
pub mod harness;
pub mod nn;
pub mod par;
pub mod spectral;
