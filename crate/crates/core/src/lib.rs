//! Biomarker-grounded multimodal retinal report generation at desk scale.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod checkpoint;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod http;
pub mod lm;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, ParseError, Result};
