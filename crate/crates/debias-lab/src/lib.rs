// negated comparisons are how NaN inputs get rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod anchors;
pub mod bounds;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod measure;
pub mod models;
pub mod partition;

pub use error::{Error, Result};
