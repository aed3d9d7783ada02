// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod distill;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod optim;
pub mod plant;
pub mod policy_search;
pub mod roa;

pub use error::{Error, Result};
