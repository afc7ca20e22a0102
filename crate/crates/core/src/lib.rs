#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod channels;
pub mod error;
pub mod estimators;
pub mod expfam;
pub mod harness;
pub mod linalg;
pub mod privreg;
pub mod regioncount;
pub mod rng;

pub use error::{Error, Result};
