// Negated float comparisons reject NaN; index loops read better in the kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod dataset_io;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod pipeline;
pub mod regressor;
pub mod relation;

pub use error::{Error, Result};
