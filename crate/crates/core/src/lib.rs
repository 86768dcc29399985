//! Second-order training of small Neural ODEs.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod adjoint;
pub mod curvature;
pub mod data;
pub mod error;
pub mod horizon;
pub mod kfac;
pub mod loss;
pub mod numerics;
pub mod optimizer;
pub mod oracle;
pub mod odesolve;
pub mod rng;
pub mod trainer;
pub mod vector_field;

pub use error::{Error, Result};
