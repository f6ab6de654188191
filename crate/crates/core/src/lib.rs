// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod error;
pub mod frd;
pub mod green;
pub mod lattice;
pub mod mc;
pub mod moments;
pub mod norms;
pub mod numerics;
pub mod rgflow;
