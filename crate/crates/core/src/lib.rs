// `!(x > y)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod geometry;
pub mod io;
pub mod octree;
pub mod rangecoder;
pub mod nn;
pub mod sparse;
pub mod metrics;
pub mod transformer;
pub mod config;
pub mod codec;
pub mod pipeline;
pub mod train;
pub mod svg;
