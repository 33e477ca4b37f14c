//! Boundary-aware curriculum negative sampling and contrastive local
//! attention on synthetic paired corpora.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bns;
pub mod cla;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod index;
pub mod io;
pub mod seed;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
