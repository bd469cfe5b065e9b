//! Energy-based OOD detection with a prior-aware ("balanced") energy
//! regularizer for class-imbalanced auxiliary outliers.
//!
//! The pipeline: pretrain a classifier with cross-entropy, count its
//! predictions on the auxiliary outliers to estimate their class prior,
//! then fine-tune with squared energy hinges whose OOD term is margin-shifted
//! and weighted by `Z_gamma`, the prior-weighted posterior of each outlier.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod math;
pub mod model;
pub mod numfmt;
pub mod prior;
pub mod rng;

pub use error::{Error, Result};

use std::path::Path;

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}
