//! Multiple-instance logistic regression.
//!
//! Bags of instances carry a single observed label: a bag is positive when
//! at least one of its instances is. Instance-level logistic coefficients
//! are estimated by EM with a quadratically approximated M-step solved by
//! coordinate descent, optionally under a LASSO penalty for variable
//! selection.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod dataset;
mod design;
pub mod em;
pub mod error;
pub mod model;
pub mod registry;
pub mod selection;
pub mod simulate;
mod serde_array;

pub use dataset::{load_csv, standardize, stratified_kfold, Bag, BagDataset, CsvSchema, FoldAssignment, StandardizationStats};
pub use em::{fit_milr, fit_path, lambda_grid, lambda_max, FitConfig, FitResult, LambdaPath};
pub use error::{MilrError, Result};
pub use model::{Coefficients, Metrics};
