//! Multi-class classification with a learned binary class-structure tree.
//!
//! Every internal node of the tree splits its classes into the two groups
//! that are most separable by an unbiased squared-hinge SVM. The exact
//! search over all bipartitions is exponential, so the split is found by a
//! convex relaxation: candidate group labelings become base kernels of a
//! multiple-kernel-learning problem, grown by cutting planes and solved by
//! reduced-gradient descent on the kernel weights. The final bipartition is
//! read off the weighted label affinity matrix with a maximum spanning tree.
//!
//! Module map:
//!
//! - [`data`]: LIBSVM parsing, stratified splits, feature scaling
//! - [`kernel`]: kernels, Gram matrices, explicit feature maps
//! - [`svm`]: the dual coordinate-descent solver and binary models
//! - [`msm`]: the max-margin node split and its exhaustive oracle
//! - [`tree`]: tree construction and root-to-leaf prediction
//! - [`baselines`]: one-vs-one and one-vs-rest
//! - [`harness`]: metrics, cross-validation and experiment runs
//!
//! ## Feature flags
//!
//! - `parallel` (default): rayon-backed Gram assembly, partition
//!   enumeration, cross-validation and batch prediction. Results are
//!   identical with and without it.

pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod msm;
pub mod par;
pub mod svm;
pub mod tree;

pub use error::{Error, Result};
