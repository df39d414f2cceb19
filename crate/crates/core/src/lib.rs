//! Task-vector extraction, sparsification and merging for checkpoint
//! archives, plus label-free coefficient search over merged models.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod atomic;
pub mod diagnostics;
pub mod dtype;
pub mod evaluator;
pub mod optimizer;
pub mod pipeline;
pub mod quantile;
pub mod task_vector;
pub mod tensor_archive;

pub use dtype::Dtype;
pub use task_vector::{TaskVector, TaskVectorError};
pub use tensor_archive::{ArchiveError, Metadata, TensorArchive, TensorEntry};
