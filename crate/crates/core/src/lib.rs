//! Correspondence proposal networks at desk scale.
//!
//! A video feature map of shape `THW x C` is treated as a point cloud. For
//! every point the [`knn`] module proposes its `k` most similar features in
//! *other* frames; the [`cp`] module embeds each (anchor, proposal,
//! displacement) triple with a shared MLP and max-pools over the proposals.
//! The [`toy`] module wires this into a two-convolution network trained on a
//! synthetic moving-square dataset.

pub mod cp;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod knn;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tape::{Gradients, RunningStats, Tape, Var};
pub use tensor::Tensor;
