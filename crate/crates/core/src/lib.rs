//! Multi-branch person re-identification.
//!
//! Four cooperating feature branches (local stripes, global GeM, global
//! contrastive pooling, one-vs-rest relations) over a shared convolutional
//! trunk, trained with a weighted sum of identity, batch-hard triplet and
//! center losses, plus a retrieval evaluation harness (mAP / CMC).

pub mod autodiff;
pub mod backbone;
pub mod branches;
pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pooling;
pub mod regularization;
pub mod training;
pub mod types;
