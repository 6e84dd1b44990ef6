//! Prototype-bank anomaly detection and localization on patch-feature grids.
//!
//! Normal patch features are L2-normalized and clustered with a
//! parameter-free first-neighbour hierarchy; the unit-length cluster means
//! form a bank of 1x1 convolution kernels. A test image is scored by a
//! single matrix product against the bank, a channel max-pool and `1 - x`,
//! then upsampled and smoothed for localization.

pub mod data;
pub mod error;
pub mod finch;
pub mod kernels;
pub mod metrics;
pub mod pipeline;
pub mod prototype;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use finch::{
    finch, first_neighbors, partition_from_neighbors, select_partition, Partition,
    PartitionHierarchy,
};
pub use kernels::RowMatrix;
pub use metrics::{auroc, pixel_auroc, pro_score, EvalReport, Mask};
pub use prototype::{build_bank, load_bank, save_bank, BankMeta, PrototypeBank};
pub use scoring::{score_image, PostprocessConfig, ScoreMap};
pub use tensor::{read_tensor, write_tensor, FeatureTensor};
