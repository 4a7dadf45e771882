//! Synthetic datasets and ExDir(C, α) non-IID partitioning.

mod dataset;
mod partition;

pub use dataset::{generate_gaussian_mixture, Dataset, GaussianMixture, Samples};
pub use partition::{
    exdir_partition, split_client, ClassAllocation, ClientSplit, ExDirConfig, Partition,
    MIN_CLIENT_SAMPLES, TEST_FRACTION, VAL_FRACTION,
};
