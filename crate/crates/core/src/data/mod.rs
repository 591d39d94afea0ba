//! Datasets: MNIST IDX ingestion, synthetic Gaussian blobs, class partitioning
//! across participants, and the oracle classifier that scores reconstructions.

mod dataset;
mod idx;
mod oracle;
mod partition;
mod synth;

pub use dataset::{Dataset, Split};
pub use idx::{load_mnist, parse_idx, IdxData};
pub use oracle::{oracle_score, train_oracle, OracleClassifier, OracleConfig};
pub use partition::{partition, PartitionPlan};
pub use synth::{synth_blobs, BlobsConfig};
