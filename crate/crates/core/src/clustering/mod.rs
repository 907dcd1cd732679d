//! Semi-supervised k-means, Hungarian matching and clustering accuracy.

mod accuracy;
mod hungarian;
mod kmeans;

pub use accuracy::{cluster_acc, AccReport};
pub use hungarian::{hungarian, Assignment};
pub use kmeans::{ss_kmeans, ClusterResult};
