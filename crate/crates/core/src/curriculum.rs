//! Curriculum sampling: a domain pseudo-partition of the unlabelled pool and
//! epoch-dependent sampling weights.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ss_kmeans;
use crate::error::{Error, Result};

/// How the early-phase weight of predicted unseen-domain samples is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R0Rule {
    /// Use `r0` as given.
    Fixed,
    /// `|D^l| / |D̂^b|`.
    LabelledOverUnseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Epoch `t′` after which the late weight applies.
    pub switch_epoch: usize,
    pub r0: f64,
    pub r_prime: f64,
    pub r0_rule: R0Rule,
    /// Cluster count of the domain split.
    pub k_partition: usize,
    pub kmeans_iters: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            switch_epoch: 24,
            r0: 0.0,
            r_prime: 0.05,
            r0_rule: R0Rule::Fixed,
            k_partition: 2,
            kmeans_iters: 50,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if self.switch_epoch > epochs {
            return Err(Error::Config(format!(
                "curriculum.switch_epoch {} exceeds the {epochs} training epochs",
                self.switch_epoch
            )));
        }
        if !(self.r0 >= 0.0 && self.r_prime >= 0.0 && self.r0.is_finite() && self.r_prime.is_finite()) {
            return Err(Error::Config("curriculum weights r0 and r_prime must be >= 0".into()));
        }
        if self.k_partition < 2 {
            return Err(Error::Config("curriculum.k_partition must be >= 2".into()));
        }
        Ok(())
    }
}

/// Predicted seen (`D̂^a`) and unseen (`D̂^b`) domain members of the unlabelled pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainPartition {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Which branch of the weight function a sample falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratum {
    Labelled,
    Seen,
    Unseen,
}

/// Splits the unlabelled samples by semi-supervised k-means on domain
/// features, with every labelled sample pinned to cluster 0.
pub fn partition_domains(
    z_d: &[Vec<f64>],
    labelled: &[bool],
    cfg: &CurriculumConfig,
    seed: u64,
) -> Result<DomainPartition> {
    if z_d.len() != labelled.len() {
        return Err(Error::shape("partition_domains", &[labelled.len()], &[z_d.len()]));
    }
    let forced: Vec<Option<usize>> = labelled.iter().map(|&l| l.then_some(0)).collect();
    let k = cfg.k_partition.min(z_d.len());
    let result = ss_kmeans(z_d, k, &forced, cfg.kmeans_iters, 1e-9, seed)?;
    let (seen, unseen) = (0..z_d.len())
        .filter(|&i| !labelled[i])
        .partition(|&i| result.assignments[i] == 0);
    Ok(DomainPartition { seen, unseen })
}

/// Sampling weight of one stratum at epoch `t`.
pub fn weight(stratum: Stratum, t: usize, n_labelled: usize, partition: &DomainPartition, cfg: &CurriculumConfig) -> f64 {
    match stratum {
        Stratum::Labelled => 1.0,
        Stratum::Seen if partition.seen.is_empty() => 1.0,
        Stratum::Seen => n_labelled as f64 / partition.seen.len() as f64,
        Stratum::Unseen => {
            let r0 = match cfg.r0_rule {
                R0Rule::Fixed => cfg.r0,
                R0Rule::LabelledOverUnseen if partition.unseen.is_empty() => cfg.r0,
                R0Rule::LabelledOverUnseen => n_labelled as f64 / partition.unseen.len() as f64,
            };
            if t > cfg.switch_epoch {
                cfg.r_prime
            } else {
                r0
            }
        }
    }
}

/// Per-sample weights over the whole dataset at epoch `t`.
pub fn sample_weights(labelled: &[bool], partition: &DomainPartition, t: usize, cfg: &CurriculumConfig) -> Vec<f64> {
    let n_labelled = labelled.iter().filter(|&&l| l).count();
    let mut w: Vec<f64> = labelled
        .iter()
        .map(|&l| if l { 1.0 } else { 0.0 })
        .collect();
    let seen = weight(Stratum::Seen, t, n_labelled, partition, cfg);
    let unseen = weight(Stratum::Unseen, t, n_labelled, partition, cfg);
    partition.seen.iter().for_each(|&i| w[i] = seen);
    partition.unseen.iter().for_each(|&i| w[i] = unseen);
    w
}

/// Draws `batch` indices with replacement, proportionally to `weights`.
pub fn draw_batch<R: Rng + ?Sized>(weights: &[f64], batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(format!("cannot sample from weights: {e}")))?;
    Ok((0..batch).map(|_| dist.sample(rng)).collect())
}
