//! Dirichlet label-skew partitioning of a dataset across clients.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

/// Client-to-sample-index assignment. Serializes to
/// `{"seed":…, "alpha":…, "assignments":[[…],…]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub seed: u64,
    pub alpha: f64,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Disjointness and exact coverage of `0..n_samples`.
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let mut seen = vec![false; n_samples];
        for list in &self.assignments {
            for &i in list {
                if i >= n_samples {
                    return Err(Error::PartitionFailed(format!(
                        "index {i} out of range {n_samples}"
                    )));
                }
                if seen[i] {
                    return Err(Error::PartitionFailed(format!("index {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::PartitionFailed("not all samples assigned".into()));
        }
        Ok(())
    }
}

/// Label-skew Dirichlet split: for each class, client shares are drawn from
/// `Dirichlet(alpha)` and that class's (shuffled) samples are cut accordingly.
/// Draws that leave any client empty are resampled up to 100 times.
pub fn dirichlet_partition(
    dataset: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    dirichlet_partition_with(dataset, n_clients, alpha, seed, false)
}

/// As [`dirichlet_partition`], with empty clients permitted when
/// `allow_empty_clients` is set.
pub fn dirichlet_partition_with(
    dataset: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
    allow_empty_clients: bool,
) -> Result<PartitionPlan> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n_clients == 0 {
        return Err(Error::InvalidArgument("n_clients must be >= 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be > 0".into()));
    }

    // Indices grouped by class, in order of appearance.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }

    if n_clients == 1 {
        return Ok(PartitionPlan {
            seed,
            alpha,
            assignments: vec![(0..dataset.len()).collect()],
        });
    }

    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet gamma: {e}")))?;

    'attempts: for attempt in 0..100u64 {
        let mut rng = seeded_rng(seed, "dirichlet-partition", attempt);
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for class_indices in by_class.iter().filter(|c| !c.is_empty()) {
            let mut indices = class_indices.clone();
            indices.shuffle(&mut rng);
            // Dirichlet(alpha,...,alpha) via normalized Gamma(alpha, 1) draws
            let mut shares: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = shares.iter().sum();
            if total <= 0.0 {
                continue 'attempts; // degenerate underflow draw
            }
            shares.iter_mut().for_each(|s| *s /= total);
            // cumulative cut points; the last cut is pinned to len
            let len = indices.len();
            let mut start = 0usize;
            let mut acc = 0.0f64;
            for (client, share) in shares.iter().enumerate() {
                acc += share;
                let end = if client + 1 == n_clients {
                    len
                } else {
                    ((acc * len as f64).floor() as usize).min(len)
                };
                assignments[client].extend_from_slice(&indices[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if allow_empty_clients || assignments.iter().all(|a| !a.is_empty()) {
            let plan = PartitionPlan {
                seed,
                alpha,
                assignments,
            };
            plan.validate(dataset.len())?;
            return Ok(plan);
        }
    }
    Err(Error::PartitionFailed(format!(
        "could not produce non-empty shards for {n_clients} clients after 100 draws \
         (alpha={alpha}); pass allow_empty_clients to accept empty shards"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    #[test]
    fn single_client_gets_everything() {
        let ds = synthetic_blobs(30, 3, 8, 0);
        let plan = dirichlet_partition(&ds, 1, 0.5, 9).unwrap();
        assert_eq!(plan.assignments.len(), 1);
        assert_eq!(plan.assignments[0], (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn identical_seeds_reproduce_identical_assignments() {
        let ds = synthetic_blobs(120, 4, 8, 1);
        let a = dirichlet_partition(&ds, 5, 0.7, 7).unwrap();
        let b = dirichlet_partition(&ds, 5, 0.7, 7).unwrap();
        assert_eq!(a.assignments, b.assignments);
        let c = dirichlet_partition(&ds, 5, 0.7, 8).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn disjoint_and_covering() {
        let ds = synthetic_blobs(200, 5, 8, 2);
        for seed in 0..10 {
            let plan = dirichlet_partition(&ds, 7, 0.3, seed).unwrap();
            plan.validate(ds.len()).unwrap();
            assert!(plan.assignments.iter().all(|a| !a.is_empty()));
        }
    }

    #[test]
    fn large_alpha_concentrates_at_uniform_shares() {
        // 2-class balanced set of 400; with alpha=1000 every client's class-1
        // share should sit near 0.5. Checked over 20 seeds.
        let ds = synthetic_blobs(400, 2, 8, 3);
        for seed in 0..20 {
            let plan = dirichlet_partition(&ds, 4, 1000.0, seed).unwrap();
            for client in &plan.assignments {
                let ones = client
                    .iter()
                    .filter(|&&i| ds.samples[i].label == 1)
                    .count() as f64;
                let share = ones / client.len() as f64;
                assert!(
                    (0.40..=0.60).contains(&share),
                    "seed {seed}: class-1 share {share} outside [0.40, 0.60]"
                );
            }
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = Dataset::new(Vec::new(), 2);
        assert!(matches!(
            dirichlet_partition(&ds, 2, 0.5, 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn json_round_trip_keeps_fields() {
        let ds = synthetic_blobs(40, 2, 8, 0);
        let plan = dirichlet_partition(&ds, 2, 0.7, 5).unwrap();
        let text = serde_json::to_string(&plan).unwrap();
        assert!(text.contains("\"seed\":5"));
        assert!(text.contains("\"alpha\":0.7"));
        let back: PartitionPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back.assignments, plan.assignments);
    }
}
