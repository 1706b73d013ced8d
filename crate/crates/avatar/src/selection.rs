//! Per-cluster weight statistics and positive/negative sample selection.
//!
//! Each cluster gets a confidence threshold: the mean of its members'
//! instance weights minus their population standard deviation. A target
//! sample is a positive transfer sample when its weight is at or above the
//! threshold of its assigned cluster (boundary inclusive), negative below.
//! During warm-up every threshold is zero, so every sample is positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arithmetic mean of the weights assigned to `cluster`; `None` when the
/// cluster is empty (caller keeps the previous threshold).
pub fn cluster_weight_mean(
    weights: &[f64],
    assignments: &[usize],
    cluster: usize,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&w, &a) in weights.iter().zip(assignments) {
        if a == cluster {
            sum += w;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Mean minus population standard deviation of the cluster's weights; `None`
/// when the cluster is empty. The variance is evaluated as the mean squared
/// deviation from the mean (algebraically `E[w^2] - mean^2`, but stable for
/// near-constant clusters); a radicand pushed negative by floating error is
/// clamped at zero.
pub fn cluster_threshold(
    weights: &[f64],
    assignments: &[usize],
    cluster: usize,
) -> Option<f64> {
    let mean = cluster_weight_mean(weights, assignments, cluster)?;
    let mut dev_sq_sum = 0.0;
    let mut count = 0usize;
    for (&w, &a) in weights.iter().zip(assignments) {
        if a == cluster {
            dev_sq_sum += (w - mean) * (w - mean);
            count += 1;
        }
    }
    let variance = (dev_sq_sum / count as f64).max(0.0);
    Some(mean - variance.sqrt())
}

/// Positive mask under the inclusive boundary rule: sample `i` is positive
/// iff `weights[i] >= thresholds[assignments[i]]`.
pub fn partition_targets(
    weights: &[f64],
    assignments: &[usize],
    thresholds: &[f64],
) -> Result<Vec<bool>> {
    if weights.len() != assignments.len() {
        return Err(Error::ShapeMismatch {
            what: "target assignments",
            expected: weights.len(),
            got: assignments.len(),
        });
    }
    weights
        .iter()
        .zip(assignments)
        .map(|(&w, &a)| {
            let tau = *thresholds.get(a).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "assignment {a} out of range for {} thresholds",
                    thresholds.len()
                ))
            })?;
            Ok(w >= tau)
        })
        .collect()
}

/// Per-epoch selection snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionState {
    /// Within-cluster weight means; empty clusters carry the previous value.
    pub cluster_means: Vec<f64>,
    /// Confidence thresholds; empty clusters carry the previous value
    /// (warm-up value 0 if never set).
    pub thresholds: Vec<f64>,
    pub positive_mask: Vec<bool>,
}

impl SelectionState {
    /// Warm-up state: all thresholds zero, every sample positive.
    pub fn warmup(class_count: usize, target_count: usize) -> Self {
        Self {
            cluster_means: vec![1.0; class_count],
            thresholds: vec![0.0; class_count],
            positive_mask: vec![true; target_count],
        }
    }

    /// Recomputes means and thresholds from this epoch's weights; clusters
    /// with no members keep the values from `previous`.
    pub fn update(
        weights: &[f64],
        assignments: &[usize],
        previous: &SelectionState,
    ) -> Result<Self> {
        let class_count = previous.thresholds.len();
        let mut cluster_means = previous.cluster_means.clone();
        let mut thresholds = previous.thresholds.clone();
        for k in 0..class_count {
            if let Some(mean) = cluster_weight_mean(weights, assignments, k) {
                cluster_means[k] = mean;
                thresholds[k] =
                    cluster_threshold(weights, assignments, k).expect("cluster non-empty");
            }
        }
        let positive_mask = partition_targets(weights, assignments, &thresholds)?;
        Ok(Self {
            cluster_means,
            thresholds,
            positive_mask,
        })
    }

    pub fn positive_count(&self) -> usize {
        self.positive_mask.iter().filter(|&&p| p).count()
    }

    pub fn negative_count(&self) -> usize {
        self.positive_mask.len() - self.positive_count()
    }

    pub fn mean_threshold(&self) -> f64 {
        if self.thresholds.is_empty() {
            return 0.0;
        }
        self.thresholds.iter().sum::<f64>() / self.thresholds.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn mean_and_threshold_of_two_member_cluster() {
        let w = [0.8, 1.0];
        let a = [0, 0];
        assert_abs_diff_eq!(cluster_weight_mean(&w, &a, 0).unwrap(), 0.9, epsilon = 1e-12);
        // mean 0.9, population std 0.1 -> threshold 0.8
        assert_abs_diff_eq!(cluster_threshold(&w, &a, 0).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn singleton_and_constant_clusters_have_zero_deviation() {
        assert_abs_diff_eq!(
            cluster_weight_mean(&[0.7], &[0], 0).unwrap(),
            0.7,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(cluster_threshold(&[0.7], &[0], 0).unwrap(), 0.7, epsilon = 1e-12);

        let w = [0.6, 0.6, 0.6];
        let a = [0, 0, 0];
        assert_abs_diff_eq!(cluster_weight_mean(&w, &a, 0).unwrap(), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(cluster_threshold(&w, &a, 0).unwrap(), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn empty_cluster_yields_none() {
        assert!(cluster_weight_mean(&[0.5], &[0], 1).is_none());
        assert!(cluster_threshold(&[0.5], &[0], 1).is_none());
    }

    #[test]
    fn zero_thresholds_mark_everything_positive() {
        let w = [0.0, 0.3, 1.0];
        let a = [0, 1, 0];
        let mask = partition_targets(&w, &a, &[0.0, 0.0]).unwrap();
        assert_eq!(mask, vec![true, true, true]);
    }

    #[test]
    fn boundary_weight_counts_as_positive() {
        let w = [0.8, 1.0];
        let a = [0, 0];
        let tau = cluster_threshold(&w, &a, 0).unwrap();
        let mask = partition_targets(&w, &a, &[tau]).unwrap();
        assert_eq!(mask, vec![true, true]);
    }

    #[test]
    fn partition_matches_scalar_oracle() {
        let w = [0.5, 0.9, 1.0];
        let a = [0, 0, 0];
        let mean: f64 = (0.5 + 0.9 + 1.0) / 3.0;
        let var: f64 = (0.25 + 0.81 + 1.0) / 3.0 - mean * mean;
        let tau = mean - var.sqrt();
        let mask = partition_targets(&w, &a, &[tau]).unwrap();
        let expect: Vec<bool> = w.iter().map(|&wi| wi >= tau).collect();
        assert_eq!(mask, expect);
        // The low-weight member is negative on this fixture.
        assert_eq!(mask, vec![false, true, true]);
    }

    #[test]
    fn update_carries_thresholds_for_empty_clusters() {
        let prev = SelectionState {
            cluster_means: vec![0.9, 0.4],
            thresholds: vec![0.85, 0.3],
            positive_mask: vec![],
        };
        // Cluster 1 has no members this epoch.
        let next = SelectionState::update(&[0.8, 1.0], &[0, 0], &prev).unwrap();
        assert_abs_diff_eq!(next.thresholds[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(next.thresholds[1], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(next.cluster_means[1], 0.4, epsilon = 1e-12);
        assert_eq!(next.positive_mask, vec![true, true]);
    }

    #[test]
    fn warmup_state_is_all_positive() {
        let s = SelectionState::warmup(3, 5);
        assert_eq!(s.thresholds, vec![0.0; 3]);
        assert_eq!(s.positive_count(), 5);
        assert_eq!(s.negative_count(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn threshold_never_exceeds_mean_and_max_member_is_positive(
            ws in proptest::collection::vec(0.0f64..=1.0, 2..20),
        ) {
            let a = vec![0usize; ws.len()];
            let mean = cluster_weight_mean(&ws, &a, 0).unwrap();
            let tau = cluster_threshold(&ws, &a, 0).unwrap();
            prop_assert!(tau <= mean + 1e-12);
            // The maximum weight is always at or above tau.
            let max = ws.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(max >= tau);
            let mask = partition_targets(&ws, &a, &[tau]).unwrap();
            prop_assert!(mask.iter().any(|&m| m));
        }

        #[test]
        fn selection_invariant_under_sample_permutation(
            ws in proptest::collection::vec(0.0f64..=1.0, 4..16),
            seed in 0u64..100,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = ws.len();
            let assignments: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let t0 = cluster_threshold(&ws, &assignments, 0);
            let t1 = cluster_threshold(&ws, &assignments, 1);

            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            let ws_p: Vec<f64> = order.iter().map(|&i| ws[i]).collect();
            let as_p: Vec<usize> = order.iter().map(|&i| assignments[i]).collect();
            let t0_p = cluster_threshold(&ws_p, &as_p, 0);
            let t1_p = cluster_threshold(&ws_p, &as_p, 1);
            match (t0, t0_p) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
            }
            match (t1, t1_p) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
            }
        }

        #[test]
        fn constant_weight_cluster_is_all_positive(
            w in 0.0f64..=1.0,
            n in 1usize..12,
        ) {
            let ws = vec![w; n];
            let a = vec![0usize; n];
            let tau = cluster_threshold(&ws, &a, 0).unwrap();
            prop_assert!((tau - w).abs() < 1e-12);
            let mask = partition_targets(&ws, &a, &[tau]).unwrap();
            prop_assert!(mask.iter().all(|&m| m));
        }
    }
}
