//! Target-centroid estimation and cosine instance weighting.
//!
//! Once per epoch the target embeddings are clustered with kernel K-means,
//! seeded from classifier-predicted class means so that cluster `k` keeps the
//! identity of class `k`. Both domains are then weighted by cosine similarity
//! to the target centroids: source samples against the centroid of their
//! label, target samples against the centroid of their cluster assignment.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::normalize_class_prob_rows;

/// Kernel used by K-means. `Cosine` runs the linear kernel on L2-normalized
/// embeddings (spherical K-means), matching the cosine instance weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Kernel {
    Linear,
    #[default]
    Cosine,
    Rbf {
        gamma: f64,
    },
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            Ok(Kernel::Linear)
        } else if s == "cosine" {
            Ok(Kernel::Cosine)
        } else if let Some(g) = s.strip_prefix("rbf:") {
            let gamma: f64 = g
                .parse()
                .map_err(|_| Error::Config(format!("invalid rbf gamma `{g}`")))?;
            if gamma <= 0.0 {
                return Err(Error::Config("rbf gamma must be positive".into()));
            }
            Ok(Kernel::Rbf { gamma })
        } else {
            Err(Error::Config(format!(
                "unknown kernel `{s}` (valid: linear, cosine, rbf:<gamma>)"
            )))
        }
    }
}

/// Result of one K-means run.
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    /// Input-space centroids, row `k` for cluster `k`. Under the cosine
    /// kernel these are means of the normalized embeddings; under the RBF
    /// kernel they are input-space means of the members (pre-image
    /// approximation) while distances are computed in feature space.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after the initial assignment and after each iteration;
    /// non-increasing.
    pub objective: Vec<f64>,
    /// Clusters that ended with no members (their centroid carries over).
    pub empty_clusters: Vec<usize>,
}

/// Lloyd iteration under the configured kernel, seeded with explicit
/// centroids. Cluster `k` keeps the identity of init centroid `k`; emptied
/// clusters keep the centroid they entered the update with. Converges when no
/// assignment changes; otherwise returns the best iterate with
/// `converged = false`.
pub fn kernel_kmeans(
    embeddings: &ArrayView2<f64>,
    init_centroids: &ArrayView2<f64>,
    kernel: Kernel,
    max_iter: usize,
) -> Result<KmeansOutcome> {
    let n = embeddings.nrows();
    let k = init_centroids.nrows();
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "kernel_kmeans needs a non-empty embedding matrix and at least one centroid".into(),
        ));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "kernel_kmeans needs at least as many samples ({n}) as clusters ({k})"
        )));
    }
    if embeddings.ncols() != init_centroids.ncols() {
        return Err(Error::ShapeMismatch {
            what: "init centroids",
            expected: embeddings.ncols(),
            got: init_centroids.ncols(),
        });
    }
    if !init_centroids.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("init centroids must be finite".into()));
    }

    match kernel {
        Kernel::Linear => lloyd_euclidean(embeddings, init_centroids, max_iter, false),
        Kernel::Cosine => {
            let normalized = normalize_rows(embeddings);
            let init = normalize_rows(init_centroids);
            lloyd_euclidean(&normalized.view(), &init.view(), max_iter, true)
        }
        Kernel::Rbf { gamma } => gram_kmeans(embeddings, init_centroids, gamma, max_iter),
    }
}

fn normalize_rows(m: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_NUDGE;
        row.mapv_inplace(|v| v / norm);
    }
    out
}

fn sq_dist(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

fn assign_to_nearest(points: &ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, f64) {
    let mut assignments = Vec::with_capacity(points.nrows());
    let mut objective = 0.0;
    for p in points.rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c_idx, c) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(&p, &c);
            if d < best_d {
                best_d = d;
                best = c_idx;
            }
        }
        assignments.push(best);
        objective += best_d;
    }
    (assignments, objective)
}

fn lloyd_euclidean(
    points: &ArrayView2<f64>,
    init_centroids: &ArrayView2<f64>,
    max_iter: usize,
    renormalize_means: bool,
) -> Result<KmeansOutcome> {
    let k = init_centroids.nrows();
    let d = points.ncols();
    let mut centroids = init_centroids.to_owned();
    let (mut assignments, obj0) = assign_to_nearest(points, &centroids);
    let mut objective = vec![obj0];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        // Centroid update: mean of members; empty clusters keep their centroid.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (p, &a) in points.rows().into_iter().zip(&assignments) {
            let mut row = sums.row_mut(a);
            row += &p;
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut mean = sums.row(c).to_owned() / counts[c] as f64;
                if renormalize_means {
                    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        mean.mapv_inplace(|v| v / norm);
                    }
                }
                centroids.row_mut(c).assign(&mean);
            }
        }
        let (new_assignments, obj) = assign_to_nearest(points, &centroids);
        objective.push(obj);
        let changed = new_assignments
            .iter()
            .zip(&assignments)
            .filter(|(a, b)| a != b)
            .count();
        assignments = new_assignments;
        if changed == 0 {
            converged = true;
            break;
        }
    }

    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    let empty_clusters = (0..k).filter(|&c| counts[c] == 0).collect();
    Ok(KmeansOutcome {
        centroids,
        assignments,
        converged,
        iterations,
        objective,
        empty_clusters,
    })
}

/// Kernel K-means over the Gram matrix: distances are computed in feature
/// space, while reported centroids are input-space member means.
fn gram_kmeans(
    points: &ArrayView2<f64>,
    init_centroids: &ArrayView2<f64>,
    gamma: f64,
    max_iter: usize,
) -> Result<KmeansOutcome> {
    let n = points.nrows();
    let k = init_centroids.nrows();
    let rbf = |a: &ArrayView1<f64>, b: &ArrayView1<f64>| (-gamma * sq_dist(a, b)).exp();

    let mut gram = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = rbf(&points.row(i), &points.row(j));
            gram[[i, j]] = v;
            gram[[j, i]] = v;
        }
    }

    // Initial assignment treats init centroids as feature-space points:
    // d^2 = k(x,x) - 2 k(x,c) + k(c,c).
    let mut assignments = Vec::with_capacity(n);
    let mut obj0 = 0.0;
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = 2.0 - 2.0 * rbf(&points.row(i), &init_centroids.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments.push(best);
        obj0 += best_d;
    }

    let mut objective = vec![obj0];
    let mut converged = false;
    let mut iterations = 0;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];

    for _ in 0..max_iter {
        iterations += 1;
        for m in &mut members {
            m.clear();
        }
        for (i, &a) in assignments.iter().enumerate() {
            members[a].push(i);
        }
        // Per-cluster constant term (1/|M|^2) sum_{a,b in M} K[a,b].
        let mut self_terms = vec![f64::NAN; k];
        for c in 0..k {
            if members[c].is_empty() {
                continue;
            }
            let m = &members[c];
            let mut s = 0.0;
            for &a in m {
                for &b in m {
                    s += gram[[a, b]];
                }
            }
            self_terms[c] = s / (m.len() * m.len()) as f64;
        }

        let mut obj = 0.0;
        let mut changed = 0;
        let mut new_assignments = assignments.clone();
        for i in 0..n {
            let mut best = assignments[i];
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = if members[c].is_empty() {
                    // Empty cluster: fall back to its init centroid pseudo-point.
                    2.0 - 2.0 * rbf(&points.row(i), &init_centroids.row(c))
                } else {
                    let cross: f64 = members[c].iter().map(|&j| gram[[i, j]]).sum();
                    gram[[i, i]] - 2.0 * cross / members[c].len() as f64 + self_terms[c]
                };
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best != assignments[i] {
                changed += 1;
            }
            new_assignments[i] = best;
            obj += best_d;
        }
        assignments = new_assignments;
        objective.push(obj);
        if changed == 0 {
            converged = true;
            break;
        }
    }

    // Input-space centroids: member means; empty clusters keep init centroid.
    let d = points.ncols();
    let mut centroids = init_centroids.to_owned();
    let mut counts = vec![0usize; k];
    let mut sums = Array2::<f64>::zeros((k, d));
    for (i, &a) in assignments.iter().enumerate() {
        let mut row = sums.row_mut(a);
        row += &points.row(i);
        counts[a] += 1;
    }
    let mut empty_clusters = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            centroids
                .row_mut(c)
                .assign(&(sums.row(c).to_owned() / counts[c] as f64));
        } else {
            empty_clusters.push(c);
        }
    }
    Ok(KmeansOutcome {
        centroids,
        assignments,
        converged,
        iterations,
        objective,
        empty_clusters,
    })
}

/// Class-identified centroid seeds: centroid `k` is the mean embedding of the
/// samples whose argmax class prediction is `k`. A class with no argmax
/// samples falls back to the mean weighted by its normalized class
/// probabilities; a class with zero probability mass is an error.
pub fn init_centroids_from_classifier(
    embeddings: &ArrayView2<f64>,
    probs: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = embeddings.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no embeddings to seed centroids from".into()));
    }
    if probs.nrows() != n {
        return Err(Error::ShapeMismatch {
            what: "classifier probabilities",
            expected: n,
            got: probs.nrows(),
        });
    }
    let class_count = probs.ncols() - 1;
    let d = embeddings.ncols();
    let class_probs = normalize_class_prob_rows(probs, class_count)?;

    let mut sums = Array2::<f64>::zeros((class_count, d));
    let mut counts = vec![0usize; class_count];
    for (i, row) in class_probs.rows().into_iter().enumerate() {
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(idx, _)| idx)
            .expect("non-empty row");
        let mut s = sums.row_mut(argmax);
        s += &embeddings.row(i);
        counts[argmax] += 1;
    }

    let mut centroids = Array2::<f64>::zeros((class_count, d));
    for c in 0..class_count {
        if counts[c] > 0 {
            centroids
                .row_mut(c)
                .assign(&(sums.row(c).to_owned() / counts[c] as f64));
        } else {
            let mass: f64 = class_probs.column(c).sum();
            if mass <= 0.0 {
                return Err(Error::DegenerateClass { class: c });
            }
            let mut weighted = Array1::<f64>::zeros(d);
            for (i, row) in embeddings.rows().into_iter().enumerate() {
                weighted.scaled_add(class_probs[[i, c]], &row);
            }
            centroids.row_mut(c).assign(&(weighted / mass));
        }
    }
    Ok(centroids)
}

/// Norms are nudged by this amount so near-zero embeddings cannot divide by
/// zero.
const NORM_NUDGE: f64 = 1e-12;

/// Cosine-similarity weight `0.5 (1 + cos(z, c))`, in `[0, 1]`. A zero-norm
/// argument yields the neutral weight 0.5.
pub fn cosine_weight(z: &ArrayView1<f64>, c: &ArrayView1<f64>) -> f64 {
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if zn == 0.0 || cn == 0.0 {
        log::warn!("cosine_weight: zero-norm argument, using neutral weight 0.5");
        return 0.5;
    }
    let dot: f64 = z.iter().zip(c.iter()).map(|(&a, &b)| a * b).sum();
    let cos = dot / ((zn + NORM_NUDGE) * (cn + NORM_NUDGE));
    (0.5 * (1.0 + cos)).clamp(0.0, 1.0)
}

/// Source instance weights: each sample against the target centroid of its
/// own class label.
pub fn compute_source_weights(
    embeddings: &ArrayView2<f64>,
    labels: &[usize],
    centroids: &ArrayView2<f64>,
) -> Result<Vec<f64>> {
    if labels.len() != embeddings.nrows() {
        return Err(Error::ShapeMismatch {
            what: "source labels",
            expected: embeddings.nrows(),
            got: labels.len(),
        });
    }
    let k = centroids.nrows();
    labels
        .iter()
        .zip(embeddings.rows())
        .map(|(&y, z)| {
            if y >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            Ok(cosine_weight(&z, &centroids.row(y)))
        })
        .collect()
}

/// Target instance weights: each sample against the centroid of its K-means
/// assignment.
pub fn compute_target_weights(
    embeddings: &ArrayView2<f64>,
    assignments: &[usize],
    centroids: &ArrayView2<f64>,
) -> Result<Vec<f64>> {
    compute_source_weights(embeddings, assignments, centroids)
}

/// Per-epoch cluster snapshot: centroids, target assignments and both weight
/// vectors. Rebuilt once per epoch, read-only afterwards.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub source_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
    pub empty_clusters: Vec<usize>,
    pub kmeans_iterations: usize,
    pub kmeans_converged: bool,
}

impl ClusterState {
    /// Builds the full per-epoch state: classifier-seeded kernel K-means over
    /// the target embeddings, then cosine weights for both domains.
    pub fn build(
        source_embeddings: &ArrayView2<f64>,
        source_labels: &[usize],
        target_embeddings: &ArrayView2<f64>,
        target_probs: &ArrayView2<f64>,
        kernel: Kernel,
        max_iter: usize,
    ) -> Result<Self> {
        let init = init_centroids_from_classifier(target_embeddings, target_probs)?;
        let outcome = kernel_kmeans(target_embeddings, &init.view(), kernel, max_iter)?;
        if !outcome.converged {
            log::warn!(
                "kernel K-means did not converge in {} iterations",
                outcome.iterations
            );
        }
        let source_weights =
            compute_source_weights(source_embeddings, source_labels, &outcome.centroids.view())?;
        let target_weights = compute_target_weights(
            target_embeddings,
            &outcome.assignments,
            &outcome.centroids.view(),
        )?;
        Ok(Self {
            centroids: outcome.centroids,
            assignments: outcome.assignments,
            source_weights,
            target_weights,
            empty_clusters: outcome.empty_clusters,
            kmeans_iterations: outcome.iterations,
            kmeans_converged: outcome.converged,
        })
    }

    pub fn class_count(&self) -> usize {
        self.centroids.nrows()
    }

    /// Writes `centroids_e{epoch}.csv` and `weights_e{epoch}.csv` into `dir`.
    pub fn write_csv(&self, dir: &std::path::Path, epoch: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut centroids = String::from("cluster");
        for j in 0..self.centroids.ncols() {
            centroids.push_str(&format!(",c{j}"));
        }
        centroids.push('\n');
        for (k, row) in self.centroids.rows().into_iter().enumerate() {
            centroids.push_str(&k.to_string());
            for v in row {
                centroids.push_str(&format!(",{v}"));
            }
            centroids.push('\n');
        }
        std::fs::write(dir.join(format!("centroids_e{epoch:04}.csv")), centroids)?;

        let mut weights = String::from("domain,index,cluster_or_label,weight\n");
        for (i, w) in self.source_weights.iter().enumerate() {
            weights.push_str(&format!("source,{i},,{w}\n"));
        }
        for (i, (&a, w)) in self
            .assignments
            .iter()
            .zip(&self.target_weights)
            .enumerate()
        {
            weights.push_str(&format!("target,{i},{a},{w}\n"));
        }
        std::fs::write(dir.join(format!("weights_e{epoch:04}.csv")), weights)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn linear_kmeans_recovers_cloud_means() {
        // Two well-separated 2-D clouds, 10 points each, init at cloud means.
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push([i as f64 * 0.1, 0.3 - i as f64 * 0.05]);
        }
        for i in 0..10 {
            pts.push([10.0 + i as f64 * 0.1, 5.0 + i as f64 * 0.07]);
        }
        let data = Array2::from_shape_fn((20, 2), |(i, j)| pts[i][j]);
        let mean = |range: std::ops::Range<usize>, j: usize| -> f64 {
            range.clone().map(|i| pts[i][j]).sum::<f64>() / range.len() as f64
        };
        let init = array![
            [mean(0..10, 0), mean(0..10, 1)],
            [mean(10..20, 0), mean(10..20, 1)]
        ];
        let out = kernel_kmeans(&data.view(), &init.view(), Kernel::Linear, 100).unwrap();
        assert!(out.converged);
        for j in 0..2 {
            assert_abs_diff_eq!(out.centroids[[0, j]], init[[0, j]], epsilon = 1e-6);
            assert_abs_diff_eq!(out.centroids[[1, j]], init[[1, j]], epsilon = 1e-6);
        }
        assert_eq!(&out.assignments[..10], &[0; 10]);
        assert_eq!(&out.assignments[10..], &[1; 10]);
    }

    #[test]
    fn k_singleton_clusters_keep_their_points() {
        let data = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let out = kernel_kmeans(&data.view(), &data.view(), Kernel::Linear, 100).unwrap();
        assert!(out.converged);
        assert_eq!(out.assignments, vec![0, 1, 2]);
        assert_eq!(out.centroids, data);
    }

    #[test]
    fn converged_input_rerun_is_a_fixed_point() {
        let data = array![[0.0, 0.0], [0.2, 0.0], [5.0, 5.0], [5.2, 5.0]];
        let init = array![[0.1, 0.0], [5.1, 5.0]];
        let first = kernel_kmeans(&data.view(), &init.view(), Kernel::Linear, 100).unwrap();
        assert!(first.converged);
        let second = kernel_kmeans(
            &data.view(),
            &first.centroids.view(),
            Kernel::Linear,
            100,
        )
        .unwrap();
        assert!(second.converged);
        assert_eq!(second.iterations, 1);
        assert_eq!(second.assignments, first.assignments);
    }

    #[test]
    fn kmeans_rejects_bad_inputs() {
        let data = array![[0.0, 0.0]];
        let init = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(kernel_kmeans(&data.view(), &init.view(), Kernel::Linear, 10).is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(kernel_kmeans(&empty.view(), &init.view(), Kernel::Linear, 10).is_err());
    }

    #[test]
    fn init_centroids_one_hot_gives_class_means() {
        let z = array![[0.0, 0.0], [2.0, 0.0], [10.0, 10.0], [12.0, 10.0]];
        let probs = array![
            [0.9, 0.05, 0.05],
            [0.8, 0.1, 0.1],
            [0.1, 0.8, 0.1],
            [0.05, 0.9, 0.05]
        ];
        let c = init_centroids_from_classifier(&z.view(), &probs.view()).unwrap();
        assert_abs_diff_eq!(c[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[[0, 1]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[[1, 0]], 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[[1, 1]], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn init_centroids_uniform_fallback_is_global_mean() {
        // Both samples argmax to class 0 (ties resolve to the first max), so
        // class 1 falls back to the probability-weighted mean = global mean.
        let z = array![[1.0, 3.0], [3.0, 1.0]];
        let probs = array![[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]];
        let c = init_centroids_from_classifier(&z.view(), &probs.view()).unwrap();
        assert_abs_diff_eq!(c[[1, 0]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[[1, 1]], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn init_centroids_match_scalar_weighted_mean() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [4.0, 0.0]];
        let probs = array![
            [0.6, 0.3, 0.1],
            [0.2, 0.7, 0.1],
            [0.5, 0.4, 0.1],
            [0.3, 0.6, 0.1]
        ];
        let c = init_centroids_from_classifier(&z.view(), &probs.view()).unwrap();

        // Scalar-loop oracle over argmax groups.
        let k = 2;
        let p = normalize_class_prob_rows(&probs.view(), k).unwrap();
        let mut argmax = vec![0usize; 4];
        for i in 0..4 {
            argmax[i] = if p[[i, 0]] >= p[[i, 1]] { 0 } else { 1 };
        }
        for cls in 0..k {
            let members: Vec<usize> = (0..4).filter(|&i| argmax[i] == cls).collect();
            for j in 0..2 {
                let expect: f64 =
                    members.iter().map(|&i| z[[i, j]]).sum::<f64>() / members.len() as f64;
                assert_abs_diff_eq!(c[[cls, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn init_centroids_zero_mass_class_errors() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let probs = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let err = init_centroids_from_classifier(&z.view(), &probs.view()).unwrap_err();
        assert!(matches!(err, Error::DegenerateClass { class: 1 }));
    }

    #[test]
    fn cosine_weight_cases() {
        let w = cosine_weight(&array![1.0, 0.0].view(), &array![1.0, 0.0].view());
        assert_abs_diff_eq!(w, 1.0, epsilon = 1e-9);
        let w = cosine_weight(&array![0.0, 1.0].view(), &array![1.0, 0.0].view());
        assert_abs_diff_eq!(w, 0.5, epsilon = 1e-9);
        let w = cosine_weight(&array![-1.0, 0.0].view(), &array![1.0, 0.0].view());
        assert_abs_diff_eq!(w, 0.0, epsilon = 1e-9);
        let w = cosine_weight(&array![0.0, 0.0].view(), &array![1.0, 0.0].view());
        assert_abs_diff_eq!(w, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn source_weights_match_scalar_recomputation() {
        let z = array![
            [0.3, -0.4],
            [1.5, 2.0],
            [-0.7, 0.1],
            [0.0, -2.0],
            [0.9, 0.9]
        ];
        let labels = vec![0, 1, 0, 1, 0];
        let c = array![[1.0, 1.0], [-1.0, 0.5]];
        let w = compute_source_weights(&z.view(), &labels, &c.view()).unwrap();
        for i in 0..5 {
            let zi = z.row(i);
            let ci = c.row(labels[i]);
            let dot: f64 = zi.iter().zip(ci.iter()).map(|(a, b)| a * b).sum();
            let zn = zi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cn = ci.iter().map(|v| v * v).sum::<f64>().sqrt();
            let expect = 0.5 * (1.0 + dot / ((zn + 1e-12) * (cn + 1e-12)));
            assert_abs_diff_eq!(w[i], expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn weight_extremes_at_centroid_and_antipode() {
        let c = array![[0.6, 0.8]];
        let w = compute_source_weights(&array![[0.6, 0.8]].view(), &[0], &c.view()).unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-9);
        let w = compute_source_weights(&array![[-0.6, -0.8]].view(), &[0], &c.view()).unwrap();
        assert_abs_diff_eq!(w[0], 0.0, epsilon = 1e-9);
        let w = compute_target_weights(&array![[-0.8, 0.6]].view(), &[0], &c.view()).unwrap();
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let z = array![[1.0, 0.0]];
        let c = array![[1.0, 0.0]];
        let err = compute_source_weights(&z.view(), &[3], &c.view()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn classifier_seeded_kmeans_converges_in_one_iteration_on_separated_blobs() {
        // Correctly classified blobs, separated in angle (the default kernel
        // is spherical): the seeded run must not move any label.
        let z = array![
            [5.0, 0.4],
            [4.8, -0.2],
            [5.2, 0.1],
            [-4.0, 4.1],
            [-3.9, 3.8],
            [-4.2, 4.0]
        ];
        let probs = array![
            [0.97, 0.02, 0.01],
            [0.96, 0.03, 0.01],
            [0.98, 0.01, 0.01],
            [0.02, 0.97, 0.01],
            [0.03, 0.96, 0.01],
            [0.01, 0.98, 0.01]
        ];
        let init = init_centroids_from_classifier(&z.view(), &probs.view()).unwrap();
        let out = kernel_kmeans(&z.view(), &init.view(), Kernel::Cosine, 100).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.assignments, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn rbf_kmeans_objective_non_increasing() {
        let z = array![
            [0.0, 0.0],
            [0.3, 0.1],
            [0.1, 0.2],
            [4.0, 4.0],
            [4.2, 3.9],
            [3.9, 4.1],
            [2.0, 2.0]
        ];
        let init = array![[0.5, 0.5], [3.5, 3.5]];
        let out =
            kernel_kmeans(&z.view(), &init.view(), Kernel::Rbf { gamma: 0.5 }, 50).unwrap();
        for w in out.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective increased: {:?}", out.objective);
        }
        assert!(out.converged);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cosine_weight_in_unit_interval_and_scale_invariant(
            zx in -5.0f64..5.0, zy in -5.0f64..5.0,
            cx in -5.0f64..5.0, cy in -5.0f64..5.0,
            alpha in 0.01f64..100.0, beta in 0.01f64..100.0,
        ) {
            let z = array![zx, zy];
            let c = array![cx, cy];
            let w = cosine_weight(&z.view(), &c.view());
            prop_assert!((0.0..=1.0).contains(&w));
            let zs = z.mapv(|v| v * alpha);
            let cs = c.mapv(|v| v * beta);
            let ws = cosine_weight(&zs.view(), &cs.view());
            prop_assert!((w - ws).abs() < 1e-9);
        }

        #[test]
        fn kmeans_objective_never_increases(
            seed in 0u64..500,
            n in 6usize..24,
            k in 2usize..4,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((n, 3), |_| rng.random_range(-3.0..3.0));
            let init = Array2::from_shape_fn((k, 3), |_| rng.random_range(-3.0..3.0));
            for kernel in [Kernel::Linear, Kernel::Cosine] {
                let out = kernel_kmeans(&data.view(), &init.view(), kernel, 100).unwrap();
                for w in out.objective.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
                }
            }
        }
    }
}
