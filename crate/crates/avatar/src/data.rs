//! Two-domain datasets: synthetic generators with controllable shift, an
//! imbalance protocol, and directory ingestion via a CSV manifest.
//!
//! Target labels are carried for evaluation only; the trainer never reads
//! them during optimization.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Declarative description of a dataset; materializes into a [`DomainPair`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    TwoMoons {
        n_per_domain: usize,
        rotation_degrees: f64,
        noise: f64,
        seed: u64,
    },
    GaussianBlobs {
        classes: usize,
        n_per_domain: usize,
        shift: Vec<f64>,
        covariance_scale: f64,
        seed: u64,
    },
    Directory {
        manifest: PathBuf,
    },
    Imbalanced {
        base: Box<DatasetSpec>,
        majority_class: usize,
        minority_fraction: f64,
        source_downsample_rate: f64,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn materialize(&self) -> Result<DomainPair> {
        match self {
            DatasetSpec::TwoMoons {
                n_per_domain,
                rotation_degrees,
                noise,
                seed,
            } => make_two_moons_shift(*n_per_domain, *rotation_degrees, *noise, *seed),
            DatasetSpec::GaussianBlobs {
                classes,
                n_per_domain,
                shift,
                covariance_scale,
                seed,
            } => make_gaussian_shift(*classes, *n_per_domain, shift, *covariance_scale, *seed),
            DatasetSpec::Directory { manifest } => load_directory_dataset(manifest),
            DatasetSpec::Imbalanced {
                base,
                majority_class,
                minority_fraction,
                source_downsample_rate,
                seed,
            } => {
                let pair = base.materialize()?;
                make_imbalanced(
                    &pair,
                    &ImbalanceSpec {
                        majority_class: *majority_class,
                        minority_fraction: *minority_fraction,
                        source_downsample_rate: *source_downsample_rate,
                    },
                    *seed,
                )
            }
        }
    }
}

/// Labeled source domain plus unlabeled target domain sharing one class
/// vocabulary.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source_inputs: Array2<f64>,
    pub source_labels: Vec<usize>,
    pub target_inputs: Array2<f64>,
    /// Hidden labels, used by evaluation only. `None` entries are samples the
    /// manifest left unlabeled.
    pub target_labels: Vec<Option<usize>>,
    pub class_names: Vec<String>,
    pub spec: DatasetSpec,
}

impl DomainPair {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.source_inputs.ncols()
    }

    pub fn source_count(&self) -> usize {
        self.source_inputs.nrows()
    }

    pub fn target_count(&self) -> usize {
        self.target_inputs.nrows()
    }

    fn validate(&self) -> Result<()> {
        if self.source_labels.len() != self.source_count() {
            return Err(Error::Dataset("source label count mismatch".into()));
        }
        if self.target_labels.len() != self.target_count() {
            return Err(Error::Dataset("target label count mismatch".into()));
        }
        if self.source_inputs.ncols() != self.target_inputs.ncols() {
            return Err(Error::Dataset(format!(
                "feature width differs between domains: {} vs {}",
                self.source_inputs.ncols(),
                self.target_inputs.ncols()
            )));
        }
        let k = self.class_count();
        if let Some(&bad) = self.source_labels.iter().find(|&&y| y >= k) {
            return Err(Error::Dataset(format!("source label {bad} out of range")));
        }
        if let Some(bad) = self.target_labels.iter().flatten().find(|&&y| y >= k) {
            return Err(Error::Dataset(format!("target label {bad} out of range")));
        }
        Ok(())
    }

    /// Per-class sample counts in the target domain (labeled samples only).
    pub fn target_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count()];
        for y in self.target_labels.iter().flatten() {
            counts[*y] += 1;
        }
        counts
    }
}

fn standard_class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| c.to_string()).collect()
}

/// Source is a standard two-moons draw; the target is a fresh draw from the
/// same generator rotated about the origin by `rotation_degrees`.
pub fn make_two_moons_shift(
    n_per_domain: usize,
    rotation_degrees: f64,
    noise: f64,
    seed: u64,
) -> Result<DomainPair> {
    if n_per_domain < 4 {
        return Err(Error::InvalidArgument(
            "two-moons needs at least 2 samples per class and domain".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (source_inputs, source_labels) = moons_draw(n_per_domain, noise, &mut rng)?;
    let (mut target_inputs, target_labels) = moons_draw(n_per_domain, noise, &mut rng)?;

    let theta = rotation_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    for mut row in target_inputs.rows_mut() {
        let (x, y) = (row[0], row[1]);
        row[0] = cos * x - sin * y;
        row[1] = sin * x + cos * y;
    }

    let pair = DomainPair {
        source_inputs,
        source_labels,
        target_inputs,
        target_labels: target_labels.into_iter().map(Some).collect(),
        class_names: standard_class_names(2),
        spec: DatasetSpec::TwoMoons {
            n_per_domain,
            rotation_degrees,
            noise,
            seed,
        },
    };
    pair.validate()?;
    Ok(pair)
}

fn moons_draw(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Vec<usize>)> {
    let n0 = n.div_ceil(2);
    let gauss = Normal::new(0.0, noise.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("invalid noise: {e}")))?;
    let mut inputs = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y, label) = if i < n0 {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        inputs[[i, 0]] = x + gauss.sample(rng);
        inputs[[i, 1]] = y + gauss.sample(rng);
        labels.push(label);
    }
    Ok((inputs, labels))
}

/// `classes` Gaussian blobs per domain on a circle; target means are
/// translated by `shift`. Blob standard deviation is `covariance_scale`.
pub fn make_gaussian_shift(
    classes: usize,
    n_per_domain: usize,
    shift: &[f64],
    covariance_scale: f64,
    seed: u64,
) -> Result<DomainPair> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if shift.len() != 2 {
        return Err(Error::InvalidArgument(
            "shift vector must have 2 components (features are 2-D)".into(),
        ));
    }
    if n_per_domain < classes {
        return Err(Error::InvalidArgument(
            "need at least one sample per class per domain".into(),
        ));
    }
    // Class means sit on a circle sized so that neighbors are ~5 units apart.
    let radius = 5.0 * classes as f64 / (2.0 * std::f64::consts::PI);
    let means: Vec<[f64; 2]> = (0..classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, covariance_scale.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("invalid covariance scale: {e}")))?;

    let mut draw = |offset: &[f64]| -> (Array2<f64>, Vec<usize>) {
        let mut inputs = Array2::zeros((n_per_domain, 2));
        let mut labels = Vec::with_capacity(n_per_domain);
        let per_class = n_per_domain / classes;
        let remainder = n_per_domain % classes;
        let mut i = 0;
        for (c, mean) in means.iter().enumerate() {
            let count = per_class + usize::from(c < remainder);
            for _ in 0..count {
                inputs[[i, 0]] = mean[0] + offset[0] + gauss.sample(&mut rng);
                inputs[[i, 1]] = mean[1] + offset[1] + gauss.sample(&mut rng);
                labels.push(c);
                i += 1;
            }
        }
        (inputs, labels)
    };

    let (source_inputs, source_labels) = draw(&[0.0, 0.0]);
    let (target_inputs, target_labels) = draw(shift);

    let pair = DomainPair {
        source_inputs,
        source_labels,
        target_inputs,
        target_labels: target_labels.into_iter().map(Some).collect(),
        class_names: standard_class_names(classes),
        spec: DatasetSpec::GaussianBlobs {
            classes,
            n_per_domain,
            shift: shift.to_vec(),
            covariance_scale,
            seed,
        },
    };
    pair.validate()?;
    Ok(pair)
}

/// Imbalance protocol parameters: minority classes in the target are reduced
/// relative to the majority class, and the source is globally downsampled.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub majority_class: usize,
    /// Each minority class keeps `round(fraction * majority_count)` target
    /// samples, minimum 1.
    pub minority_fraction: f64,
    /// Fraction of source samples removed (0.9 keeps 10%).
    pub source_downsample_rate: f64,
}

/// The standard minority-fraction sweep: 1% to 10% in steps of 1%.
pub fn minority_fractions() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 100.0).collect()
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Builds an imbalanced copy: target minority classes are downsampled to
/// `round(fraction * majority_count)` (min 1) and the source is globally
/// downsampled by `source_downsample_rate`. The target majority class and
/// all feature values are untouched.
pub fn make_imbalanced(pair: &DomainPair, spec: &ImbalanceSpec, seed: u64) -> Result<DomainPair> {
    let k = pair.class_count();
    if spec.majority_class >= k {
        return Err(Error::InvalidArgument(format!(
            "majority class {} out of range for {k} classes",
            spec.majority_class
        )));
    }
    if !(0.0..=1.0).contains(&spec.source_downsample_rate) {
        return Err(Error::InvalidArgument(
            "source downsample rate must be in [0, 1]".into(),
        ));
    }
    let target_counts = pair.target_class_counts();
    let majority_count = target_counts[spec.majority_class];
    if majority_count == 0 {
        return Err(Error::InvalidArgument(format!(
            "majority class {} has no labeled target samples",
            spec.majority_class
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Target: keep all majority samples, subsample each minority class.
    let mut keep_target: Vec<usize> = Vec::new();
    for c in 0..k {
        let members: Vec<usize> = (0..pair.target_count())
            .filter(|&i| pair.target_labels[i] == Some(c))
            .collect();
        if c == spec.majority_class {
            keep_target.extend(&members);
            continue;
        }
        if members.is_empty() {
            continue;
        }
        let quota = round_half_up(spec.minority_fraction * majority_count as f64).max(1);
        let mut chosen = members;
        if quota < chosen.len() {
            chosen.shuffle(&mut rng);
            chosen.truncate(quota);
        }
        keep_target.extend(chosen);
    }
    keep_target.sort_unstable();

    // Source: global downsample keeping round((1 - rate) * N) samples.
    let keep_count = round_half_up((1.0 - spec.source_downsample_rate) * pair.source_count() as f64);
    let mut all: Vec<usize> = (0..pair.source_count()).collect();
    all.shuffle(&mut rng);
    let mut keep_source = all[..keep_count.min(all.len())].to_vec();
    keep_source.sort_unstable();

    let mut source_class_present = vec![false; k];
    for &i in &keep_source {
        source_class_present[pair.source_labels[i]] = true;
    }
    if let Some(missing) = source_class_present.iter().position(|&p| !p) {
        return Err(Error::ClassEmptied {
            class: missing,
            domain: "source",
        });
    }

    let select = |inputs: &Array2<f64>, rows: &[usize]| -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), inputs.ncols()));
        for (dst, &src) in rows.iter().enumerate() {
            out.row_mut(dst).assign(&inputs.row(src));
        }
        out
    };

    let pair_out = DomainPair {
        source_inputs: select(&pair.source_inputs, &keep_source),
        source_labels: keep_source.iter().map(|&i| pair.source_labels[i]).collect(),
        target_inputs: select(&pair.target_inputs, &keep_target),
        target_labels: keep_target.iter().map(|&i| pair.target_labels[i]).collect(),
        class_names: pair.class_names.clone(),
        spec: DatasetSpec::Imbalanced {
            base: Box::new(pair.spec.clone()),
            majority_class: spec.majority_class,
            minority_fraction: spec.minority_fraction,
            source_downsample_rate: spec.source_downsample_rate,
            seed,
        },
    };
    pair_out.validate()?;
    Ok(pair_out)
}

/// Loads a dataset from a CSV manifest with header `path,domain,label`.
/// Paths are relative to the manifest's directory; each feature file holds
/// one sample as whitespace- or comma-separated numbers. Labels may be empty
/// only on target rows; target labels must exist in the source vocabulary.
pub fn load_directory_dataset(manifest: &Path) -> Result<DomainPair> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::Dataset(format!("cannot read manifest {}: {e}", manifest.display())))?;

    let headers = reader.headers()?.clone();
    let expected = ["path", "domain", "label"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Dataset(format!(
            "manifest header must be `path,domain,label`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    struct Row {
        features: Vec<f64>,
        domain_is_source: bool,
        label: Option<String>,
    }

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let rel = record.get(0).unwrap_or("");
        let domain = record.get(1).unwrap_or("");
        let label = record.get(2).unwrap_or("");
        let domain_is_source = match domain {
            "source" => true,
            "target" => false,
            other => {
                return Err(Error::Dataset(format!(
                    "row {}: unknown domain `{other}` (expected source or target)",
                    line + 2
                )))
            }
        };
        if domain_is_source && label.is_empty() {
            return Err(Error::Dataset(format!(
                "row {}: source sample `{rel}` has no label",
                line + 2
            )));
        }
        let file = base.join(rel);
        let text = std::fs::read_to_string(&file)
            .map_err(|e| Error::Dataset(format!("cannot read `{}`: {e}", file.display())))?;
        let features: Vec<f64> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Dataset(format!("`{}`: bad number `{t}`: {e}", file.display())))
            })
            .collect::<Result<_>>()?;
        if features.is_empty() {
            return Err(Error::Dataset(format!("`{}` holds no values", file.display())));
        }
        rows.push(Row {
            features,
            domain_is_source,
            label: (!label.is_empty()).then(|| label.to_string()),
        });
    }
    if rows.is_empty() {
        return Err(Error::Dataset("manifest lists no samples".into()));
    }

    let width = rows[0].features.len();
    if let Some(bad) = rows.iter().find(|r| r.features.len() != width) {
        return Err(Error::Dataset(format!(
            "inconsistent feature width: expected {width}, found {}",
            bad.features.len()
        )));
    }

    // Class vocabulary: distinct source labels, sorted.
    let mut class_names: Vec<String> = rows
        .iter()
        .filter(|r| r.domain_is_source)
        .filter_map(|r| r.label.clone())
        .collect();
    class_names.sort();
    class_names.dedup();
    if class_names.is_empty() {
        return Err(Error::Dataset("manifest has no labeled source samples".into()));
    }
    let class_id = |name: &str| -> Option<usize> { class_names.iter().position(|c| c == name) };

    let mut source_rows = Vec::new();
    let mut source_labels = Vec::new();
    let mut target_rows = Vec::new();
    let mut target_labels = Vec::new();
    for r in &rows {
        if r.domain_is_source {
            source_rows.push(r.features.clone());
            source_labels.push(class_id(r.label.as_deref().unwrap()).expect("vocab built from source"));
        } else {
            target_rows.push(r.features.clone());
            target_labels.push(match &r.label {
                None => None,
                Some(name) => Some(class_id(name).ok_or_else(|| {
                    Error::Dataset(format!(
                        "target label `{name}` does not exist in the source vocabulary"
                    ))
                })?),
            });
        }
    }
    if source_rows.is_empty() || target_rows.is_empty() {
        return Err(Error::Dataset(
            "manifest must list at least one sample per domain".into(),
        ));
    }

    let to_matrix = |rows: Vec<Vec<f64>>| -> Array2<f64> {
        let n = rows.len();
        let mut m = Array2::zeros((n, width));
        for (i, r) in rows.into_iter().enumerate() {
            for (j, v) in r.into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    };

    let pair = DomainPair {
        source_inputs: to_matrix(source_rows),
        source_labels,
        target_inputs: to_matrix(target_rows),
        target_labels,
        class_names,
        spec: DatasetSpec::Directory {
            manifest: manifest.to_path_buf(),
        },
    };
    pair.validate()?;
    Ok(pair)
}

/// Writes the pair as `manifest.csv` plus one feature file per sample,
/// loadable by [`load_directory_dataset`].
pub fn export_directory_dataset(pair: &DomainPair, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("path,domain,label\n");
    let write_sample = |idx: usize, domain: &str, row: ArrayView2<f64>| -> Result<String> {
        let name = format!("{domain}_{idx:05}.txt");
        let mut text = String::new();
        for v in row.iter() {
            text.push_str(&format!("{v}\n"));
        }
        std::fs::write(dir.join(&name), text)?;
        Ok(name)
    };
    for i in 0..pair.source_count() {
        let name = write_sample(i, "source", pair.source_inputs.slice(ndarray::s![i..i + 1, ..]))?;
        manifest.push_str(&format!(
            "{name},source,{}\n",
            pair.class_names[pair.source_labels[i]]
        ));
    }
    for i in 0..pair.target_count() {
        let name = write_sample(i, "target", pair.target_inputs.slice(ndarray::s![i..i + 1, ..]))?;
        let label = match pair.target_labels[i] {
            Some(y) => pair.class_names[y].clone(),
            None => String::new(),
        };
        manifest.push_str(&format!("{name},target,{label}\n"));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_moons_counts_are_balanced() {
        let pair = make_two_moons_shift(200, 45.0, 0.1, 7).unwrap();
        assert_eq!(pair.source_count(), 200);
        assert_eq!(pair.target_count(), 200);
        let count = |labels: &[usize], c: usize| labels.iter().filter(|&&y| y == c).count();
        assert_eq!(count(&pair.source_labels, 0), 100);
        assert_eq!(count(&pair.source_labels, 1), 100);
        let target: Vec<usize> = pair.target_labels.iter().map(|y| y.unwrap()).collect();
        assert_eq!(count(&target, 0), 100);
        assert_eq!(count(&target, 1), 100);
    }

    #[test]
    fn rotation_180_is_point_reflection() {
        let rotated = make_two_moons_shift(60, 180.0, 0.0, 11).unwrap();
        let unrotated = make_two_moons_shift(60, 0.0, 0.0, 11).unwrap();
        for (a, b) in rotated
            .target_inputs
            .iter()
            .zip(unrotated.target_inputs.iter())
        {
            assert_abs_diff_eq!(*a, -*b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_rotation_draws_match_in_distribution() {
        let pair = make_two_moons_shift(2000, 0.0, 0.05, 3).unwrap();
        // Same generator, different draws: per-class means agree loosely.
        for c in 0..2 {
            for j in 0..2 {
                let mean = |inputs: &Array2<f64>, labels: &dyn Fn(usize) -> usize| -> f64 {
                    let idx: Vec<usize> =
                        (0..inputs.nrows()).filter(|&i| labels(i) == c).collect();
                    idx.iter().map(|&i| inputs[[i, j]]).sum::<f64>() / idx.len() as f64
                };
                let ms = mean(&pair.source_inputs, &|i| pair.source_labels[i]);
                let mt = mean(&pair.target_inputs, &|i| pair.target_labels[i].unwrap());
                assert!(
                    (ms - mt).abs() < 0.1,
                    "class {c} coord {j}: {ms} vs {mt}"
                );
            }
        }
    }

    #[test]
    fn generators_are_deterministic_per_seed() {
        let a = make_two_moons_shift(50, 45.0, 0.1, 42).unwrap();
        let b = make_two_moons_shift(50, 45.0, 0.1, 42).unwrap();
        assert_eq!(a.source_inputs, b.source_inputs);
        assert_eq!(a.target_inputs, b.target_inputs);

        let a = make_gaussian_shift(3, 90, &[1.0, -1.0], 1.0, 9).unwrap();
        let b = make_gaussian_shift(3, 90, &[1.0, -1.0], 1.0, 9).unwrap();
        assert_eq!(a.source_inputs, b.source_inputs);
        assert_eq!(a.target_inputs, b.target_inputs);
    }

    #[test]
    fn gaussian_counts_per_class() {
        let pair = make_gaussian_shift(3, 300, &[0.0, 0.0], 1.0, 5).unwrap();
        let mut counts = [0usize; 3];
        for &y in &pair.source_labels {
            counts[y] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
    }

    #[test]
    fn gaussian_zero_shift_means_agree() {
        let n = 3000;
        let pair = make_gaussian_shift(3, n, &[0.0, 0.0], 1.0, 17).unwrap();
        let per_class = n / 3;
        let sigma = 1.0;
        let tol = 3.0 * sigma / (per_class as f64).sqrt() * 2.0_f64.sqrt();
        for c in 0..3 {
            for j in 0..2 {
                let mean = |inputs: &Array2<f64>, labels: &dyn Fn(usize) -> usize| -> f64 {
                    let idx: Vec<usize> =
                        (0..inputs.nrows()).filter(|&i| labels(i) == c).collect();
                    idx.iter().map(|&i| inputs[[i, j]]).sum::<f64>() / idx.len() as f64
                };
                let ms = mean(&pair.source_inputs, &|i| pair.source_labels[i]);
                let mt = mean(&pair.target_inputs, &|i| pair.target_labels[i].unwrap());
                assert!((ms - mt).abs() < tol, "class {c} coord {j}: {ms} vs {mt}");
            }
        }
    }

    #[test]
    fn gaussian_large_shift_is_linearly_separable_by_domain() {
        // Oracle: a logistic-regression probe on domain labels.
        let pair = make_gaussian_shift(2, 100, &[10.0, 0.0], 1.0, 23).unwrap();
        let n = pair.source_count() + pair.target_count();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for row in pair.source_inputs.rows() {
            x.push([row[0], row[1]]);
            y.push(0.0);
        }
        for row in pair.target_inputs.rows() {
            x.push([row[0], row[1]]);
            y.push(1.0);
        }
        let mut w = [0.0f64; 3];
        for _ in 0..500 {
            let mut grad = [0.0f64; 3];
            for (xi, &yi) in x.iter().zip(&y) {
                let z = w[0] * xi[0] + w[1] * xi[1] + w[2];
                let p = 1.0 / (1.0 + (-z).exp());
                let d = p - yi;
                grad[0] += d * xi[0];
                grad[1] += d * xi[1];
                grad[2] += d;
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= 0.1 * gi / n as f64;
            }
        }
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| {
                let z = w[0] * xi[0] + w[1] * xi[1] + w[2];
                (z > 0.0) == (yi > 0.5)
            })
            .count();
        let acc = correct as f64 / n as f64;
        assert!(acc > 0.99, "domain probe accuracy {acc}");
    }

    fn balanced_gaussian_pair() -> DomainPair {
        make_gaussian_shift(5, 1000, &[1.0, 1.0], 1.0, 31).unwrap()
    }

    #[test]
    fn imbalance_minority_counts_follow_closed_form() {
        let pair = balanced_gaussian_pair(); // 200 per class
        let spec = ImbalanceSpec {
            majority_class: 0,
            minority_fraction: 0.05,
            source_downsample_rate: 0.9,
        };
        let out = make_imbalanced(&pair, &spec, 1).unwrap();
        let counts = out.target_class_counts();
        assert_eq!(counts[0], 200);
        for c in 1..5 {
            assert_eq!(counts[c], 10); // round(0.05 * 200)
        }
    }

    #[test]
    fn imbalance_source_downsample_keeps_exact_count() {
        let pair = balanced_gaussian_pair();
        let spec = ImbalanceSpec {
            majority_class: 0,
            minority_fraction: 0.10,
            source_downsample_rate: 0.9,
        };
        let out = make_imbalanced(&pair, &spec, 2).unwrap();
        assert_eq!(out.source_count(), 100); // 1000 * (1 - 0.9)
    }

    #[test]
    fn imbalance_sweep_has_ten_fractions() {
        let fractions = minority_fractions();
        assert_eq!(fractions.len(), 10);
        assert_abs_diff_eq!(fractions[0], 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(fractions[9], 0.10, epsilon = 1e-12);
        let pair = balanced_gaussian_pair();
        for &f in &fractions {
            let spec = ImbalanceSpec {
                majority_class: 0,
                minority_fraction: f,
                source_downsample_rate: 0.9,
            };
            let out = make_imbalanced(&pair, &spec, 3).unwrap();
            let counts = out.target_class_counts();
            for c in 1..5 {
                assert_eq!(counts[c], round_half_up(f * 200.0).max(1));
            }
        }
    }

    #[test]
    fn imbalance_preserves_majority_and_features() {
        let pair = balanced_gaussian_pair();
        let spec = ImbalanceSpec {
            majority_class: 2,
            minority_fraction: 0.03,
            source_downsample_rate: 0.5,
        };
        let out = make_imbalanced(&pair, &spec, 4).unwrap();
        // Every kept target row exists verbatim in the original.
        for row in out.target_inputs.rows() {
            let found = pair
                .target_inputs
                .rows()
                .into_iter()
                .any(|orig| orig.iter().zip(row.iter()).all(|(a, b)| a == b));
            assert!(found);
        }
        assert_eq!(out.target_class_counts()[2], 200);
    }

    #[test]
    fn imbalance_errors_when_source_class_empties() {
        let pair = balanced_gaussian_pair();
        let spec = ImbalanceSpec {
            majority_class: 0,
            minority_fraction: 0.10,
            source_downsample_rate: 0.999, // keeps 1 of 1000
        };
        let err = make_imbalanced(&pair, &spec, 5).unwrap_err();
        assert!(matches!(err, Error::ClassEmptied { domain: "source", .. }));
    }

    #[test]
    fn directory_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let pair = make_gaussian_shift(2, 10, &[1.0, 0.0], 0.5, 8).unwrap();
        export_directory_dataset(&pair, dir.path()).unwrap();
        let loaded = load_directory_dataset(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded.source_count(), pair.source_count());
        assert_eq!(loaded.target_count(), pair.target_count());
        assert_eq!(loaded.source_labels, pair.source_labels);
        assert_eq!(loaded.target_labels, pair.target_labels);
        // Full-precision text roundtrip is exact.
        assert_eq!(loaded.source_inputs, pair.source_inputs);
        assert_eq!(loaded.target_inputs, pair.target_inputs);
    }

    #[test]
    fn directory_manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        for (name, value) in [
            ("a.txt", "1.0 2.0"),
            ("b.txt", "3.0 4.0"),
            ("c.txt", "5.0 6.0"),
            ("d.txt", "7.0 8.0"),
        ] {
            std::fs::write(dir.path().join(name), value).unwrap();
        }
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(
            &manifest,
            "path,domain,label\na.txt,source,cat\nb.txt,source,dog\nc.txt,target,cat\nd.txt,target,\n",
        )
        .unwrap();
        let pair = load_directory_dataset(&manifest).unwrap();
        assert_eq!(pair.source_count(), 2);
        assert_eq!(pair.target_count(), 2);
        assert_eq!(pair.class_names, vec!["cat", "dog"]);
        // Labeled target rows keep their hidden label; unlabeled rows are None.
        assert_eq!(pair.target_labels, vec![Some(0), None]);
    }

    #[test]
    fn directory_rejects_unknown_target_label() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.txt", "b.txt"] {
            std::fs::write(dir.path().join(name), "1.0 2.0").unwrap();
        }
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(
            &manifest,
            "path,domain,label\na.txt,source,cat\nb.txt,target,bird\n",
        )
        .unwrap();
        let err = load_directory_dataset(&manifest).unwrap_err();
        assert!(err.to_string().contains("bird"));
    }

    #[test]
    fn directory_rejects_missing_file_and_bad_width() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "1.0 2.0").unwrap();
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(
            &manifest,
            "path,domain,label\na.txt,source,cat\nmissing.txt,target,\n",
        )
        .unwrap();
        assert!(load_directory_dataset(&manifest).is_err());

        std::fs::write(dir.path().join("b.txt"), "1.0 2.0 3.0").unwrap();
        std::fs::write(
            &manifest,
            "path,domain,label\na.txt,source,cat\nb.txt,target,\n",
        )
        .unwrap();
        let err = load_directory_dataset(&manifest).unwrap_err();
        assert!(err.to_string().contains("width"));
    }
}
