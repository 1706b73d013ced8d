//! Experiment front end: suite configuration, variant/seed orchestration,
//! aggregation across seeds, and trace export.
//!
//! Suites are described by a key-value file (`key = value`, `#` comments).
//! Command-line overrides are applied on top of file values; later entries
//! win.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::trainer::{train_on, EpochRecord, MetricsLog, RunConfig, Variant};

/// A set of runs: one per (variant, seed) on a shared dataset and base
/// configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSuite {
    pub name: String,
    /// Template configuration; `variant` and `seed` are filled per run.
    pub base: RunConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "name",
    "dataset",
    "n-per-domain",
    "rotation-degrees",
    "noise",
    "data-seed",
    "classes",
    "shift",
    "covariance-scale",
    "manifest",
    "majority-class",
    "minority-fraction",
    "source-downsample-rate",
    "imbalance-seed",
    "variants",
    "seeds",
    "epochs",
    "warmup-epochs",
    "batch-size",
    "base-lr",
    "task-lr-multiplier",
    "momentum",
    "weight-decay",
    "pretrain-epochs",
    "extractor-hidden",
    "embedding-dim",
    "classifier-hidden",
    "activation",
    "kernel",
    "kmeans-max-iter",
    "aux-form",
    "aux-full-dataset-mass",
    "checkpoint-every",
    "grad-clip",
    "early-stop-patience",
    "init-checkpoint",
    "export-cluster-state",
    "export-embeddings",
    "output-dir",
];

/// Parses a suite file into ordered key-value entries.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
        })?;
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_num::<T>(key, v.trim()))
        .collect()
}

/// Builds a suite from entries (file contents and/or overrides, later wins).
/// `base_dir` anchors relative paths.
pub fn build_suite(entries: &[(String, String)], base_dir: &Path) -> Result<ExperimentSuite> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in entries {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        map.insert(k, v);
    }
    let get = |key: &str| map.get(key).copied();

    let data_seed: u64 = match get("data-seed") {
        Some(v) => parse_num("data-seed", v)?,
        None => 0,
    };
    let dataset_kind = get("dataset").unwrap_or("two-moons");
    let mut dataset = match dataset_kind {
        "two-moons" => DatasetSpec::TwoMoons {
            n_per_domain: get("n-per-domain").map(|v| parse_num("n-per-domain", v)).transpose()?.unwrap_or(400),
            rotation_degrees: get("rotation-degrees").map(|v| parse_num("rotation-degrees", v)).transpose()?.unwrap_or(45.0),
            noise: get("noise").map(|v| parse_num("noise", v)).transpose()?.unwrap_or(0.1),
            seed: data_seed,
        },
        "gaussian" => DatasetSpec::GaussianBlobs {
            classes: get("classes").map(|v| parse_num("classes", v)).transpose()?.unwrap_or(15),
            n_per_domain: get("n-per-domain").map(|v| parse_num("n-per-domain", v)).transpose()?.unwrap_or(1500),
            shift: match get("shift") {
                Some(v) => parse_list("shift", v)?,
                None => vec![2.5, 2.5],
            },
            covariance_scale: get("covariance-scale").map(|v| parse_num("covariance-scale", v)).transpose()?.unwrap_or(1.0),
            seed: data_seed,
        },
        "directory" => DatasetSpec::Directory {
            manifest: {
                let m = get("manifest").ok_or_else(|| {
                    Error::Config("dataset `directory` requires `manifest`".into())
                })?;
                let p = PathBuf::from(m);
                if p.is_absolute() { p } else { base_dir.join(p) }
            },
        },
        other => {
            return Err(Error::Config(format!(
                "unknown dataset `{other}` (valid: two-moons, gaussian, directory)"
            )))
        }
    };

    if let Some(fraction) = get("minority-fraction") {
        let majority = get("majority-class").ok_or_else(|| {
            Error::Config("`minority-fraction` requires `majority-class`".into())
        })?;
        dataset = DatasetSpec::Imbalanced {
            base: Box::new(dataset),
            majority_class: parse_num("majority-class", majority)?,
            minority_fraction: parse_num("minority-fraction", fraction)?,
            source_downsample_rate: get("source-downsample-rate")
                .map(|v| parse_num("source-downsample-rate", v))
                .transpose()?
                .unwrap_or(0.9),
            seed: get("imbalance-seed").map(|v| parse_num("imbalance-seed", v)).transpose()?.unwrap_or(data_seed),
        };
    }

    let defaults = RunConfig::default();
    let base = RunConfig {
        variant: defaults.variant,
        dataset,
        seed: defaults.seed,
        epochs: get("epochs").map(|v| parse_num("epochs", v)).transpose()?.unwrap_or(200),
        warmup_epochs: get("warmup-epochs").map(|v| parse_num("warmup-epochs", v)).transpose()?.unwrap_or(5),
        batch_size: get("batch-size").map(|v| parse_num("batch-size", v)).transpose()?.unwrap_or(64),
        base_lr: get("base-lr").map(|v| parse_num("base-lr", v)).transpose()?.unwrap_or(defaults.base_lr),
        task_lr_multiplier: get("task-lr-multiplier").map(|v| parse_num("task-lr-multiplier", v)).transpose()?.unwrap_or(10.0),
        momentum: get("momentum").map(|v| parse_num("momentum", v)).transpose()?.unwrap_or(0.9),
        weight_decay: get("weight-decay").map(|v| parse_num("weight-decay", v)).transpose()?.unwrap_or(0.0),
        pretrain_epochs: get("pretrain-epochs").map(|v| parse_num("pretrain-epochs", v)).transpose()?.unwrap_or(defaults.pretrain_epochs),
        extractor_hidden: match get("extractor-hidden") {
            Some(v) => parse_list("extractor-hidden", v)?,
            None => defaults.extractor_hidden.clone(),
        },
        embedding_dim: get("embedding-dim").map(|v| parse_num("embedding-dim", v)).transpose()?.unwrap_or(defaults.embedding_dim),
        classifier_hidden: match get("classifier-hidden") {
            Some(v) => parse_list("classifier-hidden", v)?,
            None => defaults.classifier_hidden.clone(),
        },
        activation: get("activation").map(|v| v.parse()).transpose()?.unwrap_or(defaults.activation),
        kernel: get("kernel").map(|v| v.parse()).transpose()?.unwrap_or(defaults.kernel),
        kmeans_max_iter: get("kmeans-max-iter").map(|v| parse_num("kmeans-max-iter", v)).transpose()?.unwrap_or(100),
        aux_form: get("aux-form").map(|v| v.parse()).transpose()?.unwrap_or_default(),
        aux_full_dataset_mass: get("aux-full-dataset-mass").map(|v| parse_bool("aux-full-dataset-mass", v)).transpose()?.unwrap_or(false),
        checkpoint_every: get("checkpoint-every").map(|v| parse_num("checkpoint-every", v)).transpose()?.unwrap_or(10),
        grad_clip: match get("grad-clip") {
            Some("none") => None,
            Some(v) => Some(parse_num("grad-clip", v)?),
            None => defaults.grad_clip,
        },
        early_stop_patience: match get("early-stop-patience") {
            Some("none") | None => None,
            Some(v) => Some(parse_num("early-stop-patience", v)?),
        },
        init_checkpoint: get("init-checkpoint").map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base_dir.join(p) }
        }),
        export_cluster_state: get("export-cluster-state").map(|v| parse_bool("export-cluster-state", v)).transpose()?.unwrap_or(false),
        export_embeddings: get("export-embeddings").map(|v| parse_bool("export-embeddings", v)).transpose()?.unwrap_or(false),
        output_dir: None,
    };
    base.validate()?;

    let variants: Vec<Variant> = match get("variants") {
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_>>()?,
        None => vec![Variant::Avatar],
    };
    if variants.is_empty() {
        return Err(Error::Config("`variants` must list at least one variant".into()));
    }
    let seeds: Vec<u64> = match get("seeds") {
        Some(v) => parse_list("seeds", v)?,
        None => vec![1, 2, 3],
    };
    if seeds.is_empty() {
        return Err(Error::Config("`seeds` must list at least one seed".into()));
    }

    let output_dir = match get("output-dir") {
        Some(v) => {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base_dir.join(p) }
        }
        None => base_dir.join("runs"),
    };

    Ok(ExperimentSuite {
        name: get("name").unwrap_or("suite").to_string(),
        base,
        variants,
        seeds,
        output_dir,
    })
}

/// Reads and parses a suite file, applying `overrides` on top (later wins).
pub fn parse_config_with_overrides(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentSuite> {
    let mut entries = Vec::new();
    let base_dir = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            entries.extend(parse_entries(&text)?);
            p.parent().unwrap_or(Path::new(".")).to_path_buf()
        }
        None => PathBuf::from("."),
    };
    entries.extend(overrides.iter().cloned());
    build_suite(&entries, &base_dir)
}

/// Parses a suite configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentSuite> {
    parse_config_with_overrides(Some(path), &[])
}

/// Outcome of one run within a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub variant: Variant,
    pub seed: u64,
    pub final_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Aggregated accuracy of one variant over its completed seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_accuracy: f64,
    pub seed_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub rows: Vec<VariantRow>,
    pub runs: Vec<RunSummary>,
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Runs every (variant, seed) combination, persists raw logs per run, and
/// aggregates final target accuracy per variant. Failed runs are recorded and
/// skipped in the aggregation.
pub fn run_suite(suite: &ExperimentSuite) -> Result<SuiteReport> {
    std::fs::create_dir_all(&suite.output_dir)?;
    let data = suite.base.dataset.materialize()?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();

    for &variant in &suite.variants {
        let mut accs = Vec::new();
        for &seed in &suite.seeds {
            let mut config = suite.base.clone();
            config.variant = variant;
            config.seed = seed;
            let run_id = config.run_id();
            config.output_dir = Some(suite.output_dir.join(&run_id));
            match train_on(&config, &data, |_| {}) {
                Ok(outcome) => {
                    let acc = outcome.metrics.final_accuracy();
                    if let Some(a) = acc {
                        accs.push(a);
                    }
                    runs.push(RunSummary {
                        run_id,
                        variant,
                        seed,
                        final_accuracy: acc,
                        error: None,
                    });
                }
                Err(e) => {
                    log::warn!("run {run_id} failed: {e}; aggregating remaining seeds");
                    runs.push(RunSummary {
                        run_id,
                        variant,
                        seed,
                        final_accuracy: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        let (mean, std) = mean_and_std(&accs);
        rows.push(VariantRow {
            variant,
            mean_accuracy: mean,
            std_accuracy: std,
            seed_accuracies: accs,
        });
    }

    let report = SuiteReport {
        name: suite.name.clone(),
        rows,
        runs,
    };
    write_report(&report, &suite.output_dir)?;
    Ok(report)
}

fn write_report(report: &SuiteReport, dir: &Path) -> Result<()> {
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut csv = String::from("variant,n_seeds,mean_accuracy,std_accuracy,seed_accuracies\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.variant,
            row.seed_accuracies.len(),
            row.mean_accuracy,
            row.std_accuracy,
            row.seed_accuracies
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        ));
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    Ok(())
}

/// Per-epoch mean with a 95% confidence band across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSeries {
    pub epochs: Vec<usize>,
    pub mean: Vec<f64>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Builds a trace over the common epoch range of the given logs; epochs where
/// `metric` is absent in any log are skipped.
pub fn trace_from_logs(
    logs: &[Vec<EpochRecord>],
    metric: impl Fn(&EpochRecord) -> Option<f64>,
) -> TraceSeries {
    let mut series = TraceSeries {
        epochs: Vec::new(),
        mean: Vec::new(),
        low: Vec::new(),
        high: Vec::new(),
    };
    let common = logs.iter().map(|l| l.len()).min().unwrap_or(0);
    for e in 0..common {
        let values: Vec<f64> = logs.iter().filter_map(|l| metric(&l[e])).collect();
        if values.len() != logs.len() {
            continue;
        }
        let (mean, std) = mean_and_std(&values);
        let half = if values.len() > 1 {
            1.96 * std / (values.len() as f64).sqrt()
        } else {
            0.0
        };
        series.epochs.push(logs[0][e].epoch);
        series.mean.push(mean);
        series.low.push(mean - half);
        series.high.push(mean + half);
    }
    series
}

fn write_trace_csv(series: &TraceSeries, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,mean,low,high\n");
    for i in 0..series.epochs.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            series.epochs[i], series.mean[i], series.low[i], series.high[i]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Emits per-variant trace CSVs (accuracy and, where present, mean threshold)
/// from per-run epoch logs. Returns the traces keyed by file stem.
pub fn emit_traces(
    run_logs: &[(Variant, Vec<EpochRecord>)],
    out_dir: &Path,
    render_svg: bool,
) -> Result<Vec<(String, TraceSeries)>> {
    std::fs::create_dir_all(out_dir)?;
    let mut variants: Vec<Variant> = run_logs.iter().map(|(v, _)| *v).collect();
    variants.dedup();
    variants.sort_by_key(|v| v.name());
    variants.dedup();

    let mut emitted = Vec::new();
    for variant in variants {
        let logs: Vec<Vec<EpochRecord>> = run_logs
            .iter()
            .filter(|(v, _)| *v == variant)
            .map(|(_, l)| l.clone())
            .collect();
        let accuracy = trace_from_logs(&logs, |r| Some(r.target_accuracy));
        write_trace_csv(&accuracy, &out_dir.join(format!("trace_{variant}_accuracy.csv")))?;
        emitted.push((format!("{variant}_accuracy"), accuracy));

        let threshold = trace_from_logs(&logs, |r| r.mean_threshold);
        if !threshold.epochs.is_empty() {
            write_trace_csv(
                &threshold,
                &out_dir.join(format!("trace_{variant}_threshold.csv")),
            )?;
            emitted.push((format!("{variant}_threshold"), threshold));
        }
    }

    if render_svg {
        let acc: Vec<(&str, &TraceSeries)> = emitted
            .iter()
            .filter(|(n, _)| n.ends_with("_accuracy"))
            .map(|(n, s)| (n.as_str(), s))
            .collect();
        if !acc.is_empty() {
            std::fs::write(
                out_dir.join("traces_accuracy.svg"),
                render_trace_svg("target accuracy", &acc),
            )?;
        }
        let tau: Vec<(&str, &TraceSeries)> = emitted
            .iter()
            .filter(|(n, _)| n.ends_with("_threshold"))
            .map(|(n, s)| (n.as_str(), s))
            .collect();
        if !tau.is_empty() {
            std::fs::write(
                out_dir.join("traces_threshold.svg"),
                render_trace_svg("mean threshold", &tau),
            )?;
        }
    }
    Ok(emitted)
}

/// Reads every run directory under `suite_dir` (identified by a
/// `metrics.jsonl` next to a `config.json`) and emits traces into `out_dir`.
pub fn emit_traces_from_dir(suite_dir: &Path, out_dir: &Path, render_svg: bool) -> Result<()> {
    let mut run_logs = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(suite_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("metrics.jsonl").exists())
        .collect();
    dirs.sort();
    for dir in dirs {
        let config: RunConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let log = MetricsLog::read_jsonl(&dir.join("metrics.jsonl"))?;
        run_logs.push((config.variant, log));
    }
    if run_logs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no completed runs found under {}",
            suite_dir.display()
        )));
    }
    emit_traces(&run_logs, out_dir, render_svg)?;
    Ok(())
}

/// Minimal static line plot with confidence bands, one polyline per series.
pub fn render_trace_svg(title: &str, series: &[(&str, &TraceSeries)]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut max_x = 1.0f64;
    for (_, s) in series {
        for i in 0..s.epochs.len() {
            min_y = min_y.min(s.low[i]);
            max_y = max_y.max(s.high[i]);
            max_x = max_x.max(s.epochs[i] as f64);
        }
    }
    if !min_y.is_finite() {
        min_y = 0.0;
        max_y = 1.0;
    }
    if (max_y - min_y).abs() < 1e-12 {
        max_y = min_y + 1.0;
    }
    let x = |e: f64| M + (e / max_x) * (W - 2.0 * M);
    let y = |v: f64| H - M - ((v - min_y) / (max_y - min_y)) * (H - 2.0 * M);

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>
<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>
"#,
        W / 2.0,
        H - M,
        W - M,
        H - M,
        H - M,
    );
    for (idx, (label, s)) in series.iter().enumerate() {
        let color = palette[idx % palette.len()];
        if s.epochs.is_empty() {
            continue;
        }
        let mut band = String::new();
        for i in 0..s.epochs.len() {
            band.push_str(&format!("{:.2},{:.2} ", x(s.epochs[i] as f64), y(s.high[i])));
        }
        for i in (0..s.epochs.len()).rev() {
            band.push_str(&format!("{:.2},{:.2} ", x(s.epochs[i] as f64), y(s.low[i])));
        }
        svg.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{color}\" opacity=\"0.15\"/>\n",
            band.trim_end()
        ));
        let line: Vec<String> = (0..s.epochs.len())
            .map(|i| format!("{:.2},{:.2}", x(s.epochs[i] as f64), y(s.mean[i])))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            line.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            W - M - 150.0,
            M + 16.0 * idx as f64,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_suite_text() -> &'static str {
        "# tiny suite\n\
         name = tiny\n\
         dataset = gaussian\n\
         classes = 2\n\
         n-per-domain = 40\n\
         shift = 1.0,0.5\n\
         covariance-scale = 0.6\n\
         data-seed = 3\n\
         variants = source,avatar\n\
         seeds = 1,2\n\
         epochs = 4\n\
         warmup-epochs = 2\n\
         batch-size = 16\n\
         pretrain-epochs = 2\n\
         extractor-hidden = 12\n\
         embedding-dim = 6\n\
         checkpoint-every = 0\n"
    }

    #[test]
    fn minimal_config_applies_protocol_defaults() {
        let entries = parse_entries("dataset = two-moons\nvariants = avatar\n").unwrap();
        let suite = build_suite(&entries, Path::new(".")).unwrap();
        assert_eq!(suite.base.epochs, 200);
        assert_eq!(suite.base.warmup_epochs, 5);
        assert_eq!(suite.base.batch_size, 64);
        assert_eq!(suite.variants, vec![Variant::Avatar]);
        assert_eq!(suite.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let entries = parse_entries("epochz = 10\n").unwrap();
        let err = build_suite(&entries, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("epochz"));
    }

    #[test]
    fn misspelled_variant_lists_valid_names() {
        let entries = parse_entries("variants = avatarx\n").unwrap();
        let err = build_suite(&entries, Path::new(".")).unwrap_err().to_string();
        for name in crate::trainer::VARIANT_NAMES {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn warmup_not_below_epochs_is_rejected() {
        let entries = parse_entries("epochs = 5\nwarmup-epochs = 5\n").unwrap();
        let err = build_suite(&entries, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("warm-up"));
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut entries = parse_entries(tiny_suite_text()).unwrap();
        entries.push(("epochs".into(), "7".into()));
        let suite = build_suite(&entries, Path::new(".")).unwrap();
        assert_eq!(suite.base.epochs, 7);
    }

    #[test]
    fn imbalance_overlay_wraps_dataset() {
        let text = "dataset = gaussian\nclasses = 4\nn-per-domain = 80\n\
                    majority-class = 0\nminority-fraction = 0.05\n";
        let entries = parse_entries(text).unwrap();
        let suite = build_suite(&entries, Path::new(".")).unwrap();
        match &suite.base.dataset {
            DatasetSpec::Imbalanced {
                base,
                majority_class,
                minority_fraction,
                source_downsample_rate,
                ..
            } => {
                assert_eq!(*majority_class, 0);
                assert_abs_diff_eq!(*minority_fraction, 0.05, epsilon = 1e-12);
                assert_abs_diff_eq!(*source_downsample_rate, 0.9, epsilon = 1e-12);
                assert!(matches!(**base, DatasetSpec::GaussianBlobs { .. }));
            }
            other => panic!("expected imbalanced spec, got {other:?}"),
        }
    }

    #[test]
    fn suite_runs_aggregate_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = parse_entries(tiny_suite_text()).unwrap();
        entries.push(("output-dir".into(), dir.path().to_str().unwrap().into()));
        let suite = build_suite(&entries, Path::new(".")).unwrap();
        let report = run_suite(&suite).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.runs.len(), 4);
        for row in &report.rows {
            assert_eq!(row.seed_accuracies.len(), 2);
            let (mean, std) = mean_and_std(&row.seed_accuracies);
            assert_abs_diff_eq!(row.mean_accuracy, mean, epsilon = 1e-12);
            assert_abs_diff_eq!(row.std_accuracy, std, epsilon = 1e-12);
        }
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("avatar_seed1/metrics.jsonl").exists());

        // Identical configs and seeds reproduce the report bit-for-bit.
        let report2 = run_suite(&suite).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&report2).unwrap()
        );
    }

    #[test]
    fn single_seed_report_has_zero_std() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = parse_entries(tiny_suite_text()).unwrap();
        entries.push(("seeds".into(), "1".into()));
        entries.push(("variants".into(), "source".into()));
        entries.push(("output-dir".into(), dir.path().to_str().unwrap().into()));
        let suite = build_suite(&entries, Path::new(".")).unwrap();
        let report = run_suite(&suite).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].seed_accuracies.len(), 1);
        assert_abs_diff_eq!(
            report.rows[0].mean_accuracy,
            report.rows[0].seed_accuracies[0],
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(report.rows[0].std_accuracy, 0.0, epsilon = 1e-15);
    }

    fn fake_record(epoch: usize, acc: f64, tau: Option<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 0.01,
            lambda: 0.5,
            target_accuracy: acc,
            per_class_accuracy: vec![acc],
            cluster_purity: None,
            mean_threshold: tau,
            positive_count: None,
            negative_count: None,
            empty_clusters: 0,
            loss: Default::default(),
        }
    }

    #[test]
    fn traces_have_expected_shape_and_intervals() {
        let logs: Vec<Vec<EpochRecord>> = (0..3)
            .map(|s| {
                (1..=200)
                    .map(|e| fake_record(e, 0.5 + 0.001 * (e as f64) + 0.01 * s as f64, None))
                    .collect()
            })
            .collect();
        let t = trace_from_logs(&logs, |r| Some(r.target_accuracy));
        assert_eq!(t.epochs.len(), 200);
        // Interval bounds match an independent recomputation.
        for e in [0usize, 99, 199] {
            let vals: Vec<f64> = logs.iter().map(|l| l[e].target_accuracy).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
            let half = 1.96 * sd / 3f64.sqrt();
            assert_abs_diff_eq!(t.mean[e], mean, epsilon = 1e-12);
            assert_abs_diff_eq!(t.low[e], mean - half, epsilon = 1e-12);
            assert_abs_diff_eq!(t.high[e], mean + half, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_metric_across_seeds_has_zero_width() {
        let logs: Vec<Vec<EpochRecord>> = (0..3)
            .map(|_| (1..=10).map(|e| fake_record(e, 0.7, Some(0.9))).collect())
            .collect();
        let t = trace_from_logs(&logs, |r| r.mean_threshold);
        assert_eq!(t.epochs.len(), 10);
        for i in 0..10 {
            assert_abs_diff_eq!(t.high[i] - t.low[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn emit_traces_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let logs = vec![
            (
                Variant::Avatar,
                (1..=5).map(|e| fake_record(e, 0.8, Some(0.85))).collect(),
            ),
            (
                Variant::Avatar,
                (1..=5).map(|e| fake_record(e, 0.82, Some(0.86))).collect(),
            ),
            (
                Variant::Source,
                (1..=5).map(|e| fake_record(e, 0.6, None)).collect(),
            ),
        ];
        emit_traces(&logs, dir.path(), true).unwrap();
        assert!(dir.path().join("trace_avatar_accuracy.csv").exists());
        assert!(dir.path().join("trace_avatar_threshold.csv").exists());
        assert!(dir.path().join("trace_source_accuracy.csv").exists());
        assert!(!dir.path().join("trace_source_threshold.csv").exists());
        assert!(dir.path().join("traces_accuracy.svg").exists());
    }
}
