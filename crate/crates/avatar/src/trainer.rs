//! Training orchestration: source-only pretraining, the per-epoch cluster /
//! weight / threshold refresh, warm-up gating, and mini-batch alternating
//! optimization of the two objectives.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::clustering::{ClusterState, Kernel};
use crate::data::{DatasetSpec, DomainPair};
use crate::error::{Error, Result};
use crate::losses::{
    auxiliary_rows, loss_breakdown, objective_prob_grads, AuxForm, LossBreakdown, LossInputs,
    Objective,
};
use crate::models::{
    normalize_class_prob_rows, softmax_backward, Activation, Mlp, MlpGrads, MlpSpec, ModelPair,
};
use crate::selection::SelectionState;

/// Which loss terms a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Source cross-entropy only; the target domain is unused.
    Source,
    /// Adds the weighted adversarial pair.
    Variant1,
    /// Adds the self-supervised target loss, without sample selection.
    Variant2,
    /// Full model: selection thresholds gate the target loss after warm-up.
    #[default]
    Avatar,
}

pub const VARIANT_NAMES: [&str; 4] = ["source", "variant1", "variant2", "avatar"];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Source => "source",
            Variant::Variant1 => "variant1",
            Variant::Variant2 => "variant2",
            Variant::Avatar => "avatar",
        }
    }

    pub fn all() -> [Variant; 4] {
        [
            Variant::Source,
            Variant::Variant1,
            Variant::Variant2,
            Variant::Avatar,
        ]
    }

    pub fn components(self) -> VariantComponents {
        VariantComponents {
            source_discriminative: true,
            adversarial_f: self != Variant::Source,
            adversarial_g: self != Variant::Source,
            target_discriminative: matches!(self, Variant::Variant2 | Variant::Avatar),
            selection: self == Variant::Avatar,
        }
    }
}

/// Checkmark matrix row for one variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantComponents {
    pub source_discriminative: bool,
    pub target_discriminative: bool,
    pub adversarial_f: bool,
    pub adversarial_g: bool,
    pub selection: bool,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Variant::Source),
            "variant1" => Ok(Variant::Variant1),
            "variant2" => Ok(Variant::Variant2),
            "avatar" => Ok(Variant::Avatar),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (valid: {})",
                VARIANT_NAMES.join(", ")
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full configuration of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: Variant,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Mini-batch size per domain: each step draws this many source and this
    /// many target samples.
    pub batch_size: usize,
    pub base_lr: f64,
    /// The classifier head trains at `task_lr_multiplier * base_lr`.
    pub task_lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Source-only epochs run before the main loop (skipped when
    /// `init_checkpoint` is set).
    pub pretrain_epochs: usize,
    pub extractor_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub activation: Activation,
    pub kernel: Kernel,
    pub kmeans_max_iter: usize,
    pub aux_form: AuxForm,
    /// Use full-dataset column sums in the auxiliary update instead of the
    /// batch's own.
    pub aux_full_dataset_mass: bool,
    /// Checkpoint every N epochs (plus the final one); 0 disables periodic
    /// checkpoints.
    pub checkpoint_every: usize,
    /// Global L2-norm gradient clip applied per network per step; `None`
    /// disables clipping.
    pub grad_clip: Option<f64>,
    /// Stop when the epoch-mean discriminator objective has not improved for
    /// this many epochs. Off by default.
    pub early_stop_patience: Option<usize>,
    pub init_checkpoint: Option<PathBuf>,
    pub export_cluster_state: bool,
    pub export_embeddings: bool,
    /// Where run artifacts go; `None` keeps everything in memory.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Avatar,
            dataset: DatasetSpec::TwoMoons {
                n_per_domain: 400,
                rotation_degrees: 45.0,
                noise: 0.1,
                seed: 0,
            },
            seed: 1,
            epochs: 200,
            warmup_epochs: 5,
            batch_size: 64,
            base_lr: 0.05,
            task_lr_multiplier: 10.0,
            momentum: 0.9,
            weight_decay: 0.0,
            pretrain_epochs: 10,
            extractor_hidden: vec![128, 128],
            embedding_dim: 64,
            classifier_hidden: vec![],
            activation: Activation::Tanh,
            kernel: Kernel::Cosine,
            kmeans_max_iter: 100,
            aux_form: AuxForm::DivideBySqrtMass,
            aux_full_dataset_mass: false,
            checkpoint_every: 10,
            grad_clip: Some(5.0),
            early_stop_patience: None,
            init_checkpoint: None,
            export_cluster_state: false,
            export_embeddings: false,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warm-up epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        format!("{}_seed{}", self.variant, self.seed)
    }

    fn extractor_spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden: self.extractor_hidden.clone(),
            output_dim: self.embedding_dim,
            activation: self.activation,
        }
    }

    fn classifier_spec(&self, class_count: usize) -> MlpSpec {
        MlpSpec {
            input_dim: self.embedding_dim,
            hidden: self.classifier_hidden.clone(),
            output_dim: class_count + 1,
            activation: self.activation,
        }
    }

    pub fn init_models(&self, input_dim: usize, class_count: usize, rng: &mut ChaCha8Rng) -> Result<ModelPair> {
        ModelPair::init(
            self.extractor_spec(input_dim),
            self.classifier_spec(class_count),
            class_count,
            rng,
        )
    }
}

/// Learning-rate schedule `eta(p) = eta0 * (1 + 10 p)^(-0.75)` over training
/// progress `p` in `[0, 1]` (clamped).
pub fn lr_schedule(progress: f64, base_lr: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    base_lr * (1.0 + 10.0 * p).powf(-0.75)
}

/// SGD with momentum (and optional weight decay) over one MLP's parameters.
pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    velocity_w: Vec<Array2<f64>>,
    velocity_b: Vec<Array1<f64>>,
}

impl SgdMomentum {
    pub fn new(mlp: &Mlp, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity_w: mlp
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            velocity_b: mlp
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    /// `v = momentum * v + grad + weight_decay * param; param -= lr * v`
    pub fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads, lr: f64) {
        for ((layer, grad), (vw, vb)) in mlp
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.velocity_w.iter_mut().zip(self.velocity_b.iter_mut()))
        {
            ndarray::Zip::from(&mut *vw)
                .and(&grad.weight)
                .and(&layer.weight)
                .for_each(|v, &g, &p| *v = self.momentum * *v + g + self.weight_decay * p);
            layer.weight.scaled_add(-lr, vw);
            ndarray::Zip::from(&mut *vb)
                .and(&grad.bias)
                .and(&layer.bias)
                .for_each(|v, &g, &p| *v = self.momentum * *v + g + self.weight_decay * p);
            layer.bias.scaled_add(-lr, vb);
        }
    }
}

/// Scales the gradient set down to the given global L2 norm when it exceeds
/// it.
pub fn clip_global_norm(grads: &mut MlpGrads, max_norm: f64) {
    let norm_sq: f64 = grads
        .layers
        .iter()
        .map(|l| {
            l.weight.iter().map(|g| g * g).sum::<f64>()
                + l.bias.iter().map(|g| g * g).sum::<f64>()
        })
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for l in &mut grads.layers {
            l.weight.mapv_inplace(|g| g * scale);
            l.bias.mapv_inplace(|g| g * scale);
        }
    }
}

/// One optimization step's raw inputs: the mini-batches of both domains.
pub struct BatchInputs<'a> {
    pub source_x: ArrayView2<'a, f64>,
    pub source_labels: &'a [usize],
    pub target_x: ArrayView2<'a, f64>,
}

/// Epoch-level quantities sliced down to the batch.
pub struct BatchContext<'a> {
    pub source_weights: &'a [f64],
    pub target_weights: &'a [f64],
    /// Auxiliary pseudo-label rows for the target batch.
    pub target_aux: ArrayView2<'a, f64>,
    pub thresholds: &'a [f64],
    pub lambda: f64,
    pub adversarial: bool,
    pub target_discriminative: bool,
}

struct ForwardState {
    probs_s: Array2<f64>,
    probs_t: Array2<f64>,
    cache_f_s: crate::models::ForwardCache,
    cache_f_t: crate::models::ForwardCache,
    cache_g_s: crate::models::ForwardCache,
    cache_g_t: crate::models::ForwardCache,
}

fn forward_pair(pair: &ModelPair, batch: &BatchInputs) -> Result<ForwardState> {
    let (z_s, cache_f_s) = pair.extractor.mlp.forward_cached(&batch.source_x)?;
    let (z_t, cache_f_t) = pair.extractor.mlp.forward_cached(&batch.target_x)?;
    let (probs_s, cache_g_s) = pair.classifier.classify_cached(&z_s.view())?;
    let (probs_t, cache_g_t) = pair.classifier.classify_cached(&z_t.view())?;
    Ok(ForwardState {
        probs_s,
        probs_t,
        cache_f_s,
        cache_f_t,
        cache_g_s,
        cache_g_t,
    })
}

fn make_loss_inputs<'a>(
    class_count: usize,
    state: &'a ForwardState,
    batch: &'a BatchInputs,
    ctx: &'a BatchContext,
) -> LossInputs<'a> {
    LossInputs {
        class_count,
        source_probs: state.probs_s.view(),
        target_probs: state.probs_t.view(),
        source_labels: batch.source_labels,
        source_weights: ctx.source_weights,
        target_weights: ctx.target_weights,
        target_aux: ctx.target_aux,
        thresholds: ctx.thresholds,
        lambda: ctx.lambda,
        adversarial: ctx.adversarial,
        target_discriminative: ctx.target_discriminative,
    }
}

/// Loss terms of one batch under the current parameters.
pub fn batch_loss(pair: &ModelPair, batch: &BatchInputs, ctx: &BatchContext) -> Result<LossBreakdown> {
    let state = forward_pair(pair, batch)?;
    let inputs = make_loss_inputs(pair.class_count(), &state, batch, ctx);
    loss_breakdown(&inputs)
}

/// Gradient of the discriminator objective with respect to the classifier
/// parameters, with the extractor held fixed.
pub fn classifier_gradients(
    pair: &ModelPair,
    batch: &BatchInputs,
    ctx: &BatchContext,
) -> Result<MlpGrads> {
    let state = forward_pair(pair, batch)?;
    let inputs = make_loss_inputs(pair.class_count(), &state, batch, ctx);
    let (grad_ps, grad_pt) = objective_prob_grads(&inputs, Objective::Discriminator)?;
    let ds = softmax_backward(&state.probs_s, &grad_ps);
    let dt = softmax_backward(&state.probs_t, &grad_pt);
    let mut grads = pair.classifier.mlp.backward(&state.cache_g_s, &ds);
    grads.accumulate(&pair.classifier.mlp.backward(&state.cache_g_t, &dt));
    Ok(grads)
}

/// Gradient of the feature-extractor objective with respect to the extractor
/// parameters, with the classifier held fixed (gradients flow through it).
pub fn extractor_gradients(
    pair: &ModelPair,
    batch: &BatchInputs,
    ctx: &BatchContext,
) -> Result<MlpGrads> {
    let state = forward_pair(pair, batch)?;
    let inputs = make_loss_inputs(pair.class_count(), &state, batch, ctx);
    let (grad_ps, grad_pt) = objective_prob_grads(&inputs, Objective::FeatureExtractor)?;
    let ds = softmax_backward(&state.probs_s, &grad_ps);
    let dt = softmax_backward(&state.probs_t, &grad_pt);
    let through_g_s = pair.classifier.mlp.backward(&state.cache_g_s, &ds);
    let through_g_t = pair.classifier.mlp.backward(&state.cache_g_t, &dt);
    let mut grads = pair.extractor.mlp.backward(&state.cache_f_s, &through_g_s.input);
    grads.accumulate(&pair.extractor.mlp.backward(&state.cache_f_t, &through_g_t.input));
    Ok(grads)
}

/// Accuracy and confusion counts of one labeled split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub accuracy: f64,
    /// Recall per class; `NaN` for classes absent from the split.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Number of labeled samples the metrics were computed over.
    pub evaluated: usize,
}

impl EvalRecord {
    /// Mean per-class accuracy over the given classes (ignoring absent ones).
    pub fn mean_accuracy_over(&self, classes: &[usize]) -> f64 {
        let vals: Vec<f64> = classes
            .iter()
            .map(|&c| self.per_class_accuracy[c])
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Class prediction: argmax over the `K` class units (domain unit excluded).
pub fn predict_classes(pair: &ModelPair, inputs: &ArrayView2<f64>) -> Result<Vec<usize>> {
    let z = pair.extractor.extract_features(inputs)?;
    let probs = pair.classifier.classify(&z.view())?;
    let k = pair.class_count();
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_p = f64::NEG_INFINITY;
            for (c, &p) in row.iter().take(k).enumerate() {
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Evaluates accuracy over the labeled entries of `labels`.
pub fn evaluate(
    pair: &ModelPair,
    inputs: &ArrayView2<f64>,
    labels: &[Option<usize>],
) -> Result<EvalRecord> {
    if labels.len() != inputs.nrows() {
        return Err(Error::ShapeMismatch {
            what: "evaluation labels",
            expected: inputs.nrows(),
            got: labels.len(),
        });
    }
    let k = pair.class_count();
    let predictions = predict_classes(pair, inputs)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut evaluated = 0usize;
    for (pred, label) in predictions.iter().zip(labels) {
        if let Some(y) = label {
            confusion[*y][*pred] += 1;
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::InvalidArgument(
            "no labeled samples to evaluate".into(),
        ));
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = (0..k)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            if total == 0 {
                f64::NAN
            } else {
                confusion[c][c] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalRecord {
        accuracy: correct as f64 / evaluated as f64,
        per_class_accuracy,
        confusion,
        evaluated,
    })
}

/// One epoch's metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub target_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub cluster_purity: Option<f64>,
    pub mean_threshold: Option<f64>,
    pub positive_count: Option<usize>,
    pub negative_count: Option<usize>,
    pub empty_clusters: usize,
    pub loss: LossBreakdown,
}

/// One batch's loss terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
}

/// Append-only log of one run: one record per completed epoch plus every
/// batch's loss breakdown.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.target_accuracy)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let k = self
            .epochs
            .first()
            .map(|e| e.per_class_accuracy.len())
            .unwrap_or(0);
        let mut out = String::from(
            "epoch,lr,lambda,target_accuracy,cluster_purity,mean_threshold,positive_count,\
             negative_count,empty_clusters,adversarial_g,adversarial_f,target_discriminative,\
             source_discriminative,discriminative,total_f,total_g",
        );
        for c in 0..k {
            out.push_str(&format!(",acc_class_{c}"));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.lambda,
                e.target_accuracy,
                fmt_opt(&e.cluster_purity),
                fmt_opt(&e.mean_threshold),
                fmt_opt(&e.positive_count),
                fmt_opt(&e.negative_count),
                e.empty_clusters,
                e.loss.adversarial_g,
                e.loss.adversarial_f,
                e.loss.target_discriminative,
                e.loss.source_discriminative,
                e.loss.discriminative,
                e.loss.total_f,
                e.loss.total_g,
            ));
            for &a in &e.per_class_accuracy {
                if a.is_finite() {
                    out.push_str(&format!(",{a}"));
                } else {
                    out.push(',');
                }
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for e in &self.epochs {
            serde_json::to_writer(&mut file, e)?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn write_batches_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(
            "epoch,batch,adversarial_g,adversarial_f,target_discriminative,\
             source_discriminative,discriminative,total_f,total_g,lambda\n",
        );
        for b in &self.batches {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                b.epoch,
                b.batch,
                b.loss.adversarial_g,
                b.loss.adversarial_f,
                b.loss.target_discriminative,
                b.loss.source_discriminative,
                b.loss.discriminative,
                b.loss.total_f,
                b.loss.total_g,
                b.loss.lambda,
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Everything the per-batch observer can see; used by tests and diagnostics.
pub struct BatchSnapshot<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: &'a LossBreakdown,
    /// Normalized class probabilities of the target batch at batch start.
    pub target_class_probs: &'a Array2<f64>,
    /// Auxiliary rows used for this batch.
    pub target_aux: &'a Array2<f64>,
    pub target_weights: &'a [f64],
    pub thresholds: &'a [f64],
    /// Cluster refreshes performed so far in the run.
    pub cluster_refreshes: usize,
}

/// A finished run: final models plus the metrics log.
pub struct TrainOutcome {
    pub models: ModelPair,
    pub metrics: MetricsLog,
}

/// Shuffled index stream that reshuffles when exhausted, so the smaller
/// domain cycles while the larger one is visited once per epoch.
struct IndexCycler {
    order: Vec<usize>,
    pos: usize,
}

impl IndexCycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather_rows(m: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (dst, &src) in rows.iter().enumerate() {
        out.row_mut(dst).assign(&m.row(src));
    }
    out
}

/// Trains the source-only baseline: unweighted cross-entropy on the source
/// domain for `pretrain_epochs`, constant learning rate.
pub fn pretrain_source(config: &RunConfig, data: &DomainPair) -> Result<ModelPair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pair = config.init_models(data.feature_dim(), data.class_count(), &mut rng)?;
    run_source_only(&mut pair, config, data, config.pretrain_epochs, &mut rng)?;
    Ok(pair)
}

/// Source-only cross-entropy epochs at constant learning rate; used for
/// pretraining.
fn run_source_only(
    pair: &mut ModelPair,
    config: &RunConfig,
    data: &DomainPair,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut opt_f = SgdMomentum::new(&pair.extractor.mlp, config.momentum, config.weight_decay);
    let mut opt_g = SgdMomentum::new(&pair.classifier.mlp, config.momentum, config.weight_decay);
    let n = data.source_count();
    let steps = n.div_ceil(config.batch_size);
    let empty_target = Array2::<f64>::zeros((0, data.feature_dim()));
    let empty_aux = Array2::<f64>::zeros((0, data.class_count()));
    let zeros_tau = vec![0.0; data.class_count()];

    for epoch in 1..=epochs {
        let mut cycler = IndexCycler::new(n, rng);
        for batch_idx in 0..steps {
            let idx = cycler.take(config.batch_size.min(n), rng);
            let xs = gather_rows(&data.source_inputs.view(), &idx);
            let ys: Vec<usize> = idx.iter().map(|&i| data.source_labels[i]).collect();
            let ws = vec![1.0; idx.len()];
            let batch = BatchInputs {
                source_x: xs.view(),
                source_labels: &ys,
                target_x: empty_target.view(),
            };
            let ctx = BatchContext {
                source_weights: &ws,
                target_weights: &[],
                target_aux: empty_aux.view(),
                thresholds: &zeros_tau,
                lambda: 1.0,
                adversarial: false,
                target_discriminative: false,
            };
            let bd = batch_loss(pair, &batch, &ctx)?;
            if !bd.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: "source-only objective diverged".into(),
                });
            }
            let mut g = classifier_gradients(pair, &batch, &ctx)?;
            if let Some(max) = config.grad_clip {
                clip_global_norm(&mut g, max);
            }
            opt_g.step(&mut pair.classifier.mlp, &g, lr_for_pretrain(config));
            let mut f = extractor_gradients(pair, &batch, &ctx)?;
            if let Some(max) = config.grad_clip {
                clip_global_norm(&mut f, max);
            }
            opt_f.step(&mut pair.extractor.mlp, &f, config.base_lr);
        }
    }
    Ok(())
}

fn lr_for_pretrain(config: &RunConfig) -> f64 {
    config.base_lr * config.task_lr_multiplier
}

/// Runs the full training procedure on the configured dataset.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let data = config.dataset.materialize()?;
    train_on(config, &data, |_| {})
}

/// Runs training on an already materialized dataset, invoking `observer`
/// after every optimization step.
pub fn train_on(
    config: &RunConfig,
    data: &DomainPair,
    mut observer: impl FnMut(&BatchSnapshot),
) -> Result<TrainOutcome> {
    config.validate()?;
    let k = data.class_count();
    let n_s = data.source_count();
    let n_t = data.target_count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut pair = match &config.init_checkpoint {
        Some(path) => {
            let loaded = ModelPair::load(path)?;
            if loaded.class_count() != k {
                return Err(Error::Config(format!(
                    "checkpoint has {} classes, dataset has {k}",
                    loaded.class_count()
                )));
            }
            loaded
        }
        None => {
            let mut pair = config.init_models(data.feature_dim(), k, &mut rng)?;
            if config.pretrain_epochs > 0 {
                run_source_only(&mut pair, config, data, config.pretrain_epochs, &mut rng)?;
            }
            pair
        }
    };

    let run_dir = match &config.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(
                dir.join("config.json"),
                serde_json::to_string_pretty(config)?,
            )?;
            Some(dir.clone())
        }
        None => None,
    };

    let components = config.variant.components();
    let mut opt_f = SgdMomentum::new(&pair.extractor.mlp, config.momentum, config.weight_decay);
    let mut opt_g = SgdMomentum::new(&pair.classifier.mlp, config.momentum, config.weight_decay);
    let mut metrics = MetricsLog::default();
    let mut selection = SelectionState::warmup(k, n_t);
    let mut aux = Array2::<f64>::zeros((n_t, k));
    let mut aux_initialized = false;
    let mut cluster_refreshes = 0usize;
    let mut best_objective = f64::INFINITY;
    let mut stale_epochs = 0usize;
    let zeros_tau = vec![0.0; k];
    let source_only_weights = vec![1.0; n_s];
    let empty_aux = Array2::<f64>::zeros((0, k));

    let steps_per_epoch = if components.adversarial_f {
        n_s.max(n_t).div_ceil(config.batch_size)
    } else {
        n_s.div_ceil(config.batch_size)
    };

    for epoch in 1..=config.epochs {
        let progress = epoch as f64 / config.epochs as f64;
        let lr = lr_schedule(progress, config.base_lr);
        let lambda = crate::losses::lambda_schedule(progress);

        // Cluster/weight/threshold refresh, once per epoch before any step.
        let cluster = if components.adversarial_f || components.target_discriminative {
            let z_s = pair.extractor.extract_features(&data.source_inputs.view())?;
            let z_t = pair.extractor.extract_features(&data.target_inputs.view())?;
            let p_t = pair.classifier.classify(&z_t.view())?;
            let state = ClusterState::build(
                &z_s.view(),
                &data.source_labels,
                &z_t.view(),
                &p_t.view(),
                config.kernel,
                config.kmeans_max_iter,
            )?;
            cluster_refreshes += 1;
            if !state.empty_clusters.is_empty() {
                log::warn!(
                    "epoch {epoch}: clusters {:?} are empty, centroids carried over",
                    state.empty_clusters
                );
            }
            if !aux_initialized {
                // One-hot initialization from the first cluster assignment;
                // rows are overwritten by the closed-form update before use.
                for (i, &a) in state.assignments.iter().enumerate() {
                    aux[[i, a]] = 1.0;
                }
                aux_initialized = true;
            }
            if components.selection && epoch > config.warmup_epochs {
                selection =
                    SelectionState::update(&state.target_weights, &state.assignments, &selection)?;
            } else {
                // Warm-up (and non-selection variants): thresholds stay zero,
                // every sample positive.
                selection.positive_mask = vec![true; n_t];
            }
            Some(state)
        } else {
            None
        };

        let epoch_aux_mass: Option<Array1<f64>> = if config.aux_full_dataset_mass {
            if let Some(_state) = &cluster {
                let z_t = pair.extractor.extract_features(&data.target_inputs.view())?;
                let p_t = pair.classifier.classify(&z_t.view())?;
                let pp_t = normalize_class_prob_rows(&p_t.view(), k)?;
                Some(pp_t.sum_axis(Axis(0)))
            } else {
                None
            }
        } else {
            None
        };

        let mut source_cycler = IndexCycler::new(n_s, &mut rng);
        let mut target_cycler = IndexCycler::new(n_t, &mut rng);
        let mut epoch_loss_sum = LossBreakdown::default();

        for batch_idx in 0..steps_per_epoch {
            let idx_s = source_cycler.take(config.batch_size.min(n_s), &mut rng);
            let xs = gather_rows(&data.source_inputs.view(), &idx_s);
            let ys: Vec<usize> = idx_s.iter().map(|&i| data.source_labels[i]).collect();

            let (xt, idx_t) = if components.adversarial_f || components.target_discriminative {
                let idx_t = target_cycler.take(config.batch_size.min(n_t), &mut rng);
                (gather_rows(&data.target_inputs.view(), &idx_t), idx_t)
            } else {
                (Array2::zeros((0, data.feature_dim())), Vec::new())
            };

            let ws: Vec<f64> = match &cluster {
                Some(state) => idx_s.iter().map(|&i| state.source_weights[i]).collect(),
                None => idx_s.iter().map(|&i| source_only_weights[i]).collect(),
            };
            let wt: Vec<f64> = match &cluster {
                Some(state) => idx_t.iter().map(|&i| state.target_weights[i]).collect(),
                None => Vec::new(),
            };

            // Auxiliary update for the batch rows (before the parameter steps).
            let (batch_aux, batch_class_probs) = if components.target_discriminative {
                let z_t = pair.extractor.extract_features(&xt.view())?;
                let p_t = pair.classifier.classify(&z_t.view())?;
                let pp_t = normalize_class_prob_rows(&p_t.view(), k)?;
                let mass = match &epoch_aux_mass {
                    Some(m) => m.clone(),
                    None => pp_t.sum_axis(Axis(0)),
                };
                let rows = auxiliary_rows(&pp_t.view(), &mass.view(), config.aux_form)?;
                for (row, &i) in rows.rows().into_iter().zip(&idx_t) {
                    aux.row_mut(i).assign(&row);
                }
                (rows, pp_t)
            } else {
                (empty_aux.clone(), Array2::zeros((0, k)))
            };

            let thresholds: &[f64] = if components.selection {
                &selection.thresholds
            } else {
                &zeros_tau
            };
            let effective_lambda = if components.adversarial_f { lambda } else { 1.0 };

            let batch = BatchInputs {
                source_x: xs.view(),
                source_labels: &ys,
                target_x: xt.view(),
            };
            let ctx = BatchContext {
                source_weights: &ws,
                target_weights: &wt,
                target_aux: batch_aux.view(),
                thresholds,
                lambda: effective_lambda,
                adversarial: components.adversarial_f,
                target_discriminative: components.target_discriminative,
            };

            let bd = batch_loss(&pair, &batch, &ctx)?;
            if !bd.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: format!("{bd:?}"),
                });
            }

            let mut g = classifier_gradients(&pair, &batch, &ctx)?;
            if let Some(max) = config.grad_clip {
                clip_global_norm(&mut g, max);
            }
            opt_g.step(&mut pair.classifier.mlp, &g, lr * config.task_lr_multiplier);
            let mut f = extractor_gradients(&pair, &batch, &ctx)?;
            if let Some(max) = config.grad_clip {
                clip_global_norm(&mut f, max);
            }
            opt_f.step(&mut pair.extractor.mlp, &f, lr);

            accumulate_loss(&mut epoch_loss_sum, &bd);
            metrics.batches.push(BatchRecord {
                epoch,
                batch: batch_idx,
                loss: bd,
            });

            observer(&BatchSnapshot {
                epoch,
                batch: batch_idx,
                loss: metrics.batches.last().map(|b| &b.loss).unwrap(),
                target_class_probs: &batch_class_probs,
                target_aux: &batch_aux,
                target_weights: &wt,
                thresholds,
                cluster_refreshes,
            });
        }

        let mean = mean_loss(&epoch_loss_sum, steps_per_epoch);
        let eval = evaluate(&pair, &data.target_inputs.view(), &data.target_labels)?;
        let purity = cluster.as_ref().map(|state| cluster_purity(state, data));
        let record = EpochRecord {
            epoch,
            lr,
            lambda: mean.lambda,
            target_accuracy: eval.accuracy,
            per_class_accuracy: eval.per_class_accuracy.clone(),
            cluster_purity: purity,
            mean_threshold: components.selection.then(|| selection.mean_threshold()),
            positive_count: cluster.as_ref().map(|_| selection.positive_count()),
            negative_count: cluster.as_ref().map(|_| selection.negative_count()),
            empty_clusters: cluster.as_ref().map(|s| s.empty_clusters.len()).unwrap_or(0),
            loss: mean,
        };
        metrics.epochs.push(record);

        if let (Some(dir), Some(state)) = (&run_dir, &cluster) {
            if config.export_cluster_state {
                state.write_csv(&dir.join("cluster_state"), epoch)?;
            }
        }
        if let Some(dir) = &run_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                pair.save(&dir.join(format!("checkpoint_epoch_{epoch:04}.json")))?;
            }
        }

        if let Some(patience) = config.early_stop_patience {
            let objective = metrics.epochs.last().unwrap().loss.total_g;
            if objective + 1e-9 < best_objective {
                best_objective = objective;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= patience {
                    log::info!("early stop at epoch {epoch} after {patience} stale epochs");
                    break;
                }
            }
        }
    }

    if let Some(dir) = &run_dir {
        pair.save(&dir.join("checkpoint_final.json"))?;
        metrics.write_csv(&dir.join("metrics.csv"))?;
        metrics.write_jsonl(&dir.join("metrics.jsonl"))?;
        metrics.write_batches_csv(&dir.join("batches.csv"))?;
        if config.export_embeddings {
            export_embeddings(&pair, data, config, &dir.join("embeddings.csv"))?;
        }
    }

    Ok(TrainOutcome {
        models: pair,
        metrics,
    })
}

fn accumulate_loss(sum: &mut LossBreakdown, bd: &LossBreakdown) {
    sum.adversarial_g += bd.adversarial_g;
    sum.adversarial_f += bd.adversarial_f;
    sum.target_discriminative += bd.target_discriminative;
    sum.source_discriminative += bd.source_discriminative;
    sum.discriminative += bd.discriminative;
    sum.total_f += bd.total_f;
    sum.total_g += bd.total_g;
    sum.lambda = bd.lambda;
}

fn mean_loss(sum: &LossBreakdown, steps: usize) -> LossBreakdown {
    let n = steps.max(1) as f64;
    LossBreakdown {
        adversarial_g: sum.adversarial_g / n,
        adversarial_f: sum.adversarial_f / n,
        target_discriminative: sum.target_discriminative / n,
        source_discriminative: sum.source_discriminative / n,
        discriminative: sum.discriminative / n,
        total_f: sum.total_f / n,
        total_g: sum.total_g / n,
        lambda: sum.lambda,
    }
}

/// Fraction of labeled target samples whose cluster assignment matches their
/// hidden label (cluster `k` carries class identity `k`).
fn cluster_purity(state: &ClusterState, data: &DomainPair) -> f64 {
    let mut matches = 0usize;
    let mut labeled = 0usize;
    for (assignment, label) in state.assignments.iter().zip(&data.target_labels) {
        if let Some(y) = label {
            labeled += 1;
            if assignment == y {
                matches += 1;
            }
        }
    }
    if labeled == 0 {
        f64::NAN
    } else {
        matches as f64 / labeled as f64
    }
}

/// Writes both domains' embeddings with cluster assignments and weights:
/// `id,domain,label_or_assignment,weight,e0..e{d-1}`. The cluster state is
/// rebuilt from the given models.
pub fn export_embeddings(
    pair: &ModelPair,
    data: &DomainPair,
    config: &RunConfig,
    path: &Path,
) -> Result<()> {
    let z_s = pair.extractor.extract_features(&data.source_inputs.view())?;
    let z_t = pair.extractor.extract_features(&data.target_inputs.view())?;
    let p_t = pair.classifier.classify(&z_t.view())?;
    let state = ClusterState::build(
        &z_s.view(),
        &data.source_labels,
        &z_t.view(),
        &p_t.view(),
        config.kernel,
        config.kmeans_max_iter,
    )?;

    let d = z_s.ncols();
    let mut out = String::from("id,domain,label_or_assignment,weight");
    for j in 0..d {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for i in 0..data.source_count() {
        out.push_str(&format!(
            "{i},source,{},{}",
            data.source_labels[i], state.source_weights[i]
        ));
        for v in z_s.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    for i in 0..data.target_count() {
        out.push_str(&format!(
            "{i},target,{},{}",
            state.assignments[i], state.target_weights[i]
        ));
        for v in z_t.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
