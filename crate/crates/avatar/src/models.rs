//! Feature extractor and joint discriminator/classifier.
//!
//! Both networks are plain multilayer perceptrons over `f64`. The classifier
//! head emits `K + 1` softmax units: `K` class probabilities plus one domain
//! probability in the last slot. Backpropagation is explicit so that every
//! training objective can be checked against finite differences.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer of every network is linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Identity => u,
            Activation::Tanh => u.tanh(),
            Activation::Relu => u.max(0.0),
        }
    }

    /// Derivative with respect to the pre-activation.
    fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (valid: identity, tanh, relu)"
            ))),
        }
    }
}

/// Layer widths and nonlinearity of one MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Tanh,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("network layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// One fully connected layer; `weight` is `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients for one layer, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Per-layer parameter gradients plus the gradient with respect to the input.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LinearGrad>,
    pub input: Array2<f64>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp, batch: usize) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| LinearGrad {
                weight: Array2::zeros(l.weight.raw_dim()),
                bias: Array1::zeros(l.bias.raw_dim()),
            })
            .collect();
        Self {
            layers,
            input: Array2::zeros((batch, mlp.spec.input_dim)),
        }
    }

    /// Accumulates another gradient set (e.g. source batch + target batch).
    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

/// Activations cached during a forward pass, consumed by [`Mlp::backward`].
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
}

/// A multilayer perceptron with linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Initializes weights and biases from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
                Linear { weight, bias }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                what: "network input",
                expected: self.spec.input_dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let u = h.dot(&layer.weight.t()) + &layer.bias;
            inputs.push(h);
            if l < last {
                h = u.mapv(|v| self.spec.activation.apply(v));
            } else {
                h = u.clone();
            }
            preacts.push(u);
        }
        Ok((h, ForwardCache { inputs, preacts }))
    }

    /// Backpropagates `grad_output` (gradient with respect to the linear
    /// output) through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> MlpGrads {
        let last = self.layers.len() - 1;
        let mut layer_grads: Vec<Option<LinearGrad>> = vec![None; self.layers.len()];
        let mut grad_u = grad_output.clone();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                // grad arrives with respect to act(u); fold in the activation.
                grad_u.zip_mut_with(&cache.preacts[l], |g, &u| {
                    *g *= self.spec.activation.derivative(u)
                });
            }
            let grad_w = grad_u.t().dot(&cache.inputs[l]);
            let grad_b = grad_u.sum_axis(Axis(0));
            let grad_input = grad_u.dot(&self.layers[l].weight);
            layer_grads[l] = Some(LinearGrad {
                weight: grad_w,
                bias: grad_b,
            });
            grad_u = grad_input;
        }
        MlpGrads {
            layers: layer_grads.into_iter().map(|g| g.unwrap()).collect(),
            input: grad_u,
        }
    }

    /// All parameters flattened in layer order (weights row-major, then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                what: "flat parameter vector",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    fn named_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{prefix}.layers.{i}.weight"),
                shape: l.weight.shape().to_vec(),
                data: l.weight.iter().copied().collect(),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.layers.{i}.bias"),
                shape: l.bias.shape().to_vec(),
                data: l.bias.to_vec(),
            });
        }
        out
    }

    fn load_named_tensors(&mut self, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let w = find_tensor(tensors, &format!("{prefix}.layers.{i}.weight"))?;
            let b = find_tensor(tensors, &format!("{prefix}.layers.{i}.bias"))?;
            if w.shape != l.weight.shape() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    w.name,
                    w.shape,
                    l.weight.shape()
                )));
            }
            if b.shape != l.bias.shape() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    b.name,
                    b.shape,
                    l.bias.shape()
                )));
            }
            l.weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
                .expect("shape checked above");
            l.bias = Array1::from_vec(b.data.clone());
        }
        Ok(())
    }
}

fn find_tensor<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor `{name}`")))
}

/// Maps inputs to embeddings.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub mlp: Mlp,
}

impl FeatureExtractor {
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::init(spec, rng)?,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Embeds a batch; rows of the result correspond to rows of `batch`.
    pub fn extract_features(&self, batch: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.mlp.forward(batch)
    }
}

/// Softmax head with `K` class units and one domain unit.
#[derive(Debug, Clone)]
pub struct JointDiscriminatorClassifier {
    pub mlp: Mlp,
    class_count: usize,
}

impl JointDiscriminatorClassifier {
    pub fn init(spec: MlpSpec, class_count: usize, rng: &mut impl Rng) -> Result<Self> {
        if spec.output_dim != class_count + 1 {
            return Err(Error::Config(format!(
                "classifier must have {} outputs ({} classes + domain unit), spec has {}",
                class_count + 1,
                class_count,
                spec.output_dim
            )));
        }
        Ok(Self {
            mlp: Mlp::init(spec, rng)?,
            class_count,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Softmax probabilities over the `K + 1` output units, one row per sample.
    pub fn classify(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.classify_cached(z)?.0)
    }

    pub fn classify_cached(&self, z: &ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let (logits, cache) = self.mlp.forward_cached(z)?;
        for (row, r) in logits.rows().into_iter().enumerate() {
            if !r.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "classifier logits",
                    row,
                });
            }
        }
        Ok((softmax_rows(&logits.view()), cache))
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient with respect to logits given the gradient with respect to the
/// softmax output: `ds_j = p_j (dp_j - sum_m p_m dp_m)`.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs
        .rows()
        .into_iter()
        .zip(grad_probs.rows())
        .zip(out.rows_mut())
    {
        let inner: f64 = p.iter().zip(g.iter()).map(|(&pm, &gm)| pm * gm).sum();
        for ((oj, &pj), &gj) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *oj = pj * (gj - inner);
        }
    }
    out
}

/// Renormalizes a `K + 1` probability row over its first `K` entries,
/// dropping the domain unit.
pub fn normalize_class_probs(p: &ArrayView1<f64>, class_count: usize) -> Result<Array1<f64>> {
    if p.len() != class_count + 1 {
        return Err(Error::ShapeMismatch {
            what: "probability row",
            expected: class_count + 1,
            got: p.len(),
        });
    }
    let mass: f64 = p.iter().take(class_count).sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateInput(
            "all class probabilities are zero; cannot renormalize".into(),
        ));
    }
    Ok(p.slice(ndarray::s![..class_count]).mapv(|v| v / mass))
}

/// Row-wise [`normalize_class_probs`]; the error carries the offending row.
pub fn normalize_class_prob_rows(p: &ArrayView2<f64>, class_count: usize) -> Result<Array2<f64>> {
    if p.ncols() != class_count + 1 {
        return Err(Error::ShapeMismatch {
            what: "probability matrix",
            expected: class_count + 1,
            got: p.ncols(),
        });
    }
    let mut out = Array2::zeros((p.nrows(), class_count));
    for (i, row) in p.rows().into_iter().enumerate() {
        let normalized = normalize_class_probs(&row, class_count)
            .map_err(|_| Error::DegenerateInput(format!("row {i} has zero class mass")))?;
        out.row_mut(i).assign(&normalized);
    }
    Ok(out)
}

/// Feature extractor plus classifier head, trained together.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub extractor: FeatureExtractor,
    pub classifier: JointDiscriminatorClassifier,
}

impl ModelPair {
    pub fn init(
        extractor_spec: MlpSpec,
        classifier_spec: MlpSpec,
        class_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if extractor_spec.output_dim != classifier_spec.input_dim {
            return Err(Error::Config(format!(
                "embedding dim {} does not match classifier input dim {}",
                extractor_spec.output_dim, classifier_spec.input_dim
            )));
        }
        Ok(Self {
            extractor: FeatureExtractor::init(extractor_spec, rng)?,
            classifier: JointDiscriminatorClassifier::init(classifier_spec, class_count, rng)?,
        })
    }

    pub fn class_count(&self) -> usize {
        self.classifier.class_count()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.extractor.mlp.named_tensors("extractor");
        tensors.extend(self.classifier.mlp.named_tensors("classifier"));
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            class_count: self.classifier.class_count,
            extractor_spec: self.extractor.mlp.spec.clone(),
            classifier_spec: self.classifier.mlp.spec.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format `{}`",
                ckpt.format
            )));
        }
        // Zero-initialize with a throwaway RNG, then overwrite every tensor.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut pair = ModelPair::init(
            ckpt.extractor_spec.clone(),
            ckpt.classifier_spec.clone(),
            ckpt.class_count,
            &mut rng,
        )?;
        pair.extractor
            .mlp
            .load_named_tensors("extractor", &ckpt.tensors)?;
        pair.classifier
            .mlp
            .load_named_tensors("classifier", &ckpt.tensors)?;
        Ok(pair)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json)?;
        Self::from_checkpoint(&ckpt)
    }
}

const CHECKPOINT_FORMAT: &str = "avatar-checkpoint-v1";

/// Flat named parameter array with shape metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub class_count: usize,
    pub extractor_spec: MlpSpec,
    pub classifier_spec: MlpSpec,
    pub tensors: Vec<NamedTensor>,
}
