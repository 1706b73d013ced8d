//! Training objectives: weighted adversarial losses, discriminative losses
//! for both domains, the closed-form auxiliary pseudo-label update, and the
//! regularization schedule.
//!
//! All probabilities are clamped to `[1e-7, 1 - 1e-7]` inside logarithms so
//! losses and gradients stay finite. Gradients treat the clamp exactly (zero
//! slope outside the interval) so they agree with finite differences of the
//! implemented loss.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamped(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn log_clamped(p: f64) -> f64 {
    clamped(p).ln()
}

/// Derivative of `log(clamp(p))` with respect to `p`: zero where the clamp is
/// active.
fn dlog_clamped(p: f64) -> f64 {
    if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        1.0 / p
    } else {
        0.0
    }
}

/// Which column-mass scaling the auxiliary update uses. `DivideBySqrtMass`
/// balances cluster sizes (`q ∝ p' / sqrt(column mass)`); the multiplying
/// form is kept for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AuxForm {
    #[default]
    DivideBySqrtMass,
    MultiplyBySqrtMass,
}

impl std::str::FromStr for AuxForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "divide" | "divide-by-sqrt-mass" => Ok(AuxForm::DivideBySqrtMass),
            "multiply" | "multiply-by-sqrt-mass" => Ok(AuxForm::MultiplyBySqrtMass),
            other => Err(Error::Config(format!(
                "unknown auxiliary form `{other}` (valid: divide, multiply)"
            ))),
        }
    }
}

/// Closed-form auxiliary pseudo-label update from the normalized class
/// probabilities of the target batch; column sums are taken over the given
/// rows.
pub fn update_auxiliary_distribution(class_probs: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let mass = class_probs.sum_axis(ndarray::Axis(0));
    auxiliary_rows(class_probs, &mass.view(), AuxForm::DivideBySqrtMass)
}

/// Auxiliary update with explicit per-class mass (used when column sums come
/// from the full dataset rather than the batch). A class with zero mass gets
/// a zero score in every row.
pub fn auxiliary_rows(
    class_probs: &ArrayView2<f64>,
    column_mass: &ArrayView1<f64>,
    form: AuxForm,
) -> Result<Array2<f64>> {
    let (n, k) = class_probs.dim();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "auxiliary update needs at least one row".into(),
        ));
    }
    if column_mass.len() != k {
        return Err(Error::ShapeMismatch {
            what: "auxiliary column mass",
            expected: k,
            got: column_mass.len(),
        });
    }
    let scale: Vec<f64> = column_mass
        .iter()
        .map(|&m| {
            if m <= 0.0 {
                0.0
            } else {
                match form {
                    AuxForm::DivideBySqrtMass => 1.0 / m.sqrt(),
                    AuxForm::MultiplyBySqrtMass => m.sqrt(),
                }
            }
        })
        .collect();

    let mut out = Array2::zeros((n, k));
    for (i, row) in class_probs.rows().into_iter().enumerate() {
        let mut denom = 0.0;
        for (j, &p) in row.iter().enumerate() {
            denom += p * scale[j];
        }
        if denom <= 0.0 {
            return Err(Error::DegenerateInput(format!(
                "auxiliary row {i} has no mass after column scaling"
            )));
        }
        for (j, &p) in row.iter().enumerate() {
            out[[i, j]] = p * scale[j] / denom;
        }
    }
    Ok(out)
}

/// Weighted domain-classification loss for the discriminator: source samples
/// should be predicted as source (domain probability high), target samples as
/// target (domain probability low).
pub fn adversarial_loss_g(
    source_domain_probs: &[f64],
    source_weights: &[f64],
    target_domain_probs: &[f64],
    target_weights: &[f64],
) -> f64 {
    let ns = source_domain_probs.len().max(1) as f64;
    let nt = target_domain_probs.len().max(1) as f64;
    let s: f64 = source_domain_probs
        .iter()
        .zip(source_weights)
        .map(|(&p, &w)| -w * log_clamped(p))
        .sum();
    let t: f64 = target_domain_probs
        .iter()
        .zip(target_weights)
        .map(|(&p, &w)| -w * log_clamped(1.0 - p))
        .sum();
    s / ns + t / nt
}

/// Weighted domain-confusion loss for the feature extractor: the domain
/// labels of [`adversarial_loss_g`] flipped.
pub fn adversarial_loss_f(
    source_domain_probs: &[f64],
    source_weights: &[f64],
    target_domain_probs: &[f64],
    target_weights: &[f64],
) -> f64 {
    let ns = source_domain_probs.len().max(1) as f64;
    let nt = target_domain_probs.len().max(1) as f64;
    let s: f64 = source_domain_probs
        .iter()
        .zip(source_weights)
        .map(|(&p, &w)| -w * log_clamped(1.0 - p))
        .sum();
    let t: f64 = target_domain_probs
        .iter()
        .zip(target_weights)
        .map(|(&p, &w)| -w * log_clamped(p))
        .sum();
    s / ns + t / nt
}

/// Self-supervised target loss with per-cluster selection. For every sample
/// `i` and class `k`: when `w_i >= tau_k` the auxiliary target pulls the
/// class probability up with weight `w_i`; otherwise the sample is pushed
/// away from that class with weight `1 - w_i`. With all thresholds at zero
/// this reduces to the plain weighted soft pseudo-label cross-entropy.
pub fn discriminative_target_loss(
    class_probs: &ArrayView2<f64>,
    aux: &ArrayView2<f64>,
    target_weights: &[f64],
    thresholds: &[f64],
) -> f64 {
    let (n, k) = class_probs.dim();
    if n == 0 {
        return 0.0;
    }
    debug_assert_eq!(aux.dim(), (n, k));
    debug_assert_eq!(target_weights.len(), n);
    debug_assert_eq!(thresholds.len(), k);
    let mut total = 0.0;
    for i in 0..n {
        let w = target_weights[i];
        for j in 0..k {
            let q = aux[[i, j]];
            let p = class_probs[[i, j]];
            if w >= thresholds[j] {
                total -= w * q * log_clamped(p);
            } else {
                total -= (1.0 - w) * q * log_clamped(1.0 - p);
            }
        }
    }
    total / n as f64
}

/// Weighted source cross-entropy on the normalized class probabilities.
pub fn discriminative_source_loss(
    class_probs: &ArrayView2<f64>,
    labels: &[usize],
    source_weights: &[f64],
) -> Result<f64> {
    let (n, k) = class_probs.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            what: "source labels",
            expected: n,
            got: labels.len(),
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let y = labels[i];
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        total -= source_weights[i] * log_clamped(class_probs[[i, y]]);
    }
    Ok(total / n as f64)
}

/// Combines the discriminative and adversarial terms into the two alternating
/// objectives, both scaled by `lambda`.
pub fn total_objectives(
    discriminative: f64,
    adversarial_f: f64,
    adversarial_g: f64,
    lambda: f64,
) -> (f64, f64) {
    (
        lambda * (discriminative + adversarial_f),
        lambda * (discriminative + adversarial_g),
    )
}

/// Regularization schedule `lambda(p) = 2 / (1 + exp(-10 p)) - 1` over
/// training progress `p` in `[0, 1]` (clamped).
pub fn lambda_schedule(progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// Every loss term of one batch, plus the combined objectives.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adversarial_g: f64,
    pub adversarial_f: f64,
    pub target_discriminative: f64,
    pub source_discriminative: f64,
    pub discriminative: f64,
    pub total_f: f64,
    pub total_g: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total_f.is_finite() && self.total_g.is_finite()
    }
}

/// Everything needed to evaluate one batch's objectives: softmax outputs of
/// both domains plus the epoch-level weights, auxiliary rows and thresholds,
/// with variant gating flags.
pub struct LossInputs<'a> {
    pub class_count: usize,
    /// Softmax rows of the source batch, `N_s x (K+1)`.
    pub source_probs: ArrayView2<'a, f64>,
    /// Softmax rows of the target batch, `N_t x (K+1)`.
    pub target_probs: ArrayView2<'a, f64>,
    pub source_labels: &'a [usize],
    pub source_weights: &'a [f64],
    pub target_weights: &'a [f64],
    /// Auxiliary pseudo-label rows for the target batch, `N_t x K`.
    pub target_aux: ArrayView2<'a, f64>,
    /// Per-cluster thresholds (all zero during warm-up).
    pub thresholds: &'a [f64],
    pub lambda: f64,
    /// Enables the adversarial pair of losses.
    pub adversarial: bool,
    /// Enables the self-supervised target loss.
    pub target_discriminative: bool,
}

impl<'a> LossInputs<'a> {
    fn domain_column(probs: &ArrayView2<'a, f64>, k: usize) -> Vec<f64> {
        probs.column(k).to_vec()
    }

    fn source_class_probs(&self) -> Result<Array2<f64>> {
        crate::models::normalize_class_prob_rows(&self.source_probs, self.class_count)
    }

    fn target_class_probs(&self) -> Result<Array2<f64>> {
        crate::models::normalize_class_prob_rows(&self.target_probs, self.class_count)
    }
}

/// Evaluates every active loss term for one batch.
pub fn loss_breakdown(inputs: &LossInputs) -> Result<LossBreakdown> {
    let k = inputs.class_count;
    let source_class = inputs.source_class_probs()?;

    let source_discriminative = discriminative_source_loss(
        &source_class.view(),
        inputs.source_labels,
        inputs.source_weights,
    )?;

    let target_discriminative = if inputs.target_discriminative {
        let target_class = inputs.target_class_probs()?;
        discriminative_target_loss(
            &target_class.view(),
            &inputs.target_aux,
            inputs.target_weights,
            inputs.thresholds,
        )
    } else {
        0.0
    };

    let (adversarial_g, adversarial_f) = if inputs.adversarial {
        let ds = LossInputs::domain_column(&inputs.source_probs, k);
        let dt = LossInputs::domain_column(&inputs.target_probs, k);
        (
            adversarial_loss_g(&ds, inputs.source_weights, &dt, inputs.target_weights),
            adversarial_loss_f(&ds, inputs.source_weights, &dt, inputs.target_weights),
        )
    } else {
        (0.0, 0.0)
    };

    let discriminative = target_discriminative + source_discriminative;
    let (total_f, total_g) =
        total_objectives(discriminative, adversarial_f, adversarial_g, inputs.lambda);
    Ok(LossBreakdown {
        adversarial_g,
        adversarial_f,
        target_discriminative,
        source_discriminative,
        discriminative,
        total_f,
        total_g,
        lambda: inputs.lambda,
    })
}

/// Which alternating objective a gradient is taken for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `lambda (L_dis + L_adv_f)`, minimized over the feature extractor.
    FeatureExtractor,
    /// `lambda (L_dis + L_adv_g)`, minimized over the discriminator.
    Discriminator,
}

/// Gradients of the chosen objective with respect to the softmax outputs of
/// the source and target batches. Downstream, chain through
/// [`crate::models::softmax_backward`] and the network.
pub fn objective_prob_grads(
    inputs: &LossInputs,
    objective: Objective,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let k = inputs.class_count;
    let ns = inputs.source_probs.nrows();
    let nt = inputs.target_probs.nrows();
    let mut grad_s = Array2::<f64>::zeros((ns, k + 1));
    let mut grad_t = Array2::<f64>::zeros((nt, k + 1));

    // Source discriminative term: -(w/Ns) log p'_y, chained through the class
    // renormalization p'_j = p_j / S with S the class mass of the row.
    if ns > 0 {
        let source_class = inputs.source_class_probs()?;
        for i in 0..ns {
            let y = inputs.source_labels[i];
            if y >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let w = inputs.source_weights[i];
            let p_prime_y = source_class[[i, y]];
            let dldp_prime_y = -(w / ns as f64) * dlog_clamped(p_prime_y);
            let class_mass: f64 = inputs.source_probs.row(i).iter().take(k).sum();
            // dL/dp_j = (dL/dp'_y) (delta_jy - p'_y) / S over the class units.
            for j in 0..k {
                let delta = if j == y { 1.0 } else { 0.0 };
                grad_s[[i, j]] += dldp_prime_y * (delta - p_prime_y) / class_mass;
            }
        }
    }

    // Target discriminative term.
    if inputs.target_discriminative && nt > 0 {
        let target_class = inputs.target_class_probs()?;
        for i in 0..nt {
            let w = inputs.target_weights[i];
            let class_mass: f64 = inputs.target_probs.row(i).iter().take(k).sum();
            // First accumulate dL/dp' for the row, then chain through the
            // renormalization in one pass.
            let mut dldp_prime = vec![0.0; k];
            for j in 0..k {
                let q = inputs.target_aux[[i, j]];
                let p = target_class[[i, j]];
                if w >= inputs.thresholds[j] {
                    dldp_prime[j] = -(w / nt as f64) * q * dlog_clamped(p);
                } else {
                    dldp_prime[j] = (1.0 - w) / nt as f64 * q * dlog_clamped(1.0 - p);
                }
            }
            let dot: f64 = dldp_prime
                .iter()
                .enumerate()
                .map(|(m, &g)| g * target_class[[i, m]])
                .sum();
            for j in 0..k {
                grad_t[[i, j]] += (dldp_prime[j] - dot) / class_mass;
            }
        }
    }

    // Adversarial term on the domain unit only.
    if inputs.adversarial {
        for i in 0..ns {
            let w = inputs.source_weights[i];
            let p = inputs.source_probs[[i, k]];
            grad_s[[i, k]] += match objective {
                Objective::Discriminator => -(w / ns as f64) * dlog_clamped(p),
                Objective::FeatureExtractor => w / ns as f64 * dlog_clamped(1.0 - p),
            };
        }
        for i in 0..nt {
            let w = inputs.target_weights[i];
            let p = inputs.target_probs[[i, k]];
            grad_t[[i, k]] += match objective {
                Objective::Discriminator => w / nt as f64 * dlog_clamped(1.0 - p),
                Objective::FeatureExtractor => -(w / nt as f64) * dlog_clamped(p),
            };
        }
    }

    grad_s.mapv_inplace(|v| v * inputs.lambda);
    grad_t.mapv_inplace(|v| v * inputs.lambda);
    Ok((grad_s, grad_t))
}
