//! Counterfactual interventions on the pooled embedding and the
//! causal-effect loss.
//!
//! An intervention replaces the embedding `z` with a counterfactual `z~`
//! whose class-causal content is destroyed: random dimensions zeroed,
//! replaced by their previous neighbour, or the whole vector shuffled. The
//! classifier is applied to both with shared weights; the loss penalizes
//! wrong predictions of the effect logits `y - y~`:
//!
//! ```text
//! loss = CE(y, labels) + lambda * CE(y - y~, labels)
//! ```
//!
//! `y~` is detached: the effect term shapes the model only through `y`, so
//! the counterfactual branch costs one extra classifier forward and zero
//! extra gradient computation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{ExperimentConfig, InterventionMode};
use crate::error::{Error, Result};
use crate::types::{Embedding, Logits};

/// The three concrete intervention kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionKind {
    Zero,
    Replace,
    Shuffle,
}

impl InterventionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InterventionKind::Zero => "zero",
            InterventionKind::Replace => "replace",
            InterventionKind::Shuffle => "shuffle",
        }
    }
}

/// A fully specified intervention. `degree` picks the fraction of touched
/// dimensions for zero/replace (`k = floor(degree * D)` per sample) and is
/// ignored by the full shuffle. The two flags are ablations, both off by
/// default.
#[derive(Debug, Clone, Copy)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    pub degree: f64,
    /// Shuffle permutes only `k` chosen dimensions among themselves.
    pub partial_shuffle: bool,
    /// Shuffle permutes each dimension across the batch instead of within
    /// the sample.
    pub across_batch: bool,
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, degree: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&degree) {
            return Err(Error::InvalidArgument(format!(
                "intervention degree must be in [0, 1], got {degree}"
            )));
        }
        Ok(Self {
            kind,
            degree,
            partial_shuffle: false,
            across_batch: false,
        })
    }
}

/// Counterfactual embedding, same shape as the source.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualEmbedding {
    values: Vec<f64>,
    batch: usize,
    dim: usize,
}

impl CounterfactualEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.values[b * self.dim..(b + 1) * self.dim]
    }

    pub fn as_embedding(&self) -> Result<Embedding> {
        Embedding::new(self.values.clone(), self.batch, self.dim)
    }
}

/// Apply one intervention to every sample of the embedding.
///
/// * `zero` — exactly `k = floor(degree * D)` uniformly chosen dimensions
///   are set to 0 per sample.
/// * `replace` — `k` chosen dimensions take the value of their previous
///   neighbour `(i - 1) mod D`, always read from the original vector
///   (wrap-around at index 0, no cascading).
/// * `shuffle` — each sample's vector is permuted by an independent uniform
///   permutation of all `D` indices.
pub fn intervene<R: Rng>(
    z: &Embedding,
    spec: &InterventionSpec,
    rng: &mut R,
) -> Result<CounterfactualEmbedding> {
    if !(0.0..=1.0).contains(&spec.degree) {
        return Err(Error::InvalidArgument(format!(
            "intervention degree must be in [0, 1], got {}",
            spec.degree
        )));
    }
    let b = z.batch();
    let d = z.dim();
    let k = (spec.degree * d as f64).floor() as usize;
    let mut values = z.values().to_vec();

    match spec.kind {
        InterventionKind::Zero => {
            for bi in 0..b {
                let row = &mut values[bi * d..(bi + 1) * d];
                for idx in rand::seq::index::sample(rng, d, k) {
                    row[idx] = 0.0;
                }
            }
        }
        InterventionKind::Replace => {
            for bi in 0..b {
                let original = z.row(bi);
                let row = &mut values[bi * d..(bi + 1) * d];
                for idx in rand::seq::index::sample(rng, d, k) {
                    row[idx] = original[(idx + d - 1) % d];
                }
            }
        }
        InterventionKind::Shuffle => {
            if spec.across_batch {
                // permute each dimension's column across samples
                let mut order: Vec<usize> = (0..b).collect();
                for dim in 0..d {
                    order.shuffle(rng);
                    for (bi, &src) in order.iter().enumerate() {
                        values[bi * d + dim] = z.values()[src * d + dim];
                    }
                }
            } else if spec.partial_shuffle {
                // permute only k chosen indices among themselves
                for bi in 0..b {
                    let original = z.row(bi);
                    let row = &mut values[bi * d..(bi + 1) * d];
                    let chosen: Vec<usize> =
                        rand::seq::index::sample(rng, d, k).into_iter().collect();
                    let mut to = chosen.clone();
                    to.shuffle(rng);
                    for (&dst, &src) in chosen.iter().zip(to.iter()) {
                        row[dst] = original[src];
                    }
                }
            } else {
                for bi in 0..b {
                    let original = z.row(bi).to_vec();
                    let row = &mut values[bi * d..(bi + 1) * d];
                    let mut order: Vec<usize> = (0..d).collect();
                    order.shuffle(rng);
                    for (dst, &src) in order.iter().enumerate() {
                        row[dst] = original[src];
                    }
                }
            }
        }
    }

    Ok(CounterfactualEmbedding {
        values,
        batch: b,
        dim: d,
    })
}

/// Resolve the configured mode into a concrete spec. `all` draws one of the
/// three kinds uniformly, once per mini-batch. `off` is the caller's
/// responsibility (no counterfactual path is built) and is rejected here.
pub fn select_intervention<R: Rng>(
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<InterventionSpec> {
    let kind = match cfg.intervention_mode {
        InterventionMode::Zero => InterventionKind::Zero,
        InterventionMode::Replace => InterventionKind::Replace,
        InterventionMode::Shuffle => InterventionKind::Shuffle,
        InterventionMode::All => {
            match rng.random_range(0..3u8) {
                0 => InterventionKind::Zero,
                1 => InterventionKind::Replace,
                _ => InterventionKind::Shuffle,
            }
        }
        InterventionMode::Off => {
            return Err(Error::InvalidArgument(
                "intervention_mode = off builds no intervention path".into(),
            ))
        }
    };
    let mut spec = InterventionSpec::new(kind, cfg.intervention_degree)?;
    spec.partial_shuffle = cfg.partial_shuffle;
    spec.across_batch = cfg.shuffle_across_batch;
    Ok(spec)
}

/// Effect logits `y - y~`, elementwise.
pub fn counterfactual_effect(y: &Logits, y_bar: &Logits) -> Result<Logits> {
    if y.batch() != y_bar.batch() {
        return Err(Error::ShapeMismatch(format!(
            "effect logits: batch {} vs {}",
            y.batch(),
            y_bar.batch()
        )));
    }
    let values: Vec<f64> = y
        .values()
        .iter()
        .zip(y_bar.values())
        .map(|(a, b)| a - b)
        .collect();
    Logits::new(values, y.batch())
}

/// Numerically stable `-log softmax(logits)[label]` for one 2-class row.
fn ce_row(row: [f64; 2], label: u8) -> f64 {
    let m = row[0].max(row[1]);
    let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
    lse - row[label as usize]
}

/// Mean cross-entropy of 2-class logits against binary labels.
pub fn cross_entropy(logits: &Logits, labels: &[u8]) -> Result<f64> {
    if logits.batch() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            logits.batch(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(Error::InvalidArgument(format!(
                "labels must be 0 or 1, got {label}"
            )));
        }
        total += ce_row(logits.row(b), label);
    }
    Ok(total / labels.len() as f64)
}

/// The two loss components plus the gradients the optimizer consumes.
/// `grad_y_bar` is identically zero: the counterfactual branch is detached.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub effect_ce: f64,
    /// d total / d y, flattened `[B, 2]`.
    pub grad_y: Vec<f64>,
    /// d total / d y_bar; kept explicit to pin the detachment contract.
    pub grad_y_bar: Vec<f64>,
}

/// `CE(y, labels) + lambda * CE(y - y_bar, labels)` with `y_bar` detached.
pub fn total_loss(y: &Logits, y_bar: &Logits, labels: &[u8], lambda_w: f64) -> Result<f64> {
    Ok(total_loss_with_grad(y, y_bar, labels, lambda_w)?.total)
}

/// As [`total_loss`], also returning the loss components and gradients.
pub fn total_loss_with_grad(
    y: &Logits,
    y_bar: &Logits,
    labels: &[u8],
    lambda_w: f64,
) -> Result<LossBreakdown> {
    if lambda_w < 0.0 || !lambda_w.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "loss weight must be finite and >= 0, got {lambda_w}"
        )));
    }
    let effect = counterfactual_effect(y, y_bar)?;
    let ce = cross_entropy(y, labels)?;
    let effect_ce = cross_entropy(&effect, labels)?;
    let total = ce + lambda_w * effect_ce;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }

    let b = y.batch();
    let inv_b = 1.0 / b as f64;
    let mut grad_y = vec![0.0; 2 * b];
    for (bi, &label) in labels.iter().enumerate() {
        let softmax2 = |row: [f64; 2]| {
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            let s = e0 + e1;
            [e0 / s, e1 / s]
        };
        let p = softmax2(y.row(bi));
        let pe = softmax2(effect.row(bi));
        for cls in 0..2 {
            let onehot = if cls == label as usize { 1.0 } else { 0.0 };
            grad_y[2 * bi + cls] =
                inv_b * ((p[cls] - onehot) + lambda_w * (pe[cls] - onehot));
        }
    }
    Ok(LossBreakdown {
        total,
        ce,
        effect_ce,
        grad_y,
        grad_y_bar: vec![0.0; 2 * b],
    })
}
