//! Softmax surrogate classifier with analytic gradients.
//!
//! The model is a single linear layer plus bias over opaque feature vectors,
//! standing in for a fine-tunable answer model. It exposes:
//!
//! - full and answer-restricted softmax distributions,
//! - cross-entropy loss and the composite training loss
//!   `CE + beta * Phi + lambda * align`, where `Phi` is the KL divergence of
//!   a frozen reference model's distribution against the current model and
//!   `align` compares both models' divergence from the human distribution,
//! - exact analytic gradients of both losses,
//! - deterministic full-batch gradient-descent training,
//! - a bitwise-lossless JSON checkpoint format.

use std::collections::HashMap;
use std::path::Path;

use base64::Engine;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{normalize_answer, AnnotatedSample, AnswerDistribution};
use crate::error::{HadolaError, Result};

/// Loss weights for the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.3,
            lambda: 0.7,
        }
    }
}

impl LossWeights {
    pub const CE_ONLY: LossWeights = LossWeights {
        beta: 0.0,
        lambda: 0.0,
    };
}

/// Decomposed loss value; `total == ce + beta * phi + lambda * align` exactly
/// as composed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub phi: f64,
    pub align: f64,
}

/// Human supervision attached to a training item: the vocab indices of the
/// sample's distinct answers and the human distribution over them.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanSupervision {
    pub support: Vec<usize>,
    pub human_weights: Vec<f64>,
}

/// One training example: features, a target class, and optionally the human
/// answer distribution. Pseudo-labeled items carry no human side; for them
/// the alignment term is zero and the reference-KL term runs over the full
/// vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub features: Vec<f64>,
    pub label: usize,
    pub human: Option<HumanSupervision>,
}

impl TrainItem {
    /// Human-labeled item targeting the sample's majority answer.
    pub fn from_sample(model: &SurrogateModel, sample: &AnnotatedSample) -> Result<Self> {
        let majority = sample.majority_answer().to_string();
        let label = model.class_index(&majority).ok_or_else(|| {
            HadolaError::VocabError(format!("answer `{majority}` not in vocabulary"))
        })?;
        Self::from_sample_with_label(model, sample, label)
    }

    pub fn from_sample_with_label(
        model: &SurrogateModel,
        sample: &AnnotatedSample,
        label: usize,
    ) -> Result<Self> {
        if label >= model.n_classes() {
            return Err(HadolaError::VocabError(format!(
                "label index {label} out of range for {} classes",
                model.n_classes()
            )));
        }
        let support = model.answer_support(sample)?;
        let human = sample.human_distribution();
        Ok(Self {
            features: sample.features.clone(),
            label,
            human: Some(HumanSupervision {
                support,
                human_weights: human.weights().to_vec(),
            }),
        })
    }

    pub fn pseudo(features: Vec<f64>, label: usize) -> Self {
        Self {
            features,
            label,
            human: None,
        }
    }
}

/// Linear-softmax classifier over a fixed answer vocabulary.
///
/// Weights are a row-major `C x (D+1)` matrix; the last column is the bias.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    vocab: Vec<String>,
    dim: usize,
    weights: Vec<f64>,
    seed: u64,
    index: HashMap<String, usize>,
}

impl PartialEq for SurrogateModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.dim == other.dim
            && self.seed == other.seed
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl SurrogateModel {
    /// Fresh model with weights drawn uniformly from [-0.01, 0.01] under the
    /// given seed. Same seed, same weights.
    pub fn init(dim: usize, vocab: Vec<String>, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(HadolaError::ConfigError(
                "feature dimension must be at least 1".to_string(),
            ));
        }
        if vocab.len() < 2 {
            return Err(HadolaError::VocabError(format!(
                "vocabulary needs at least 2 classes, got {}",
                vocab.len()
            )));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, answer) in vocab.iter().enumerate() {
            if normalize_answer(answer) != *answer {
                return Err(HadolaError::VocabError(format!(
                    "vocabulary entry `{answer}` is not in normalized form"
                )));
            }
            if index.insert(answer.clone(), i).is_some() {
                return Err(HadolaError::VocabError(format!(
                    "duplicate vocabulary entry `{answer}`"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..vocab.len() * (dim + 1))
            .map(|_| rng.random_range(-0.01..0.01))
            .collect();
        Ok(Self {
            vocab,
            dim,
            weights,
            seed,
            index,
        })
    }

    /// Model with explicitly provided weights (row-major `C x (D+1)`).
    pub fn from_raw(vocab: Vec<String>, dim: usize, weights: Vec<f64>, seed: u64) -> Result<Self> {
        Self::from_parts(vocab, dim, weights, seed)
    }

    fn from_parts(vocab: Vec<String>, dim: usize, weights: Vec<f64>, seed: u64) -> Result<Self> {
        let mut model = Self::init(dim, vocab, seed)?;
        if weights.len() != model.weights.len() {
            return Err(HadolaError::ConfigError(format!(
                "weight matrix has {} entries, expected {}",
                weights.len(),
                model.weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(HadolaError::ConfigError("non-finite weight".to_string()));
        }
        model.weights = weights;
        Ok(model)
    }

    pub fn n_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    /// Returns a copy with one weight nudged by `delta`. Used by the
    /// finite-difference oracle.
    pub fn perturbed(&self, param: usize, delta: f64) -> Self {
        let mut copy = self.clone();
        copy.weights[param] += delta;
        copy
    }

    pub(crate) fn with_weights(&self, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), self.weights.len());
        let mut copy = self.clone();
        copy.weights = weights;
        copy
    }

    pub fn class_index(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn same_vocab(&self, other: &Self) -> bool {
        self.dim == other.dim && self.vocab == other.vocab
    }

    /// Vocab indices of the sample's distinct answers, first-occurrence
    /// order.
    pub fn answer_support(&self, sample: &AnnotatedSample) -> Result<Vec<usize>> {
        sample
            .distinct_answers()
            .iter()
            .map(|a| {
                self.class_index(a).ok_or_else(|| {
                    HadolaError::VocabError(format!("answer `{a}` not in vocabulary"))
                })
            })
            .collect()
    }

    /// Raw logits `W [x; 1]`.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim {
            return Err(HadolaError::DimensionError {
                expected: self.dim,
                got: features.len(),
            });
        }
        let cols = self.dim + 1;
        let mut out = Vec::with_capacity(self.vocab.len());
        for c in 0..self.vocab.len() {
            let row = &self.weights[c * cols..(c + 1) * cols];
            let mut z = row[self.dim]; // bias
            for (w, x) in row[..self.dim].iter().zip(features) {
                z += w * x;
            }
            out.push(z);
        }
        Ok(out)
    }

    /// Logits and the full softmax distribution.
    pub fn forward(&self, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let logits = self.logits(features)?;
        let dist = softmax_stable(&logits);
        Ok((logits, dist))
    }

    /// Logits restricted to the sample's distinct answers, paired with the
    /// answer strings (first-occurrence order).
    pub fn restricted_logits(&self, sample: &AnnotatedSample) -> Result<(Vec<String>, Vec<f64>)> {
        let answers: Vec<String> = sample
            .distinct_answers()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let logits = self.logits(&sample.features)?;
        let restricted = self
            .answer_support(sample)?
            .into_iter()
            .map(|i| logits[i])
            .collect();
        Ok((answers, restricted))
    }

    /// Softmax over only the sample's distinct answers.
    pub fn restricted_distribution(&self, sample: &AnnotatedSample) -> Result<AnswerDistribution> {
        let (answers, logits) = self.restricted_logits(sample)?;
        AnswerDistribution::new(answers, softmax_stable(&logits))
    }

    /// Full-vocabulary argmax answer; exact logit ties go to the
    /// lexicographically smallest answer.
    pub fn predict_index(&self, features: &[f64]) -> Result<usize> {
        let logits = self.logits(features)?;
        let mut best = 0;
        for i in 1..logits.len() {
            let better = logits[i] > logits[best]
                || (logits[i] == logits[best] && self.vocab[i] < self.vocab[best]);
            if better {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn predict_answer(&self, features: &[f64]) -> Result<&str> {
        Ok(&self.vocab[self.predict_index(features)?])
    }

    // -- checkpoint io ------------------------------------------------------

    pub fn checkpoint_json(&self) -> Result<String> {
        let mut bytes = Vec::with_capacity(self.weights.len() * 8);
        for w in &self.weights {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let file = CheckpointFile {
            vocab: self.vocab.clone(),
            d: self.dim,
            c: self.vocab.len(),
            weights: base64::engine::general_purpose::STANDARD.encode(&bytes),
            seed: self.seed,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.c != file.vocab.len() {
            return Err(HadolaError::ConfigError(format!(
                "checkpoint declares {} classes but lists {} vocabulary entries",
                file.c,
                file.vocab.len()
            )));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(file.weights.as_bytes())
            .map_err(|e| HadolaError::ConfigError(format!("bad weight encoding: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(HadolaError::ConfigError(
                "weight byte length is not a multiple of 8".to_string(),
            ));
        }
        let weights: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_parts(file.vocab, file.d, weights, file.seed)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        crate::cli::write_atomic(path, self.checkpoint_json()?.as_bytes())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    vocab: Vec<String>,
    d: usize,
    c: usize,
    /// base64 of the row-major little-endian f64 bytes; bitwise lossless.
    weights: String,
    seed: u64,
}

/// Sorted union of all distinct answers across the given samples.
pub fn vocab_from_samples<'a>(
    samples: impl IntoIterator<Item = &'a AnnotatedSample>,
) -> Vec<String> {
    let mut set = std::collections::BTreeSet::new();
    for sample in samples {
        for answer in sample.distinct_answers() {
            set.insert(answer.to_string());
        }
    }
    set.into_iter().collect()
}

/// Numerically stable softmax (max subtraction).
pub(crate) fn softmax_stable(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Losses and gradients
// ---------------------------------------------------------------------------

/// Cross-entropy of the full-vocabulary distribution against `label`.
pub fn loss_ce(model: &SurrogateModel, features: &[f64], label: usize) -> Result<f64> {
    if label >= model.n_classes() {
        return Err(HadolaError::VocabError(format!(
            "label index {label} out of range for {} classes",
            model.n_classes()
        )));
    }
    let (_, dist) = model.forward(features)?;
    Ok(-dist[label].ln())
}

/// KL(a || b) over aligned strictly-positive supports, with zero `a` entries
/// contributing zero.
fn kl_terms(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut kl = 0.0;
    for (&ai, &bi) in a.iter().zip(b) {
        if ai > 0.0 {
            kl += ai * (ai.ln() - bi.ln());
        }
    }
    kl
}

struct SupportView<'a> {
    /// vocab indices making up the support
    classes: std::borrow::Cow<'a, [usize]>,
}

fn item_support<'a>(model: &SurrogateModel, item: &'a TrainItem) -> SupportView<'a> {
    match &item.human {
        Some(h) => SupportView {
            classes: std::borrow::Cow::Borrowed(&h.support),
        },
        None => SupportView {
            classes: std::borrow::Cow::Owned((0..model.n_classes()).collect()),
        },
    }
}

/// Composite loss for one item.
///
/// `ce` is the full-vocabulary cross-entropy against the item label. `phi` is
/// KL(reference || model) over the item's answer support (the full vocabulary
/// for pseudo items). `align` is KL(H || model) - KL(H || reference) over the
/// same support when the item carries human supervision, else exactly zero.
pub fn loss_hadola(
    model: &SurrogateModel,
    hu_model: &SurrogateModel,
    item: &TrainItem,
    weights: LossWeights,
) -> Result<LossTerms> {
    if !model.same_vocab(hu_model) {
        return Err(HadolaError::VocabError(
            "model and reference model vocabularies differ".to_string(),
        ));
    }
    let ce = loss_ce(model, &item.features, item.label)?;

    let support = item_support(model, item);
    let model_logits = model.logits(&item.features)?;
    let ref_logits = hu_model.logits(&item.features)?;
    let sub_model: Vec<f64> = support.classes.iter().map(|&c| model_logits[c]).collect();
    let sub_ref: Vec<f64> = support.classes.iter().map(|&c| ref_logits[c]).collect();
    let q = softmax_stable(&sub_model);
    let href = softmax_stable(&sub_ref);

    let phi = kl_terms(&href, &q);
    let align = match &item.human {
        Some(h) => kl_terms(&h.human_weights, &q) - kl_terms(&h.human_weights, &href),
        None => 0.0,
    };
    let total = ce + weights.beta * phi + weights.lambda * align;
    Ok(LossTerms {
        total,
        ce,
        phi,
        align,
    })
}

/// Exact analytic gradient of `loss_hadola` with respect to the model
/// weights, the reference model held constant. Flat row-major layout matching
/// `SurrogateModel::weights`.
pub fn grad_hadola(
    model: &SurrogateModel,
    hu_model: &SurrogateModel,
    item: &TrainItem,
    weights: LossWeights,
) -> Result<Vec<f64>> {
    if !model.same_vocab(hu_model) {
        return Err(HadolaError::VocabError(
            "model and reference model vocabularies differ".to_string(),
        ));
    }
    if item.label >= model.n_classes() {
        return Err(HadolaError::VocabError(format!(
            "label index {} out of range for {} classes",
            item.label,
            model.n_classes()
        )));
    }
    let cols = model.dim() + 1;
    let mut grad = vec![0.0; model.n_params()];
    let (_, p_full) = model.forward(&item.features)?;

    // d(-ln p[y])/d row_c = (p_c - [c == y]) * [x; 1]
    for (c, &p) in p_full.iter().enumerate() {
        let coef = p - if c == item.label { 1.0 } else { 0.0 };
        accumulate_row(&mut grad, c, cols, coef, &item.features);
    }

    let need_phi = weights.beta != 0.0;
    let need_align = weights.lambda != 0.0 && item.human.is_some();
    if need_phi || need_align {
        let support = item_support(model, item);
        let model_logits = model.logits(&item.features)?;
        let sub_model: Vec<f64> = support.classes.iter().map(|&c| model_logits[c]).collect();
        let q = softmax_stable(&sub_model);

        if need_phi {
            let ref_logits = hu_model.logits(&item.features)?;
            let sub_ref: Vec<f64> = support.classes.iter().map(|&c| ref_logits[c]).collect();
            let href = softmax_stable(&sub_ref);
            // d KL(href || q) / d z_i = q_i - href_i on the restricted logits
            for (pos, &c) in support.classes.iter().enumerate() {
                let coef = weights.beta * (q[pos] - href[pos]);
                accumulate_row(&mut grad, c, cols, coef, &item.features);
            }
        }
        if need_align {
            let h = &item.human.as_ref().expect("checked above").human_weights;
            for (pos, &c) in support.classes.iter().enumerate() {
                let coef = weights.lambda * (q[pos] - h[pos]);
                accumulate_row(&mut grad, c, cols, coef, &item.features);
            }
        }
    }
    Ok(grad)
}

/// CE-only gradient (used by the error trigger and threshold estimation).
pub fn grad_ce(model: &SurrogateModel, features: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= model.n_classes() {
        return Err(HadolaError::VocabError(format!(
            "label index {label} out of range for {} classes",
            model.n_classes()
        )));
    }
    let cols = model.dim() + 1;
    let mut grad = vec![0.0; model.n_params()];
    let (_, p) = model.forward(features)?;
    for (c, &pc) in p.iter().enumerate() {
        let coef = pc - if c == label { 1.0 } else { 0.0 };
        accumulate_row(&mut grad, c, cols, coef, features);
    }
    Ok(grad)
}

fn accumulate_row(grad: &mut [f64], class: usize, cols: usize, coef: f64, features: &[f64]) {
    if coef == 0.0 {
        return;
    }
    let row = &mut grad[class * cols..(class + 1) * cols];
    for (g, x) in row[..features.len()].iter_mut().zip(features) {
        *g += coef * x;
    }
    row[features.len()] += coef; // bias
}

/// Sum of per-item gradients (gradient of the summed batch loss).
pub fn grad_batch(
    model: &SurrogateModel,
    hu_model: &SurrogateModel,
    items: &[TrainItem],
    weights: LossWeights,
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; model.n_params()];
    for item in items {
        let g = grad_hadola(model, hu_model, item, weights)?;
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += gi;
        }
    }
    Ok(total)
}

/// Mean CE gradient over a set of (features, label) items.
pub fn mean_ce_grad(model: &SurrogateModel, items: &[TrainItem]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; model.n_params()];
    for item in items {
        let g = grad_ce(model, &item.features, item.label)?;
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += gi;
        }
    }
    let n = items.len().max(1) as f64;
    for t in &mut total {
        *t /= n;
    }
    Ok(total)
}

/// Mean CE loss over a set of items.
pub fn mean_ce_loss(model: &SurrogateModel, items: &[TrainItem]) -> Result<f64> {
    let mut sum = 0.0;
    for item in items {
        sum += loss_ce(model, &item.features, item.label)?;
    }
    Ok(sum / items.len().max(1) as f64)
}

/// Full-batch gradient descent on the composite loss. `hu_model = None`
/// trains on plain cross-entropy (the bootstrap fit and the SFT baselines).
///
/// Items are visited in their given order every epoch; the mean gradient is
/// accumulated in that order, so results are bit-for-bit reproducible.
/// Returns the trained model and the per-epoch mean loss, measured before
/// each update.
pub fn train(
    model: &SurrogateModel,
    items: &[TrainItem],
    hu_model: Option<&SurrogateModel>,
    weights: LossWeights,
    lr: f64,
    epochs: usize,
) -> Result<(SurrogateModel, Vec<f64>)> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(HadolaError::ConfigError(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let mut current = model.clone();
    let mut epoch_losses = Vec::with_capacity(epochs);
    if items.is_empty() {
        return Ok((current, epoch_losses));
    }
    let n = items.len() as f64;
    let eff_weights = if hu_model.is_some() {
        weights
    } else {
        LossWeights::CE_ONLY
    };
    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        let mut grad_sum = vec![0.0; current.n_params()];
        for item in items {
            let reference = hu_model.unwrap_or(&current);
            let (loss, grad) = if hu_model.is_some() {
                let terms = loss_hadola(&current, reference, item, eff_weights)?;
                let g = grad_hadola(&current, reference, item, eff_weights)?;
                (terms.total, g)
            } else {
                let l = loss_ce(&current, &item.features, item.label)?;
                let g = grad_ce(&current, &item.features, item.label)?;
                (l, g)
            };
            loss_sum += loss;
            for (t, gi) in grad_sum.iter_mut().zip(&grad) {
                *t += gi;
            }
        }
        let mean_loss = loss_sum / n;
        if !mean_loss.is_finite() {
            return Err(HadolaError::Diverged {
                epoch,
                round: None,
                loss: mean_loss,
            });
        }
        epoch_losses.push(mean_loss);
        let mut next = current.weights().to_vec();
        for (w, g) in next.iter_mut().zip(&grad_sum) {
            *w -= lr * (g / n);
        }
        current = current.with_weights(next);
    }
    Ok((current, epoch_losses))
}

/// Loss-weight normalization from batch means: `beta0 = a0 / (r0 + eps)`,
/// `lambda0 = a0 / (|c0| + eps)`.
pub fn normalize_weights(a0: f64, r0: f64, c0: f64, eps: f64) -> (f64, f64) {
    (a0 / (r0 + eps), a0 / (c0.abs() + eps))
}

// ---------------------------------------------------------------------------
// Gradient-vector helpers
// ---------------------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; defined as 0 when either norm is below 1e-12.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
