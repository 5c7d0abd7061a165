//! The iterative selection / self-labeling / training state machine.
//!
//! A run bootstraps a reference model on a small labeled seed split, derives
//! acceptance thresholds from the seed's low- and medium-uncertainty
//! subsets, then loops: sample unlabeled candidates, keep the ones whose
//! profile divergence from the seed anchor falls inside the threshold
//! window, pseudo-label them with the current model, screen the pairs by
//! gradient consistency and two-checkpoint influence, and fine-tune on the
//! seed plus every pair kept so far with the composite loss.
//!
//! Everything is deterministic given the config seed: the seed/pool split,
//! candidate draws, training order, and evaluation all derive from one
//! counter-based RNG, and per-sample scoring reduces in dataset order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{stratify, AnnotatedSample, HuLevel};
use crate::error::{HadolaError, Result};
use crate::metrics::{
    canonical_profile, evaluate, kl_divergence, mean_profile, profile_kl, profile_l1,
    ConfidenceProfile, EvalReport,
};
use crate::model::{
    cosine, dot, grad_ce, loss_hadola, mean_ce_grad, normalize_weights, train, vocab_from_samples,
    LossWeights, SurrogateModel, TrainItem,
};

/// Canonical profile length; matches the number of annotators per sample.
pub const PROFILE_LEN: usize = 10;

/// Thresholds computed once on the seed split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Mean human-vs-reference KL over the low-uncertainty seed subset.
    pub tau1: f64,
    /// Same over the medium-uncertainty subset.
    pub tau2: f64,
    /// Population standard deviation of the pooled per-sample KL values.
    pub sigma: f64,
    /// Mean canonical profile of the reference model over low + medium.
    pub h_omega: ConfidenceProfile,
    /// Mean gradient-consistency score over low + medium.
    pub tau_g: f64,
    /// Mean two-checkpoint influence score over low + medium.
    pub tau_t: f64,
}

impl Thresholds {
    pub fn window(&self) -> [f64; 2] {
        [self.tau1 - self.sigma, self.tau2 + self.sigma]
    }
}

/// Loss-weight selection: fixed values, or scales applied to the
/// batch-normalized weights measured at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum WeightSpec {
    Fixed { beta: f64, lambda: f64 },
    Normalized { beta_scale: f64, lambda_scale: f64 },
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self::Fixed {
            beta: 0.3,
            lambda: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Fraction of the dataset labeled as the seed split.
    pub seed_fraction: f64,
    /// Fraction of the initial unlabeled pool sampled per round.
    pub per_round_fraction: f64,
    /// Number of selection/training rounds.
    pub rounds: usize,
    pub weights: WeightSpec,
    pub lr: f64,
    /// Gradient-descent epochs per training call.
    pub epochs: usize,
    /// Fraction of the seed held out for the influence validation loss.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Collect per-sample audit records and assert the retention bound.
    pub audit: bool,
    /// Measure per-round wall time. Off by default so that identical
    /// invocations produce byte-identical history files.
    pub timing: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed_fraction: 0.05,
            per_round_fraction: 0.01,
            rounds: 10,
            weights: WeightSpec::default(),
            lr: 0.1,
            epochs: 100,
            validation_fraction: 0.2,
            seed: 0,
            audit: false,
            timing: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| -> Result<()> {
            if v.is_nan() || v <= 0.0 || v >= 1.0 {
                return Err(HadolaError::ConfigError(format!(
                    "{name} must lie strictly between 0 and 1, got {v}"
                )));
            }
            Ok(())
        };
        frac("seed_fraction", self.seed_fraction)?;
        frac("per_round_fraction", self.per_round_fraction)?;
        frac("validation_fraction", self.validation_fraction)?;
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(HadolaError::ConfigError(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        match self.weights {
            WeightSpec::Fixed { beta, lambda } => {
                if beta.is_nan() || beta <= 0.0 || lambda.is_nan() || lambda <= 0.0 {
                    return Err(HadolaError::ConfigError(format!(
                        "loss weights must be positive, got beta={beta}, lambda={lambda}"
                    )));
                }
            }
            WeightSpec::Normalized {
                beta_scale,
                lambda_scale,
            } => {
                if beta_scale.is_nan()
                    || beta_scale <= 0.0
                    || lambda_scale.is_nan()
                    || lambda_scale <= 0.0
                {
                    return Err(HadolaError::ConfigError(
                        "weight scales must be positive".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A kept pseudo-labeled pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoPair {
    pub id: String,
    pub features: Vec<f64>,
    pub pseudo_label: usize,
    pub birth_round: usize,
    pub s_g: f64,
    pub s_tracin: f64,
}

/// A pseudo pair before the error trigger has screened it.
#[derive(Debug, Clone)]
pub struct PendingPair {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    pub round: usize,
    pub hu_model: SurrogateModel,
    pub model: SurrogateModel,
    /// Snapshot of the initial-round parameters (the frozen reference).
    pub theta0: SurrogateModel,
    pub seed_train: Vec<AnnotatedSample>,
    pub seed_val: Vec<AnnotatedSample>,
    pub pool: Vec<AnnotatedSample>,
    pub pseudo: Vec<PseudoPair>,
    pub thresholds: Thresholds,
    pub weights: LossWeights,
    pub candidates_per_round: usize,
    seed_train_items: Vec<TrainItem>,
    seed_val_items: Vec<TrainItem>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub n_candidates: usize,
    pub n_retained: usize,
    pub n_kept: usize,
    pub tau_window: [f64; 2],
    pub eval: EvalReport,
    pub wall_ms: Option<u64>,
    pub pseudo_pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub config: PipelineConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub vocab_len: usize,
    pub resolved_weights: LossWeights,
    pub thresholds: Thresholds,
    /// Evaluation of the frozen reference model before any rounds.
    pub bootstrap_eval: EvalReport,
    pub rounds: Vec<RoundRecord>,
}

impl History {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn final_eval(&self) -> &EvalReport {
        self.rounds.last().map_or(&self.bootstrap_eval, |r| &r.eval)
    }
}

/// Per-sample audit line, one JSON object per decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum AuditRecord {
    Discriminate {
        round: usize,
        id: String,
        kl_u: f64,
        decision: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        l1_to_anchor: Option<f64>,
    },
    ErrorTrigger {
        round: usize,
        id: String,
        s_g: f64,
        s_tracin: f64,
        decision: String,
    },
}

pub fn audit_to_jsonl(records: &[AuditRecord]) -> Result<String> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

pub struct RunOutput {
    pub model: SurrogateModel,
    pub history: History,
    pub audit: Vec<AuditRecord>,
}

// ---------------------------------------------------------------------------
// Stage implementations
// ---------------------------------------------------------------------------

/// Seed/pool split shared by the pipeline and the baselines: shuffle under
/// the config seed, take `round(seed_fraction * n)` as the seed.
pub fn split_seed_pool(
    dataset: &[AnnotatedSample],
    config: &PipelineConfig,
) -> Result<(Vec<AnnotatedSample>, Vec<AnnotatedSample>, ChaCha8Rng)> {
    if dataset.is_empty() {
        return Err(HadolaError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffled = dataset.to_vec();
    shuffled.shuffle(&mut rng);
    let n_seed =
        ((dataset.len() as f64 * config.seed_fraction).round() as usize).clamp(1, dataset.len());
    let pool = shuffled.split_off(n_seed);
    Ok((shuffled, pool, rng))
}

/// Mean/window statistics behind the threshold computation: tau1 and tau2
/// are the per-stratum means; sigma is the population standard deviation of
/// the pooled values.
pub fn window_stats(low_kls: &[f64], medium_kls: &[f64]) -> (f64, f64, f64) {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let tau1 = mean(low_kls);
    let tau2 = mean(medium_kls);
    let pooled: Vec<f64> = low_kls.iter().chain(medium_kls).copied().collect();
    let pooled_mean = mean(&pooled);
    let variance = pooled
        .iter()
        .map(|x| (x - pooled_mean).powi(2))
        .sum::<f64>()
        / pooled.len() as f64;
    (tau1, tau2, variance.sqrt())
}

/// Two-checkpoint influence score: `<g0, v0> + <gt, vt>`.
pub fn tracin_score(g0: &[f64], gt: &[f64], val_grad0: &[f64], val_gradt: &[f64]) -> f64 {
    dot(g0, val_grad0) + dot(gt, val_gradt)
}

fn majority_items(model: &SurrogateModel, samples: &[AnnotatedSample]) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|s| TrainItem::from_sample(model, s))
        .collect()
}

/// Compute all thresholds once from the seed split under the frozen
/// reference model. The gradient-based thresholds use the seed's human
/// majority labels; the reference gradient comes from the training portion
/// only and the validation gradient from the held-out portion only.
pub fn compute_thresholds(
    hu_model: &SurrogateModel,
    seed_train: &[AnnotatedSample],
    seed_val: &[AnnotatedSample],
) -> Result<Thresholds> {
    let all_seed: Vec<AnnotatedSample> =
        seed_train.iter().chain(seed_val.iter()).cloned().collect();
    let strata = stratify(&all_seed);
    if strata.low.is_empty() || strata.medium.is_empty() {
        return Err(HadolaError::SeedStratumError(format!(
            "need at least one low and one medium sample in the seed, got {} low / {} medium",
            strata.low.len(),
            strata.medium.len()
        )));
    }

    let kl_to_human = |idx: &[usize]| -> Result<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                let s = &all_seed[i];
                let h = s.human_distribution();
                let p = hu_model.restricted_distribution(s)?;
                kl_divergence(&h, &p)
            })
            .collect()
    };
    let low_kls = kl_to_human(&strata.low)?;
    let medium_kls = kl_to_human(&strata.medium)?;
    let (mut tau1, mut tau2, sigma) = window_stats(&low_kls, &medium_kls);
    if tau1 > tau2 {
        eprintln!(
            "warning: seed produced tau1 {tau1} > tau2 {tau2}; swapping to keep the window ordered"
        );
        std::mem::swap(&mut tau1, &mut tau2);
    }

    let profiles: Vec<ConfidenceProfile> = strata
        .low
        .iter()
        .chain(strata.medium.iter())
        .map(|&i| {
            hu_model
                .restricted_distribution(&all_seed[i])
                .map(|d| canonical_profile(&d, PROFILE_LEN))
        })
        .collect::<Result<_>>()?;
    let h_omega = mean_profile(&profiles);

    let train_items = majority_items(hu_model, seed_train)?;
    let val_items = majority_items(hu_model, seed_val)?;
    let g_ref = mean_ce_grad(hu_model, &train_items)?;
    let val_grad = mean_ce_grad(hu_model, &val_items)?;

    let mut s_g_sum = 0.0;
    let mut s_tr_sum = 0.0;
    let mut n = 0usize;
    for &i in strata.low.iter().chain(strata.medium.iter()) {
        let item = TrainItem::from_sample(hu_model, &all_seed[i])?;
        let g = grad_ce(hu_model, &item.features, item.label)?;
        s_g_sum += cosine(&g, &g_ref);
        // theta0 and theta_t coincide at threshold time
        s_tr_sum += tracin_score(&g, &g, &val_grad, &val_grad);
        n += 1;
    }

    Ok(Thresholds {
        tau1,
        tau2,
        sigma,
        h_omega,
        tau_g: s_g_sum / n as f64,
        tau_t: s_tr_sum / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminateRecord {
    pub id: String,
    pub kl_u: f64,
    pub retained: bool,
    pub l1_to_anchor: Option<f64>,
}

/// Profile divergence of the model's full-vocabulary distribution on an
/// unlabeled sample from the seed anchor profile.
pub fn candidate_kl(
    model: &SurrogateModel,
    sample: &AnnotatedSample,
    thresholds: &Thresholds,
) -> Result<f64> {
    let (_, dist) = model.forward(&sample.features)?;
    let profile = ConfidenceProfile::from_weights(&dist, PROFILE_LEN);
    Ok(profile_kl(&thresholds.h_omega, &profile))
}

/// Keep the candidates whose divergence falls inside the closed window
/// `[tau1 - sigma, tau2 + sigma]`. Returns the retained indices plus one
/// record per candidate. In audit mode every retained candidate is also
/// checked against the L1 retention bound `sqrt(2 (tau2 + sigma))`.
pub fn discriminate(
    model: &SurrogateModel,
    candidates: &[AnnotatedSample],
    thresholds: &Thresholds,
    audit: bool,
) -> Result<(Vec<usize>, Vec<DiscriminateRecord>)> {
    let [lo, hi] = thresholds.window();
    let records: Vec<DiscriminateRecord> = candidates
        .par_iter()
        .map(|sample| -> Result<DiscriminateRecord> {
            let (_, dist) = model.forward(&sample.features)?;
            let profile = ConfidenceProfile::from_weights(&dist, PROFILE_LEN);
            let kl_u = profile_kl(&thresholds.h_omega, &profile);
            let retained = kl_u >= lo && kl_u <= hi;
            let l1_to_anchor = (audit && retained).then(|| {
                let l1 = profile_l1(&profile, &thresholds.h_omega);
                assert!(
                    l1 <= (2.0 * hi).sqrt() + 1e-9,
                    "retained sample {} violates the L1 retention bound: {l1} > sqrt(2*{hi})",
                    sample.id
                );
                l1
            });
            Ok(DiscriminateRecord {
                id: sample.id.clone(),
                kl_u,
                retained,
                l1_to_anchor,
            })
        })
        .collect::<Result<_>>()?;
    let retained = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.retained.then_some(i))
        .collect();
    Ok((retained, records))
}

/// Pseudo-label retained samples with the current model's full-vocabulary
/// argmax (ties to the lexicographically smallest answer).
pub fn self_annotate(
    model: &SurrogateModel,
    retained: &[AnnotatedSample],
) -> Result<Vec<PendingPair>> {
    retained
        .iter()
        .map(|s| {
            Ok(PendingPair {
                id: s.id.clone(),
                features: s.features.clone(),
                label: model.predict_index(&s.features)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub id: String,
    pub s_g: f64,
    pub s_tracin: f64,
    pub kept: bool,
}

/// Screen pending pairs: keep a pair only when its gradient direction agrees
/// with the seed reference gradient (`s_g >= tau_g`) and its two-checkpoint
/// influence stays below the seed mean (`s_tracin <= tau_t`). Gradients here
/// are plain cross-entropy gradients.
pub fn error_trigger(
    pairs: &[PendingPair],
    theta0: &SurrogateModel,
    theta_t: &SurrogateModel,
    seed_train_items: &[TrainItem],
    val_items: &[TrainItem],
    thresholds: &Thresholds,
    birth_round: usize,
) -> Result<(Vec<PseudoPair>, Vec<TriggerRecord>)> {
    let g_ref = mean_ce_grad(theta_t, seed_train_items)?;
    let val_grad0 = mean_ce_grad(theta0, val_items)?;
    let val_gradt = mean_ce_grad(theta_t, val_items)?;

    let scored: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|pair| -> Result<(f64, f64)> {
            let gt = grad_ce(theta_t, &pair.features, pair.label)?;
            let g0 = grad_ce(theta0, &pair.features, pair.label)?;
            let s_g = cosine(&gt, &g_ref);
            let s_tr = tracin_score(&g0, &gt, &val_grad0, &val_gradt);
            Ok((s_g, s_tr))
        })
        .collect::<Result<_>>()?;

    let mut kept = Vec::new();
    let mut records = Vec::with_capacity(pairs.len());
    for (pair, &(s_g, s_tracin)) in pairs.iter().zip(&scored) {
        let keep = s_g >= thresholds.tau_g && s_tracin <= thresholds.tau_t;
        records.push(TriggerRecord {
            id: pair.id.clone(),
            s_g,
            s_tracin,
            kept: keep,
        });
        if keep {
            kept.push(PseudoPair {
                id: pair.id.clone(),
                features: pair.features.clone(),
                pseudo_label: pair.label,
                birth_round,
                s_g,
                s_tracin,
            });
        }
    }
    Ok((kept, records))
}

/// Split the dataset, bootstrap the reference model on the seed's training
/// portion with plain cross-entropy, and compute the thresholds once.
pub fn initialize(
    dataset: &[AnnotatedSample],
    vocab: Vec<String>,
    config: &PipelineConfig,
) -> Result<PipelineState> {
    config.validate()?;
    let (seed, pool, rng) = split_seed_pool(dataset, config)?;

    let n_val = ((seed.len() as f64 * config.validation_fraction).round() as usize)
        .clamp(1, seed.len().saturating_sub(1).max(1));
    if seed.len() < 2 || n_val >= seed.len() {
        return Err(HadolaError::ConfigError(format!(
            "seed split of {} samples cannot provide both a training and a validation portion",
            seed.len()
        )));
    }
    let strata = stratify(&seed);
    if strata.low.is_empty() || strata.medium.is_empty() {
        return Err(HadolaError::SeedStratumError(format!(
            "seed split has {} low / {} medium samples; both strata are required",
            strata.low.len(),
            strata.medium.len()
        )));
    }

    let n_train = seed.len() - n_val;
    let seed_train: Vec<AnnotatedSample> = seed[..n_train].to_vec();
    let seed_val: Vec<AnnotatedSample> = seed[n_train..].to_vec();

    let dim = dataset[0].features.len();
    let m_init = SurrogateModel::init(dim, vocab, config.seed)?;
    let seed_items = majority_items(&m_init, &seed)?;
    let seed_train_items = majority_items(&m_init, &seed_train)?;
    let seed_val_items = majority_items(&m_init, &seed_val)?;

    // bootstrap fit on the full seed split: plain cross-entropy, no
    // reference model exists yet. The budget matches the seed-only SFT
    // baseline, so the frozen reference *is* that baseline; the rounds then
    // measure what selection and self-labeling add on top.
    let (hu_model, _) = train(
        &m_init,
        &seed_items,
        None,
        LossWeights::CE_ONLY,
        config.lr,
        config.epochs * (config.rounds + 1),
    )?;

    let weights = resolve_weights(config, &m_init, &hu_model, &seed_train_items)?;
    let thresholds = compute_thresholds(&hu_model, &seed_train, &seed_val)?;
    let candidates_per_round = (pool.len() as f64 * config.per_round_fraction).ceil() as usize;

    Ok(PipelineState {
        round: 0,
        model: hu_model.clone(),
        theta0: hu_model.clone(),
        hu_model,
        seed_train,
        seed_val,
        pool,
        pseudo: Vec::new(),
        thresholds,
        weights,
        candidates_per_round,
        seed_train_items,
        seed_val_items,
        rng,
    })
}

/// Fixed weights pass through; normalized weights scale the ratios of the
/// loss-term batch means, measured with the untrained model against the
/// frozen reference.
fn resolve_weights(
    config: &PipelineConfig,
    m_init: &SurrogateModel,
    hu_model: &SurrogateModel,
    items: &[TrainItem],
) -> Result<LossWeights> {
    match config.weights {
        WeightSpec::Fixed { beta, lambda } => Ok(LossWeights { beta, lambda }),
        WeightSpec::Normalized {
            beta_scale,
            lambda_scale,
        } => {
            let probe = LossWeights {
                beta: 1.0,
                lambda: 1.0,
            };
            let mut a0 = 0.0;
            let mut r0 = 0.0;
            let mut c0 = 0.0;
            for item in items {
                let terms = loss_hadola(m_init, hu_model, item, probe)?;
                a0 += terms.ce;
                r0 += terms.phi;
                c0 += terms.align;
            }
            let n = items.len().max(1) as f64;
            let (beta0, lambda0) = normalize_weights(a0 / n, r0 / n, c0 / n, 1e-8);
            Ok(LossWeights {
                beta: beta_scale * beta0,
                lambda: lambda_scale * lambda0,
            })
        }
    }
}

fn sample_candidate_indices(rng: &mut ChaCha8Rng, pool_len: usize, count: usize) -> Vec<usize> {
    let count = count.min(pool_len);
    let mut idx: Vec<usize> = (0..pool_len).collect();
    for j in 0..count {
        let pick = rng.random_range(j..pool_len);
        idx.swap(j, pick);
    }
    idx.truncate(count);
    idx
}

fn remove_indices(pool: &mut Vec<AnnotatedSample>, indices: &[usize]) -> Vec<AnnotatedSample> {
    let mut sorted: Vec<usize> = indices.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut taken: Vec<(usize, AnnotatedSample)> = sorted
        .into_iter()
        .map(|i| (i, pool.swap_remove(i)))
        .collect();
    // return in the order the indices were drawn
    let mut out = Vec::with_capacity(indices.len());
    for &want in indices {
        let pos = taken
            .iter()
            .position(|(i, _)| *i == want)
            .expect("index drawn once");
        out.push(taken.swap_remove(pos).1);
    }
    out
}

/// Execute the full pipeline: initialization plus `rounds` iterations of
/// candidate selection, self-annotation, pair screening and training. The
/// evaluation set is held out from training entirely and scored after the
/// bootstrap fit and after every round.
pub fn run(
    dataset: &[AnnotatedSample],
    eval_set: &[AnnotatedSample],
    config: &PipelineConfig,
) -> Result<RunOutput> {
    if eval_set.is_empty() {
        return Err(HadolaError::EmptyDataset);
    }
    let vocab = vocab_from_samples(dataset.iter().chain(eval_set.iter()));
    let mut state = initialize(dataset, vocab, config)?;
    let bootstrap_eval = evaluate(&state.hu_model, eval_set)?;

    let mut rounds = Vec::with_capacity(config.rounds);
    let mut audit: Vec<AuditRecord> = Vec::new();

    for t in 1..=config.rounds {
        let started = std::time::Instant::now();
        state.round = t;

        let drawn =
            sample_candidate_indices(&mut state.rng, state.pool.len(), state.candidates_per_round);
        let candidates = remove_indices(&mut state.pool, &drawn);

        let (retained_idx, disc_records) =
            discriminate(&state.model, &candidates, &state.thresholds, config.audit)?;
        if config.audit {
            for r in &disc_records {
                audit.push(AuditRecord::Discriminate {
                    round: t,
                    id: r.id.clone(),
                    kl_u: r.kl_u,
                    decision: if r.retained { "retained" } else { "discarded" }.to_string(),
                    l1_to_anchor: r.l1_to_anchor,
                });
            }
        }

        let mut retained: Vec<AnnotatedSample> = Vec::with_capacity(retained_idx.len());
        {
            let retained_set: std::collections::HashSet<usize> =
                retained_idx.iter().copied().collect();
            for (i, sample) in candidates.into_iter().enumerate() {
                if retained_set.contains(&i) {
                    retained.push(sample);
                } else {
                    // discarded candidates return to the pool for later rounds
                    state.pool.push(sample);
                }
            }
        }

        let pairs = self_annotate(&state.model, &retained)?;
        let (kept, trigger_records) = error_trigger(
            &pairs,
            &state.theta0,
            &state.model,
            &state.seed_train_items,
            &state.seed_val_items,
            &state.thresholds,
            t,
        )?;
        if config.audit {
            for r in &trigger_records {
                audit.push(AuditRecord::ErrorTrigger {
                    round: t,
                    id: r.id.clone(),
                    s_g: r.s_g,
                    s_tracin: r.s_tracin,
                    decision: if r.kept { "kept" } else { "rejected" }.to_string(),
                });
            }
        }

        // rejected pairs release their samples back to the pool; kept pairs
        // consume theirs
        let kept_ids: std::collections::HashSet<&str> =
            kept.iter().map(|p| p.id.as_str()).collect();
        for sample in retained {
            if !kept_ids.contains(sample.id.as_str()) {
                state.pool.push(sample);
            }
        }
        let n_retained = pairs.len();
        let n_kept = kept.len();
        debug_assert!(
            kept.iter()
                .all(|p| state.pseudo.iter().all(|q| q.id != p.id)),
            "pseudo pool ids must stay unique"
        );
        state.pseudo.extend(kept);

        let mut items = state.seed_train_items.clone();
        items.extend(
            state
                .pseudo
                .iter()
                .map(|p| TrainItem::pseudo(p.features.clone(), p.pseudo_label)),
        );
        let (next_model, _) = train(
            &state.model,
            &items,
            Some(&state.hu_model),
            state.weights,
            config.lr,
            config.epochs,
        )
        .map_err(|e| match e {
            HadolaError::Diverged { epoch, loss, .. } => HadolaError::Diverged {
                epoch,
                round: Some(t),
                loss,
            },
            other => other,
        })?;
        state.model = next_model;

        let eval = evaluate(&state.model, eval_set)?;
        rounds.push(RoundRecord {
            t,
            n_candidates: drawn.len(),
            n_retained,
            n_kept,
            tau_window: state.thresholds.window(),
            eval,
            wall_ms: config.timing.then(|| started.elapsed().as_millis() as u64),
            pseudo_pool: state.pseudo.len(),
        });
    }

    let history = History {
        config: config.clone(),
        n_train: dataset.len(),
        n_eval: eval_set.len(),
        vocab_len: state.model.vocab().len(),
        resolved_weights: state.weights,
        thresholds: state.thresholds.clone(),
        bootstrap_eval,
        rounds,
    };
    Ok(RunOutput {
        model: state.model,
        history,
        audit,
    })
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Plain cross-entropy training of a fresh model on an explicit sample list,
/// evaluated on the held-out set. The vocabulary must cover both.
pub fn train_ce_arm(
    vocab: Vec<String>,
    train_samples: &[AnnotatedSample],
    eval_set: &[AnnotatedSample],
    config: &PipelineConfig,
    epochs: usize,
) -> Result<(SurrogateModel, EvalReport)> {
    if train_samples.is_empty() || eval_set.is_empty() {
        return Err(HadolaError::EmptyDataset);
    }
    let dim = train_samples[0].features.len();
    let m_init = SurrogateModel::init(dim, vocab, config.seed)?;
    let items = majority_items(&m_init, train_samples)?;
    let (model, _) = train(
        &m_init,
        &items,
        None,
        LossWeights::CE_ONLY,
        config.lr,
        epochs,
    )?;
    let report = evaluate(&model, eval_set)?;
    Ok((model, report))
}

/// Cross-entropy-only baseline on a labeled fraction of the dataset,
/// optionally restricted to one HU stratum. `fraction = seed_fraction`
/// trains on exactly the pipeline's seed split; `fraction = 1` is the
/// full-data arm. The epoch budget matches a full pipeline run
/// (`epochs * (rounds + 1)`).
pub fn baseline_sft(
    dataset: &[AnnotatedSample],
    eval_set: &[AnnotatedSample],
    config: &PipelineConfig,
    fraction: f64,
    stratum: Option<HuLevel>,
) -> Result<(SurrogateModel, EvalReport)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HadolaError::ConfigError(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let vocab = vocab_from_samples(dataset.iter().chain(eval_set.iter()));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffled = dataset.to_vec();
    shuffled.shuffle(&mut rng);
    if let Some(level) = stratum {
        shuffled.retain(|s| s.hu_level() == level);
        if shuffled.is_empty() {
            return Err(HadolaError::SeedStratumError(format!(
                "dataset has no {} samples",
                level.as_str()
            )));
        }
    }
    let n = ((shuffled.len() as f64 * fraction).round() as usize).clamp(1, shuffled.len());
    shuffled.truncate(n);
    let epochs = config.epochs * (config.rounds + 1);
    train_ce_arm(vocab, &shuffled, eval_set, config, epochs)
}

/// Least-confidence selection baseline under the pipeline budget: the same
/// seed split, then `rounds` iterations that label the candidates the model
/// is least sure about (lowest max probability) with their human majority
/// answers and fine-tune with cross-entropy. No pseudo-labels, no screening.
pub fn baseline_active_learning(
    dataset: &[AnnotatedSample],
    eval_set: &[AnnotatedSample],
    config: &PipelineConfig,
) -> Result<(SurrogateModel, EvalReport)> {
    config.validate()?;
    if eval_set.is_empty() {
        return Err(HadolaError::EmptyDataset);
    }
    let vocab = vocab_from_samples(dataset.iter().chain(eval_set.iter()));
    let (seed, mut pool, mut rng) = split_seed_pool(dataset, config)?;
    let dim = dataset[0].features.len();
    let m_init = SurrogateModel::init(dim, vocab, config.seed)?;
    let mut labeled = majority_items(&m_init, &seed)?;
    let (mut model, _) = train(
        &m_init,
        &labeled,
        None,
        LossWeights::CE_ONLY,
        config.lr,
        config.epochs,
    )?;

    let per_round = (pool.len() as f64 * config.per_round_fraction).ceil() as usize;
    for _ in 1..=config.rounds {
        let count = per_round.min(pool.len());
        if count > 0 {
            // deterministic rng tie-break: shuffle an index view, then
            // stable-sort by confidence
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            let confidences: Vec<f64> = pool
                .par_iter()
                .map(|s| {
                    let (_, dist) = model.forward(&s.features)?;
                    Ok(dist.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                })
                .collect::<Result<_>>()?;
            order.sort_by(|&a, &b| {
                confidences[a]
                    .partial_cmp(&confidences[b])
                    .expect("finite probabilities")
            });
            let selected = remove_indices(&mut pool, &order[..count]);
            for sample in &selected {
                labeled.push(TrainItem::from_sample(&model, sample)?);
            }
        }
        let (next, _) = train(
            &model,
            &labeled,
            None,
            LossWeights::CE_ONLY,
            config.lr,
            config.epochs,
        )?;
        model = next;
    }
    let report = evaluate(&model, eval_set)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            rounds: 2,
            epochs: 25,
            seed: 7,
            ..Default::default()
        }
    }

    fn bench_data(seed: u64, n: usize) -> Vec<AnnotatedSample> {
        generate(&SynthConfig {
            n_samples: n,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn window_stats_hand_example() {
        let (tau1, tau2, sigma) = window_stats(&[0.2], &[0.4]);
        assert!((tau1 - 0.2).abs() < 1e-15);
        assert!((tau2 - 0.4).abs() < 1e-15);
        assert!((sigma - 0.1).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_match_fractions() {
        let data = bench_data(1, 2000);
        let config = PipelineConfig {
            seed_fraction: 0.05,
            ..Default::default()
        };
        let (seed, pool, _) = split_seed_pool(&data, &config).unwrap();
        assert_eq!(seed.len(), 100);
        assert_eq!(pool.len(), 1900);

        let (seed_b, pool_b, _) = split_seed_pool(&data, &config).unwrap();
        assert_eq!(seed, seed_b);
        assert_eq!(pool, pool_b);
    }

    #[test]
    fn initialize_is_deterministic() {
        let data = bench_data(2, 400);
        let config = small_config();
        let vocab = vocab_from_samples(data.iter());
        let a = initialize(&data, vocab.clone(), &config).unwrap();
        let b = initialize(&data, vocab, &config).unwrap();
        assert_eq!(a.hu_model, b.hu_model);
        assert_eq!(a.thresholds, b.thresholds);
        assert_eq!(a.candidates_per_round, b.candidates_per_round);
        assert_eq!(
            a.thresholds.window()[0],
            a.thresholds.tau1 - a.thresholds.sigma
        );
        assert!(a.thresholds.tau1 <= a.thresholds.tau2);
        assert!(a.thresholds.sigma >= 0.0);
        assert!((-1.0..=1.0).contains(&a.thresholds.tau_g));
    }

    #[test]
    fn initialize_rejects_missing_stratum() {
        // all-low dataset: seed cannot contain a medium sample
        let cfg = SynthConfig {
            n_samples: 100,
            mix: [1.0, 0.0, 0.0],
            seed: 5,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        let vocab = vocab_from_samples(data.iter());
        let err = initialize(&data, vocab, &small_config()).unwrap_err();
        assert!(matches!(err, HadolaError::SeedStratumError(_)));
    }

    #[test]
    fn threshold_zero_case_with_single_answer_seed() {
        // every sample has a single unanimous answer -> H(s) == restricted
        // dist == (1.0) -> all KLs are exactly zero
        use crate::annotations::{Annotation, ConfidenceLabel};
        let mk = |id: usize, answer: &str, conf: ConfidenceLabel, x: f64| {
            let anns = (0..10)
                .map(|_| Annotation::new(answer, conf).unwrap())
                .collect();
            AnnotatedSample::new(format!("s{id}"), vec![x], anns).unwrap()
        };
        // low stratum: unanimous yes (HUD 0.99); medium: unanimous maybe (HUD 0.5)
        let seed_train = vec![
            mk(0, "a", ConfidenceLabel::Yes, 0.1),
            mk(1, "b", ConfidenceLabel::Maybe, -0.4),
            mk(2, "a", ConfidenceLabel::Yes, 0.3),
        ];
        let seed_val = vec![mk(3, "b", ConfidenceLabel::Maybe, -0.2)];
        let model = SurrogateModel::init(1, vec!["a".into(), "b".into()], 1).unwrap();
        let th = compute_thresholds(&model, &seed_train, &seed_val).unwrap();
        assert_eq!(th.tau1, 0.0);
        assert_eq!(th.tau2, 0.0);
        assert_eq!(th.sigma, 0.0);
        // every restricted dist is (1.0) -> anchor profile is (1, 0, ..., 0)
        assert_eq!(th.h_omega.values()[0], 1.0);
        assert!(th.h_omega.values()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminate_boundaries_are_closed() {
        let data = bench_data(3, 50);
        let vocab = vocab_from_samples(data.iter());
        let model = SurrogateModel::init(data[0].features.len(), vocab, 3).unwrap();
        let anchor = {
            let (_, dist) = model.forward(&data[0].features).unwrap();
            ConfidenceProfile::from_weights(&dist, PROFILE_LEN)
        };
        let mut th = Thresholds {
            tau1: 0.0,
            tau2: 0.0,
            sigma: 0.0,
            h_omega: anchor,
            tau_g: 0.0,
            tau_t: 0.0,
        };
        let kl = candidate_kl(&model, &data[0], &th).unwrap();

        // degenerate window [kl, kl]: retained iff kl_u == kl exactly
        th.tau1 = kl;
        th.tau2 = kl;
        let (retained, records) = discriminate(&model, &data[..1], &th, false).unwrap();
        assert_eq!(retained, vec![0]);
        assert_eq!(records[0].kl_u, kl);

        // window strictly below kl_u -> discarded
        th.tau1 = kl - 1e-9;
        th.tau2 = kl - 1e-9;
        let (retained, _) = discriminate(&model, &data[..1], &th, false).unwrap();
        assert!(retained.is_empty());
    }

    #[test]
    fn self_annotate_breaks_ties_lexicographically() {
        // zero weights -> all logits equal -> smallest vocab answer wins
        let model = SurrogateModel::init(2, vec!["a".into(), "b".into(), "c".into()], 1)
            .unwrap()
            .with_weights(vec![0.0; 3 * 3]);
        let data = bench_data(4, 3);
        let trimmed: Vec<AnnotatedSample> = data
            .iter()
            .map(|s| {
                AnnotatedSample::new(s.id.clone(), vec![0.0, 0.0], s.annotations().to_vec())
                    .unwrap()
            })
            .collect();
        let pairs = self_annotate(&model, &trimmed).unwrap();
        assert!(pairs.iter().all(|p| p.label == 0));

        let empty = self_annotate(&model, &[]).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn error_trigger_keeps_reference_aligned_pair() {
        use crate::annotations::{Annotation, ConfidenceLabel};
        let vocab = vec!["a".to_string(), "b".to_string()];
        let model = SurrogateModel::init(2, vocab, 9).unwrap();
        let anns: Vec<Annotation> = (0..10)
            .map(|_| Annotation::new("a", ConfidenceLabel::Yes).unwrap())
            .collect();
        let sample = AnnotatedSample::new("x".into(), vec![0.5, -0.5], anns).unwrap();
        let seed_items = vec![TrainItem::from_sample(&model, &sample).unwrap()];
        let val_items = seed_items.clone();

        // the pending pair is the seed sample itself: g == g_ref -> s_g = 1
        let pair = PendingPair {
            id: "x".into(),
            features: vec![0.5, -0.5],
            label: 0,
        };
        let g = grad_ce(&model, &pair.features, 0).unwrap();
        let v = mean_ce_grad(&model, &val_items).unwrap();
        let expected_tracin = tracin_score(&g, &g, &v, &v);

        // cosine of a vector with itself can land one ulp below 1
        let thresholds = Thresholds {
            tau1: 0.0,
            tau2: 0.0,
            sigma: 0.0,
            h_omega: ConfidenceProfile::from_weights(&[1.0], PROFILE_LEN),
            tau_g: 1.0 - 1e-9,
            tau_t: expected_tracin,
        };
        let (kept, records) = error_trigger(
            &[pair],
            &model,
            &model,
            &seed_items,
            &val_items,
            &thresholds,
            1,
        )
        .unwrap();
        assert_eq!(records.len(), 1);
        assert!((records[0].s_g - 1.0).abs() < 1e-12);
        assert!((records[0].s_tracin - expected_tracin).abs() < 1e-12);
        assert_eq!(kept.len(), 1);

        // raising the gradient bar above 1 rejects it
        let strict = Thresholds {
            tau_g: 1.1,
            ..thresholds
        };
        let pair = PendingPair {
            id: "x".into(),
            features: vec![0.5, -0.5],
            label: 0,
        };
        let (kept, _) =
            error_trigger(&[pair], &model, &model, &seed_items, &val_items, &strict, 1).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn run_zero_rounds_returns_bootstrap_model() {
        let data = bench_data(6, 300);
        let eval = bench_data(106, 150);
        let config = PipelineConfig {
            rounds: 0,
            epochs: 20,
            seed: 7,
            ..Default::default()
        };
        let out = run(&data, &eval, &config).unwrap();
        assert!(out.history.rounds.is_empty());

        let vocab = vocab_from_samples(data.iter().chain(eval.iter()));
        let state = initialize(&data, vocab, &config).unwrap();
        assert_eq!(out.model, state.hu_model);
    }

    #[test]
    fn run_is_deterministic_and_pool_is_monotone() {
        let data = bench_data(8, 400);
        let eval = bench_data(108, 150);
        let config = PipelineConfig {
            rounds: 3,
            epochs: 20,
            seed: 11,
            audit: true,
            ..Default::default()
        };
        let a = run(&data, &eval, &config).unwrap();
        let b = run(&data, &eval, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.to_json().unwrap(), b.history.to_json().unwrap());
        assert_eq!(
            audit_to_jsonl(&a.audit).unwrap(),
            audit_to_jsonl(&b.audit).unwrap()
        );

        // pseudo pool grows monotonically and never repeats an id
        let mut last = 0;
        for round in &a.history.rounds {
            assert!(round.pseudo_pool >= last);
            last = round.pseudo_pool;
            assert!(round.wall_ms.is_none());
        }
        // kept pairs satisfy both criteria by construction
        for record in &a.audit {
            if let AuditRecord::ErrorTrigger {
                s_g,
                s_tracin,
                decision,
                ..
            } = record
            {
                let keep =
                    *s_g >= a.history.thresholds.tau_g && *s_tracin <= a.history.thresholds.tau_t;
                assert_eq!(keep, decision == "kept");
            }
        }
    }

    #[test]
    fn sft_fraction_one_is_deterministic_and_seed_fraction_matches_split() {
        let data = bench_data(9, 200);
        let eval = bench_data(109, 100);
        let config = PipelineConfig {
            rounds: 1,
            epochs: 15,
            seed: 3,
            ..Default::default()
        };
        let (a, _) = baseline_sft(&data, &eval, &config, 1.0, None).unwrap();
        let (b, _) = baseline_sft(&data, &eval, &config, 1.0, None).unwrap();
        assert_eq!(a, b);

        // fraction = seed_fraction trains on exactly the seed split
        let (seed, _, _) = split_seed_pool(&data, &config).unwrap();
        let vocab = vocab_from_samples(data.iter().chain(eval.iter()));
        let epochs = config.epochs * (config.rounds + 1);
        let (direct, _) = train_ce_arm(vocab, &seed, &eval, &config, epochs).unwrap();
        let (via_fraction, _) =
            baseline_sft(&data, &eval, &config, config.seed_fraction, None).unwrap();
        assert_eq!(direct, via_fraction);
    }

    #[test]
    fn active_learning_zero_rounds_equals_seed_only_sft() {
        let data = bench_data(10, 200);
        let eval = bench_data(110, 100);
        let config = PipelineConfig {
            rounds: 0,
            epochs: 15,
            seed: 5,
            ..Default::default()
        };
        let (al_model, _) = baseline_active_learning(&data, &eval, &config).unwrap();
        let (sft_model, _) =
            baseline_sft(&data, &eval, &config, config.seed_fraction, None).unwrap();
        assert_eq!(al_model, sft_model);
    }

    #[test]
    fn run_with_empty_pool_trains_on_seed_only() {
        // seed_fraction close to 1 rounds to the whole dataset
        let data = bench_data(14, 60);
        let eval = bench_data(114, 80);
        let config = PipelineConfig {
            seed_fraction: 0.999,
            rounds: 2,
            epochs: 10,
            seed: 2,
            ..Default::default()
        };
        let out = run(&data, &eval, &config).unwrap();
        assert_eq!(out.history.rounds.len(), 2);
        for round in &out.history.rounds {
            assert_eq!(round.n_candidates, 0);
            assert_eq!(round.n_kept, 0);
        }
    }

    #[test]
    fn active_learning_is_deterministic() {
        let data = bench_data(12, 250);
        let eval = bench_data(112, 120);
        let config = PipelineConfig {
            rounds: 2,
            epochs: 15,
            seed: 8,
            ..Default::default()
        };
        let (a, report_a) = baseline_active_learning(&data, &eval, &config).unwrap();
        let (b, report_b) = baseline_active_learning(&data, &eval, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(report_a, report_b);
    }

    #[test]
    fn config_validation() {
        let mut config = PipelineConfig::default();
        assert!(config.validate().is_ok());
        config.seed_fraction = 0.0;
        assert!(config.validate().is_err());
        config.seed_fraction = 0.05;
        config.weights = WeightSpec::Fixed {
            beta: 0.0,
            lambda: 0.7,
        };
        assert!(config.validate().is_err());
    }
}
