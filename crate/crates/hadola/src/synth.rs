//! Synthetic annotator simulator.
//!
//! Generates datasets with controllable human-uncertainty strata. Each
//! sample draws a latent answer distribution `p*` over a small candidate set
//! from an asymmetric Dirichlet whose concentration sits on a designated
//! anchor class (large concentration -> near one-hot -> high agreement).
//! Ten annotators then draw an answer from `p*` and report confidence
//! coupled to it: yes with probability `p*(answer)`, otherwise no or maybe
//! with equal odds. Features are the anchor-free prototype of the modal
//! class plus Gaussian noise scaled by `noise * (1 - max p*)`, so feature
//! informativeness degrades as uncertainty grows. That coupling is an
//! engineered property of the simulator, stated openly: it makes the
//! low/medium/high ordering of training value realizable at desk scale.
//!
//! Draws whose realized HUD lands outside the intended stratum are
//! resampled (bounded attempts), keeping realized stratum proportions close
//! to the configured mix.
//!
//! Every sample has its own counter-derived RNG stream, so generation order
//! and parallelism do not affect the output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    stratify, AnnotatedSample, Annotation, ConfidenceLabel, HuLevel, StrataCounts,
};
use crate::error::{HadolaError, Result};

const MAX_RESAMPLE_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Intended stratum fractions (low, medium, high); must sum to one.
    pub mix: [f64; 3],
    /// Dirichlet concentration on the anchor class per stratum
    /// (low, medium, high).
    pub alphas: [f64; 3],
    /// Feature noise scale; the per-sample standard deviation is
    /// `noise * (1 - max p*)`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_classes: 25,
            feature_dim: 16,
            mix: [0.6, 0.3, 0.1],
            alphas: [50.0, 2.0, 0.5],
            noise: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(HadolaError::ConfigError(
                "n_samples must be positive".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(HadolaError::ConfigError(
                "n_classes must be at least 2".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(HadolaError::ConfigError(
                "feature_dim must be positive".into(),
            ));
        }
        let sum: f64 = self.mix.iter().sum();
        if self.mix.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(HadolaError::ConfigError(format!(
                "stratum mix {:?} must lie in [0,1] and sum to 1",
                self.mix
            )));
        }
        if self.alphas.iter().any(|&a| a.is_nan() || a <= 0.0) {
            return Err(HadolaError::ConfigError(format!(
                "Dirichlet concentrations {:?} must be positive",
                self.alphas
            )));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(HadolaError::ConfigError("noise must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub config: SynthConfig,
    pub realized: StrataCounts,
}

pub fn class_name(index: usize) -> String {
    format!("c{index:03}")
}

/// Candidate-set size range per intended stratum. Wider sets make flat
/// distributions (and hence low HUD) reachable.
fn candidate_range(level: HuLevel) -> (usize, usize) {
    match level {
        HuLevel::Low => (1, 3),
        HuLevel::Medium => (2, 6),
        HuLevel::High => (6, 10),
    }
}

fn intended_level(mix: &[f64; 3], u: f64) -> HuLevel {
    if u < mix[0] {
        HuLevel::Low
    } else if u < mix[0] + mix[1] {
        HuLevel::Medium
    } else {
        HuLevel::High
    }
}

/// Dirichlet draw via normalized Gamma variates; `alpha` on the anchor
/// (first) slot, 1.0 elsewhere.
fn dirichlet_anchor(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let mut draws = Vec::with_capacity(k);
    for slot in 0..k {
        let a = if slot == 0 { alpha } else { 1.0 };
        let gamma = Gamma::new(a, 1.0).expect("validated concentration");
        let mut g: f64 = gamma.sample(rng);
        // guard against numerically-zero gamma draws at tiny concentrations
        if g <= 0.0 || g.is_nan() {
            g = f64::MIN_POSITIVE;
        }
        draws.push(g);
    }
    let sum: f64 = draws.iter().sum();
    draws.iter().map(|d| d / sum).collect()
}

fn draw_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn class_prototype(seed: u64, class: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 63) | class as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

struct SampleDraw {
    annotations: Vec<Annotation>,
    p_star: Vec<f64>,
    candidates: Vec<usize>,
}

/// Distance-ordered other classes per class, nearest first. Candidate
/// answers of a sample cluster around its anchor class the way plausible
/// answers cluster semantically in real data.
fn neighbor_table(prototypes: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let dist2 =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    (0..prototypes.len())
        .map(|c| {
            let mut others: Vec<usize> = (0..prototypes.len()).filter(|&o| o != c).collect();
            others.sort_by(|&a, &b| {
                dist2(&prototypes[c], &prototypes[a])
                    .partial_cmp(&dist2(&prototypes[c], &prototypes[b]))
                    .expect("finite distances")
            });
            others
        })
        .collect()
}

/// Non-anchor candidates come mostly from the anchor's nearest classes.
const NEIGHBOR_POOL: usize = 6;
const NEIGHBOR_BIAS: f64 = 0.85;

fn draw_sample_content(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    neighbors: &[Vec<usize>],
    level: HuLevel,
) -> SampleDraw {
    let (lo, hi) = candidate_range(level);
    let k = rng.random_range(lo..=hi).min(cfg.n_classes);

    // k distinct classes; the first is the anchor, the rest biased toward
    // the anchor's neighborhood
    let anchor = rng.random_range(0..cfg.n_classes);
    let mut candidates: Vec<usize> = vec![anchor];
    let near = &neighbors[anchor];
    while candidates.len() < k {
        let c = if rng.random::<f64>() < NEIGHBOR_BIAS {
            near[rng.random_range(0..NEIGHBOR_POOL.min(near.len()))]
        } else {
            rng.random_range(0..cfg.n_classes)
        };
        if !candidates.contains(&c) {
            candidates.push(c);
        }
    }

    let alpha = match level {
        HuLevel::Low => cfg.alphas[0],
        HuLevel::Medium => cfg.alphas[1],
        HuLevel::High => cfg.alphas[2],
    };
    let p_star = dirichlet_anchor(rng, k, alpha);

    let mut annotations = Vec::with_capacity(crate::annotations::ANNOTATORS_PER_SAMPLE);
    for _ in 0..crate::annotations::ANNOTATORS_PER_SAMPLE {
        let pick = draw_categorical(rng, &p_star);
        let p = p_star[pick];
        let u: f64 = rng.random();
        let confidence = if u < p {
            ConfidenceLabel::Yes
        } else if u < p + (1.0 - p) * 0.5 {
            ConfidenceLabel::No
        } else {
            ConfidenceLabel::Maybe
        };
        annotations.push(
            Annotation::new(&class_name(candidates[pick]), confidence)
                .expect("class names survive normalization"),
        );
    }
    SampleDraw {
        annotations,
        p_star,
        candidates,
    }
}

fn generate_sample(
    cfg: &SynthConfig,
    prototypes: &[Vec<f64>],
    neighbors: &[Vec<usize>],
    index: usize,
) -> AnnotatedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let level = intended_level(&cfg.mix, rng.random());
    let mut draw = draw_sample_content(&mut rng, cfg, neighbors, level);
    for _ in 1..MAX_RESAMPLE_ATTEMPTS {
        let hud_level = probe_level(&draw.annotations);
        if hud_level == level {
            break;
        }
        draw = draw_sample_content(&mut rng, cfg, neighbors, level);
    }

    // modal class of p*
    let mut modal = 0;
    for i in 1..draw.p_star.len() {
        if draw.p_star[i] > draw.p_star[modal] {
            modal = i;
        }
    }
    let p_max = draw.p_star[modal];
    let sd = cfg.noise * (1.0 - p_max);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let features: Vec<f64> = prototypes[draw.candidates[modal]]
        .iter()
        .map(|proto| proto + normal.sample(&mut rng) * sd)
        .collect();

    AnnotatedSample::new(format!("synth-{index:06}"), features, draw.annotations)
        .expect("simulator emits valid samples")
}

fn probe_level(annotations: &[Annotation]) -> HuLevel {
    let probe = AnnotatedSample::new("probe".to_string(), vec![0.0], annotations.to_vec())
        .expect("ten annotations");
    probe.hu_level()
}

/// Generate a dataset. Byte-identical output for identical configs.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<AnnotatedSample>> {
    cfg.validate()?;
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| class_prototype(cfg.seed, c, cfg.feature_dim))
        .collect();
    let neighbors = neighbor_table(&prototypes);
    Ok((0..cfg.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, &prototypes, &neighbors, i))
        .collect())
}

pub fn generate_with_meta(cfg: &SynthConfig) -> Result<(Vec<AnnotatedSample>, GenerationMeta)> {
    let samples = generate(cfg)?;
    let realized = stratify(&samples).counts();
    Ok((
        samples,
        GenerationMeta {
            config: cfg.clone(),
            realized,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::write_dataset;

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SynthConfig {
            n_samples: 60,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_dataset(&mut buf_a, &a).unwrap();
        write_dataset(&mut buf_b, &b).unwrap();
        assert_eq!(buf_a, buf_b);

        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn samples_satisfy_invariants() {
        let cfg = SynthConfig {
            n_samples: 120,
            seed: 3,
            ..Default::default()
        };
        let samples = generate(&cfg).unwrap();
        assert_eq!(samples.len(), 120);
        for s in &samples {
            assert_eq!(s.annotations().len(), 10);
            assert_eq!(s.features.len(), cfg.feature_dim);
        }
    }

    #[test]
    fn realized_mix_close_to_intended() {
        let cfg = SynthConfig {
            n_samples: 2000,
            seed: 7,
            ..Default::default()
        };
        let (_, meta) = generate_with_meta(&cfg).unwrap();
        let n = cfg.n_samples as f64;
        let realized = [
            meta.realized.low as f64 / n,
            meta.realized.medium as f64 / n,
            meta.realized.high as f64 / n,
        ];
        for (got, want) in realized.iter().zip(&cfg.mix) {
            assert!(
                (got - want).abs() <= 0.07,
                "realized {realized:?} vs intended {:?}",
                cfg.mix
            );
        }
    }

    #[test]
    fn mean_hud_strictly_ordered_across_strata() {
        for seed in [0u64, 11, 42, 12345] {
            let cfg = SynthConfig {
                n_samples: 1500,
                mix: [0.34, 0.33, 0.33],
                seed,
                ..Default::default()
            };
            let samples = generate(&cfg).unwrap();
            let strata = stratify(&samples);
            let mean = |idx: &[usize]| -> f64 {
                idx.iter().map(|&i| samples[i].hud()).sum::<f64>() / idx.len() as f64
            };
            assert!(
                strata.low.len() >= 400 && strata.medium.len() >= 400 && strata.high.len() >= 400
            );
            let (lo, mid, hi) = (mean(&strata.low), mean(&strata.medium), mean(&strata.high));
            assert!(lo > mid && mid > hi, "seed {seed}: {lo} / {mid} / {hi}");
        }
    }

    #[test]
    fn huge_concentration_gives_low_stratum() {
        let cfg = SynthConfig {
            n_samples: 50,
            mix: [1.0, 0.0, 0.0],
            alphas: [1e6, 2.0, 0.5],
            seed: 13,
            ..Default::default()
        };
        let samples = generate(&cfg).unwrap();
        for s in &samples {
            assert!(s.hud() > 0.9, "near one-hot p* should give HUD near 0.99");
            assert_eq!(s.hu_level(), HuLevel::Low);
        }
    }
}
