//! Data model for human-uncertainty annotated samples.
//!
//! A sample carries a feature vector (the surrogate for an image-question
//! input) and exactly ten human annotations, each an answer string plus a
//! categorical confidence. From those this module derives:
//!
//! - per-answer mean confidence (HaConf),
//! - the sample-level uncertainty score (HUD, the mean of HaConf over the
//!   distinct answers; low HUD means high uncertainty),
//! - the human answer distribution (HaConf weights renormalized onto the
//!   simplex),
//! - the low/medium/high uncertainty stratification.
//!
//! Confidence scores are exact hundredths (0.99 / 0.5 / 0.01), so HaConf and
//! HUD are computed in integer arithmetic and rounded once at the end. That
//! keeps e.g. "ten annotators all said yes" at exactly 0.99 instead of a few
//! ulps off.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HadolaError, Result};

/// Every sample carries exactly this many annotations.
pub const ANNOTATORS_PER_SAMPLE: usize = 10;

/// lcm(1..=10); common denominator for exact HUD arithmetic.
const LCM_1_TO_10: i64 = 2520;

/// Annotator self-reported confidence category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceLabel {
    Yes,
    Maybe,
    No,
}

impl ConfidenceLabel {
    /// Parse a confidence token, case-insensitively. Unknown tokens are an
    /// error, never coerced.
    pub fn parse(token: &str) -> Result<Self> {
        match token.trim().to_lowercase().as_str() {
            "yes" => Ok(Self::Yes),
            "maybe" => Ok(Self::Maybe),
            "no" => Ok(Self::No),
            other => Err(HadolaError::UnknownConfidence(other.to_string())),
        }
    }

    /// Numeric confidence score: yes = 0.99, maybe = 0.5, no = 0.01.
    pub fn score(self) -> f64 {
        self.score_x100() as f64 / 100.0
    }

    /// Score times 100, exact in integer arithmetic.
    pub(crate) fn score_x100(self) -> i64 {
        match self {
            Self::Yes => 99,
            Self::Maybe => 50,
            Self::No => 1,
        }
    }
}

/// Confidence category to numeric score.
pub fn map_confidence(label: ConfidenceLabel) -> f64 {
    label.score()
}

/// Canonical answer form: lowercase, trimmed, internal whitespace collapsed,
/// trailing punctuation stripped.
pub fn normalize_answer(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let collapsed: Vec<&str> = lower.split_whitespace().collect();
    let joined = collapsed.join(" ");
    joined
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim_end()
        .to_string()
}

/// One annotator's (answer, confidence) pair. The answer is stored in
/// normalized form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Annotation {
    pub answer: String,
    pub confidence: ConfidenceLabel,
}

impl Annotation {
    pub fn new(raw_answer: &str, confidence: ConfidenceLabel) -> Result<Self> {
        let answer = normalize_answer(raw_answer);
        if answer.is_empty() {
            return Err(HadolaError::InvalidSample {
                id: String::new(),
                reason: format!("answer `{raw_answer}` is empty after normalization"),
            });
        }
        Ok(Self { answer, confidence })
    }
}

#[derive(Deserialize)]
struct AnnotationRaw {
    answer: String,
    confidence: String,
}

impl<'de> Deserialize<'de> for Annotation {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let raw = AnnotationRaw::deserialize(deserializer)?;
        let confidence =
            ConfidenceLabel::parse(&raw.confidence).map_err(serde::de::Error::custom)?;
        Annotation::new(&raw.answer, confidence).map_err(serde::de::Error::custom)
    }
}

/// A feature vector plus its ten human annotations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotatedSample {
    pub id: String,
    pub features: Vec<f64>,
    annotations: Vec<Annotation>,
}

#[derive(Deserialize)]
struct SampleRaw {
    id: String,
    features: Vec<f64>,
    annotations: Vec<Annotation>,
}

impl<'de> Deserialize<'de> for AnnotatedSample {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let raw = SampleRaw::deserialize(deserializer)?;
        AnnotatedSample::new(raw.id, raw.features, raw.annotations)
            .map_err(serde::de::Error::custom)
    }
}

impl AnnotatedSample {
    pub fn new(id: String, features: Vec<f64>, annotations: Vec<Annotation>) -> Result<Self> {
        if annotations.len() != ANNOTATORS_PER_SAMPLE {
            return Err(HadolaError::InvalidSample {
                id,
                reason: format!(
                    "expected {ANNOTATORS_PER_SAMPLE} annotations, got {}",
                    annotations.len()
                ),
            });
        }
        if features.is_empty() {
            return Err(HadolaError::InvalidSample {
                id,
                reason: "feature vector is empty".to_string(),
            });
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(HadolaError::InvalidSample {
                id,
                reason: "feature vector contains a non-finite value".to_string(),
            });
        }
        Ok(Self {
            id,
            features,
            annotations,
        })
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    /// Distinct answers in first-occurrence order.
    pub fn distinct_answers(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for ann in &self.annotations {
            if !seen.iter().any(|a| *a == ann.answer) {
                seen.push(&ann.answer);
            }
        }
        seen
    }

    /// Number of annotators who gave `answer` (normalized before matching).
    pub fn annotator_count(&self, answer: &str) -> usize {
        let norm = normalize_answer(answer);
        self.annotations.iter().filter(|a| a.answer == norm).count()
    }

    /// Mean confidence score over the annotators who gave `answer` (HaConf).
    pub fn haconf(&self, answer: &str) -> Result<f64> {
        let norm = normalize_answer(answer);
        let mut sum_x100: i64 = 0;
        let mut count: i64 = 0;
        for ann in &self.annotations {
            if ann.answer == norm {
                sum_x100 += ann.confidence.score_x100();
                count += 1;
            }
        }
        if count == 0 {
            return Err(HadolaError::NoSuchAnswer {
                id: self.id.clone(),
                answer: norm,
            });
        }
        Ok(sum_x100 as f64 / (100 * count) as f64)
    }

    /// HaConf, or 0.0 when no annotator gave the answer. Used to score model
    /// answers that humans never produced.
    pub fn haconf_or_zero(&self, answer: &str) -> f64 {
        self.haconf(answer).unwrap_or(0.0)
    }

    /// Sample-level uncertainty score: the mean of HaConf over the distinct
    /// answers. Exact rational arithmetic, rounded once; always within
    /// [0.01, 0.99] and invariant under annotation order.
    pub fn hud(&self) -> f64 {
        // HaConf(a_i) = k_i / (100 n_i); HUD = sum_i HaConf(a_i) / m
        //            = sum_i k_i * (2520 / n_i) / (100 * 2520 * m).
        let mut numer: i64 = 0;
        let mut m: i64 = 0;
        for answer in self.distinct_answers() {
            let mut sum_x100: i64 = 0;
            let mut count: i64 = 0;
            for ann in &self.annotations {
                if ann.answer == answer {
                    sum_x100 += ann.confidence.score_x100();
                    count += 1;
                }
            }
            numer += sum_x100 * (LCM_1_TO_10 / count);
            m += 1;
        }
        let hud = numer as f64 / (100 * LCM_1_TO_10 * m) as f64;
        assert!(
            (0.01..=0.99).contains(&hud),
            "HUD {hud} outside [0.01, 0.99] for sample {}",
            self.id
        );
        hud
    }

    /// The most frequent answer; ties broken by the lexicographically
    /// smallest answer.
    pub fn majority_answer(&self) -> &str {
        let mut best: Option<(&str, usize)> = None;
        for answer in self.distinct_answers() {
            let count = self
                .annotations
                .iter()
                .filter(|a| a.answer == answer)
                .count();
            best = match best {
                None => Some((answer, count)),
                Some((ba, bc)) => {
                    if count > bc || (count == bc && answer < ba) {
                        Some((answer, count))
                    } else {
                        Some((ba, bc))
                    }
                }
            };
        }
        best.expect("sample has ten annotations").0
    }

    /// Human answer distribution H(s): the HaConf vector over the distinct
    /// answers, renormalized to sum to one.
    pub fn human_distribution(&self) -> AnswerDistribution {
        let answers: Vec<String> = self
            .distinct_answers()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let weights: Vec<f64> = answers
            .iter()
            .map(|a| self.haconf(a).expect("distinct answer present"))
            .collect();
        AnswerDistribution::from_unnormalized(answers, &weights)
            .expect("HaConf weights are positive")
    }

    pub fn hu_level(&self) -> HuLevel {
        HuLevel::from_hud(self.hud())
    }
}

/// Human-uncertainty stratum, determined solely by HUD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HuLevel {
    Low,
    Medium,
    High,
}

impl HuLevel {
    /// Fixed intervals: [0.66, 0.99] low, (0.33, 0.66) medium,
    /// [0.01, 0.33] high. Both boundaries belong to the closed intervals.
    pub fn from_hud(hud: f64) -> Self {
        if hud >= 0.66 {
            Self::Low
        } else if hud > 0.33 {
            Self::Medium
        } else {
            Self::High
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

impl std::str::FromStr for HuLevel {
    type Err = HadolaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "low" => Ok(Self::Low),
            "medium" => Ok(Self::Medium),
            "high" => Ok(Self::High),
            other => Err(HadolaError::ConfigError(format!(
                "unknown stratum `{other}` (expected low, medium or high)"
            ))),
        }
    }
}

/// Index partition of a dataset into the three HU strata.
#[derive(Debug, Clone, Default)]
pub struct Strata {
    pub low: Vec<usize>,
    pub medium: Vec<usize>,
    pub high: Vec<usize>,
}

impl Strata {
    pub fn counts(&self) -> StrataCounts {
        StrataCounts {
            low: self.low.len(),
            medium: self.medium.len(),
            high: self.high.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrataCounts {
    pub low: usize,
    pub medium: usize,
    pub high: usize,
}

impl StrataCounts {
    pub fn total(&self) -> usize {
        self.low + self.medium + self.high
    }
}

/// Assign every sample to exactly one stratum by HUD.
pub fn stratify(samples: &[AnnotatedSample]) -> Strata {
    let mut strata = Strata::default();
    for (i, sample) in samples.iter().enumerate() {
        match sample.hu_level() {
            HuLevel::Low => strata.low.push(i),
            HuLevel::Medium => strata.medium.push(i),
            HuLevel::High => strata.high.push(i),
        }
    }
    strata
}

/// A categorical distribution over distinct answer strings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnswerDistribution {
    answers: Vec<String>,
    weights: Vec<f64>,
}

impl AnswerDistribution {
    /// Weights must be nonnegative, sum to one within 1e-9, and the answers
    /// must be pairwise distinct and non-empty.
    pub fn new(answers: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if answers.is_empty() || answers.len() != weights.len() {
            return Err(HadolaError::SupportMismatch(format!(
                "{} answers vs {} weights",
                answers.len(),
                weights.len()
            )));
        }
        for (i, a) in answers.iter().enumerate() {
            if answers[..i].contains(a) {
                return Err(HadolaError::SupportMismatch(format!(
                    "duplicate answer `{a}`"
                )));
            }
        }
        let mut sum = 0.0;
        for &w in &weights {
            if !w.is_finite() || w < 0.0 {
                return Err(HadolaError::SupportMismatch(format!("invalid weight {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(HadolaError::SupportMismatch(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { answers, weights })
    }

    /// Build from raw nonnegative weights by dividing through their sum.
    pub fn from_unnormalized(answers: Vec<String>, raw: &[f64]) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if sum.is_nan() || sum <= 0.0 {
            return Err(HadolaError::SupportMismatch(
                "unnormalized weights sum to zero".to_string(),
            ));
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        Self::new(answers, weights)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// Answer with the largest weight; exact ties go to the
    /// lexicographically smallest answer.
    pub fn argmax_answer(&self) -> &str {
        let mut best = 0;
        for i in 1..self.weights.len() {
            let better = self.weights[i] > self.weights[best]
                || (self.weights[i] == self.weights[best] && self.answers[i] < self.answers[best]);
            if better {
                best = i;
            }
        }
        &self.answers[best]
    }
}

// ---------------------------------------------------------------------------
// Dataset JSONL format: one sample per line,
// {"id": "...", "features": [...], "annotations": [{"answer", "confidence"} x10]}
// ---------------------------------------------------------------------------

/// Read a JSONL dataset, enforcing per-sample invariants and a consistent
/// feature dimension across the file.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<AnnotatedSample>> {
    let mut samples: Vec<AnnotatedSample> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: AnnotatedSample =
            serde_json::from_str(&line).map_err(|e| HadolaError::InvalidSample {
                id: format!("line {}", lineno + 1),
                reason: e.to_string(),
            })?;
        match dim {
            None => dim = Some(sample.features.len()),
            Some(d) if d != sample.features.len() => {
                return Err(HadolaError::InvalidSample {
                    id: sample.id,
                    reason: format!(
                        "feature dimension {} differs from dataset dimension {d}",
                        sample.features.len()
                    ),
                });
            }
            _ => {}
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn read_dataset_path(path: &Path) -> Result<Vec<AnnotatedSample>> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file))
}

pub fn write_dataset<W: Write>(mut writer: W, samples: &[AnnotatedSample]) -> Result<()> {
    for sample in samples {
        serde_json::to_writer(&mut writer, sample)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Histogram of distinct answers across a dataset, in sorted order.
pub fn answer_histogram(samples: &[AnnotatedSample]) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for sample in samples {
        for ann in sample.annotations() {
            *hist.entry(ann.answer.clone()).or_insert(0) += 1;
        }
    }
    hist
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn arb_label() -> impl Strategy<Value = ConfidenceLabel> {
        prop_oneof![
            Just(ConfidenceLabel::Yes),
            Just(ConfidenceLabel::Maybe),
            Just(ConfidenceLabel::No)
        ]
    }

    fn arb_sample() -> impl Strategy<Value = AnnotatedSample> {
        (
            proptest::collection::vec((0usize..4, arb_label()), ANNOTATORS_PER_SAMPLE),
            proptest::collection::vec(-10.0f64..10.0, 1..8),
        )
            .prop_map(|(pairs, features)| {
                let names = ["alpha", "beta", "gamma", "delta"];
                let annotations: Vec<Annotation> = pairs
                    .into_iter()
                    .map(|(idx, conf)| Annotation::new(names[idx], conf).unwrap())
                    .collect();
                AnnotatedSample::new("p".to_string(), features, annotations).unwrap()
            })
    }

    proptest! {
        #[test]
        fn haconf_and_hud_permutation_invariant(s in arb_sample(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = s.annotations().to_vec();
            shuffled.shuffle(&mut rng);
            let t = AnnotatedSample::new(s.id.clone(), s.features.clone(), shuffled).unwrap();
            prop_assert_eq!(s.hud(), t.hud());
            for a in s.distinct_answers() {
                prop_assert_eq!(s.haconf(a).unwrap(), t.haconf(a).unwrap());
            }
        }

        #[test]
        fn haconf_and_hud_bounds(s in arb_sample()) {
            let hud = s.hud();
            prop_assert!((0.01..=0.99).contains(&hud));
            for a in s.distinct_answers() {
                let h = s.haconf(a).unwrap();
                prop_assert!((0.01..=0.99).contains(&h));
            }
        }

        #[test]
        fn stratify_partitions(samples in proptest::collection::vec(arb_sample(), 1..30)) {
            let strata = stratify(&samples);
            let mut all: Vec<usize> = strata
                .low
                .iter()
                .chain(strata.medium.iter())
                .chain(strata.high.iter())
                .copied()
                .collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..samples.len()).collect();
            prop_assert_eq!(all, expect);
        }

        #[test]
        fn human_distribution_sums_and_orders(s in arb_sample()) {
            let d = s.human_distribution();
            let sum: f64 = d.weights().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            // larger HaConf -> larger weight
            let haconfs: Vec<f64> = d
                .answers()
                .iter()
                .map(|a| s.haconf(a).unwrap())
                .collect();
            for i in 0..haconfs.len() {
                for j in 0..haconfs.len() {
                    if haconfs[i] > haconfs[j] {
                        prop_assert!(d.weights()[i] > d.weights()[j]);
                    }
                }
            }
        }
    }
}
