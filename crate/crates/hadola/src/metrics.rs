//! Accuracy and calibration metrics.
//!
//! Accuracy comes in two flavors: the frequency-based score
//! `vqa_acc = min(matching annotators / 3, 1)` and its confidence-weighted
//! variant `hu_acc = HaConf(answer) * vqa_acc`. Calibration is measured as
//! the KL divergence of the human answer distribution from the model's
//! restricted distribution, in nats.
//!
//! Distributions over different answer sets are compared through canonical
//! confidence profiles: weights sorted descending, truncated or zero-padded
//! to a fixed length, renormalized. Profiles make expectations over samples
//! with different supports well-defined.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{normalize_answer, AnnotatedSample, AnswerDistribution, HuLevel};
use crate::error::{HadolaError, Result};
use crate::model::{softmax_stable, SurrogateModel};

/// Probability floor applied to the model side before KL so that missing or
/// zero mass keeps the divergence finite and reproducible.
pub const SMOOTHING_FLOOR: f64 = 1e-6;

/// Frequency-based answer accuracy: `min(count / 3, 1)`.
pub fn vqa_acc(model_answer: &str, sample: &AnnotatedSample) -> f64 {
    let count = sample.annotator_count(&normalize_answer(model_answer));
    (count as f64 / 3.0).min(1.0)
}

/// Confidence-weighted accuracy: `HaConf(answer) * vqa_acc(answer)`; zero for
/// answers no annotator gave.
pub fn hu_acc(model_answer: &str, sample: &AnnotatedSample) -> f64 {
    sample.haconf_or_zero(model_answer) * vqa_acc(model_answer, sample)
}

/// KL(h || p) in nats over an aligned support. Callers align supports first
/// (`align_support`); mismatched supports are an error. Zero entries of `h`
/// contribute zero.
pub fn kl_divergence(h: &AnswerDistribution, p: &AnswerDistribution) -> Result<f64> {
    if h.answers() != p.answers() {
        return Err(HadolaError::SupportMismatch(format!(
            "h has answers {:?}, p has {:?}",
            h.answers(),
            p.answers()
        )));
    }
    let mut kl = 0.0;
    for (&hi, &pi) in h.weights().iter().zip(p.weights()) {
        if hi > 0.0 {
            kl += hi * (hi.ln() - pi.ln());
        }
    }
    Ok(kl)
}

/// Align two distributions onto the union of their supports. Answers missing
/// from `h` get exact zeros; answers missing from (or at zero mass in) the
/// model side get the smoothing floor, after which the model side is
/// renormalized.
pub fn align_support(
    h: &AnswerDistribution,
    model_dist: &AnswerDistribution,
) -> (AnswerDistribution, AnswerDistribution) {
    let mut union: Vec<String> = h.answers().to_vec();
    for a in model_dist.answers() {
        if !union.contains(a) {
            union.push(a.clone());
        }
    }
    let h_weights: Vec<f64> = union
        .iter()
        .map(|a| {
            h.answers()
                .iter()
                .position(|x| x == a)
                .map_or(0.0, |i| h.weights()[i])
        })
        .collect();
    let p_raw: Vec<f64> = union
        .iter()
        .map(|a| {
            let w = model_dist
                .answers()
                .iter()
                .position(|x| x == a)
                .map_or(0.0, |i| model_dist.weights()[i]);
            w.max(SMOOTHING_FLOOR)
        })
        .collect();
    let h_out = AnswerDistribution::new(union.clone(), h_weights)
        .expect("aligned human weights stay on the simplex");
    let p_out =
        AnswerDistribution::from_unnormalized(union, &p_raw).expect("floored weights are positive");
    (h_out, p_out)
}

/// Fixed-length, support-free representation of a distribution: weights
/// sorted descending, truncated or zero-padded to length `k`, renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceProfile {
    values: Vec<f64>,
}

impl ConfidenceProfile {
    /// Canonicalize raw nonnegative weights.
    pub fn from_weights(weights: &[f64], k: usize) -> Self {
        assert!(k >= 1, "profile length must be at least 1");
        let mut sorted: Vec<f64> = weights.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite weights"));
        sorted.truncate(k);
        while sorted.len() < k {
            sorted.push(0.0);
        }
        let sum: f64 = sorted.iter().sum();
        debug_assert!(sum > 0.0, "profile of an all-zero weight vector");
        for v in &mut sorted {
            *v /= sum;
        }
        Self { values: sorted }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Canonical profile of an answer distribution.
pub fn canonical_profile(dist: &AnswerDistribution, k: usize) -> ConfidenceProfile {
    ConfidenceProfile::from_weights(dist.weights(), k)
}

/// Elementwise mean of equal-length profiles, renormalized.
pub fn mean_profile(profiles: &[ConfidenceProfile]) -> ConfidenceProfile {
    assert!(!profiles.is_empty(), "mean of zero profiles");
    let k = profiles[0].len();
    let mut sum = vec![0.0; k];
    for p in profiles {
        assert_eq!(p.len(), k, "profiles must share a length");
        for (s, v) in sum.iter_mut().zip(p.values()) {
            *s += v;
        }
    }
    let n = profiles.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    // means of sorted-descending simplex points are sorted descending
    ConfidenceProfile::from_weights(&sum, k)
}

/// KL(h || q) between equal-length profiles, with the floor applied to `q`.
pub fn profile_kl(h: &ConfidenceProfile, q: &ConfidenceProfile) -> f64 {
    assert_eq!(h.len(), q.len(), "profiles must share a length");
    let floored: Vec<f64> = q.values().iter().map(|&v| v.max(SMOOTHING_FLOOR)).collect();
    let sum: f64 = floored.iter().sum();
    let mut kl = 0.0;
    for (&hi, &qi) in h.values().iter().zip(&floored) {
        if hi > 0.0 {
            kl += hi * (hi.ln() - (qi / sum).ln());
        }
    }
    kl
}

/// L1 distance between equal-length profiles.
pub fn profile_l1(a: &ConfidenceProfile, b: &ConfidenceProfile) -> f64 {
    assert_eq!(a.len(), b.len(), "profiles must share a length");
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Softmax of `logits / t` over the given answers. `t = 1` is plain softmax.
pub fn temperature_scale(
    answers: Vec<String>,
    logits: &[f64],
    t: f64,
) -> Result<AnswerDistribution> {
    if !t.is_finite() || t <= 0.0 {
        return Err(HadolaError::InvalidTemperature(t));
    }
    if answers.len() != logits.len() {
        return Err(HadolaError::SupportMismatch(format!(
            "{} answers vs {} logits",
            answers.len(),
            logits.len()
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
    AnswerDistribution::new(answers, softmax_stable(&scaled))
}

/// Per-stratum slice of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub n: usize,
    pub vqa_acc: f64,
    pub hu_acc: f64,
    pub kl: f64,
}

/// Aggregated evaluation over a dataset: overall means plus sub-reports per
/// HU stratum. Empty strata are absent rather than NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub vqa_acc_mean: f64,
    pub hu_acc_mean: f64,
    pub kl_mean: f64,
    pub low: Option<StratumReport>,
    pub medium: Option<StratumReport>,
    pub high: Option<StratumReport>,
}

impl EvalReport {
    /// CSV with columns stratum,n,vqa_acc,hu_acc,kl; one row overall plus one
    /// per present stratum.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stratum,n,vqa_acc,hu_acc,kl\n");
        out.push_str(&format!(
            "overall,{},{},{},{}\n",
            self.n, self.vqa_acc_mean, self.hu_acc_mean, self.kl_mean
        ));
        for (name, report) in [
            ("low", &self.low),
            ("medium", &self.medium),
            ("high", &self.high),
        ] {
            if let Some(r) = report {
                out.push_str(&format!(
                    "{name},{},{},{},{}\n",
                    r.n, r.vqa_acc, r.hu_acc, r.kl
                ));
            }
        }
        out
    }
}

struct SampleScore {
    vqa: f64,
    hu: f64,
    kl: f64,
    level: HuLevel,
}

fn score_sample(model: &SurrogateModel, sample: &AnnotatedSample, t: f64) -> Result<SampleScore> {
    let (answers, logits) = model.restricted_logits(sample)?;
    let p_model = temperature_scale(answers, &logits, t)?;
    let model_answer = p_model.argmax_answer().to_string();
    let h = sample.human_distribution();
    let (h_aligned, p_aligned) = align_support(&h, &p_model);
    Ok(SampleScore {
        vqa: vqa_acc(&model_answer, sample),
        hu: hu_acc(&model_answer, sample),
        kl: kl_divergence(&h_aligned, &p_aligned)?,
        level: sample.hu_level(),
    })
}

/// Evaluate a model over a dataset. The model answer per sample is the
/// argmax of the restricted distribution (ties to the lexicographically
/// smallest answer). Per-sample scoring fans out across workers; the
/// aggregation runs over the collected scores in dataset order, so parallel
/// and serial runs agree bitwise.
pub fn evaluate(model: &SurrogateModel, dataset: &[AnnotatedSample]) -> Result<EvalReport> {
    evaluate_with_temperature(model, dataset, 1.0)
}

pub fn evaluate_with_temperature(
    model: &SurrogateModel,
    dataset: &[AnnotatedSample],
    t: f64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(HadolaError::EmptyDataset);
    }
    let scores: Vec<SampleScore> = dataset
        .par_iter()
        .map(|s| score_sample(model, s, t))
        .collect::<Result<_>>()?;

    let aggregate = |filter: Option<HuLevel>| -> Option<StratumReport> {
        let mut n = 0usize;
        let (mut vqa, mut hu, mut kl) = (0.0, 0.0, 0.0);
        for s in &scores {
            if filter.is_none_or(|lvl| s.level == lvl) {
                n += 1;
                vqa += s.vqa;
                hu += s.hu;
                kl += s.kl;
            }
        }
        (n > 0).then(|| StratumReport {
            n,
            vqa_acc: vqa / n as f64,
            hu_acc: hu / n as f64,
            kl: kl / n as f64,
        })
    };

    let overall = aggregate(None).expect("dataset is non-empty");
    let report = EvalReport {
        n: overall.n,
        vqa_acc_mean: overall.vqa_acc,
        hu_acc_mean: overall.hu_acc,
        kl_mean: overall.kl,
        low: aggregate(Some(HuLevel::Low)),
        medium: aggregate(Some(HuLevel::Medium)),
        high: aggregate(Some(HuLevel::High)),
    };
    debug_assert!(report.hu_acc_mean <= report.vqa_acc_mean + 1e-12);
    debug_assert!(
        report.vqa_acc_mean.is_finite()
            && report.hu_acc_mean.is_finite()
            && report.kl_mean.is_finite()
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{Annotation, ConfidenceLabel};
    use ConfidenceLabel::{Maybe, No, Yes};

    fn sample_from(answers: &[(&str, ConfidenceLabel)], features: Vec<f64>) -> AnnotatedSample {
        let annotations = answers
            .iter()
            .map(|(a, c)| Annotation::new(a, *c).unwrap())
            .collect();
        AnnotatedSample::new("s".to_string(), features, annotations).unwrap()
    }

    fn dist(pairs: &[(&str, f64)]) -> AnswerDistribution {
        AnswerDistribution::new(
            pairs.iter().map(|(a, _)| a.to_string()).collect(),
            pairs.iter().map(|(_, w)| *w).collect(),
        )
        .unwrap()
    }

    #[test]
    fn vqa_acc_counts() {
        let s = sample_from(
            &[
                ("blue", Yes),
                ("blue", Yes),
                ("blue", Yes),
                ("red", Maybe),
                ("red", Maybe),
                ("green", No),
                ("green", No),
                ("green", No),
                ("green", No),
                ("green", No),
            ],
            vec![0.0],
        );
        assert_eq!(vqa_acc("blue", &s), 1.0);
        assert!((vqa_acc("red", &s) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(vqa_acc("purple", &s), 0.0);
        assert_eq!(vqa_acc("green", &s), 1.0);
    }

    #[test]
    fn hu_acc_examples() {
        let unanimous = sample_from(&[("blue", Yes); 10], vec![0.0]);
        assert_eq!(hu_acc("blue", &unanimous), 0.99 * 1.0);
        assert_eq!(hu_acc("zebra", &unanimous), 0.0);

        // HaConf 0.5 with exactly 2 matching annotators -> 0.5 * 2/3
        let s = sample_from(
            &[
                ("red", Maybe),
                ("red", Maybe),
                ("blue", Yes),
                ("blue", Yes),
                ("blue", Yes),
                ("blue", Yes),
                ("blue", Yes),
                ("blue", Yes),
                ("blue", Yes),
                ("blue", Yes),
            ],
            vec![0.0],
        );
        assert!((hu_acc("red", &s) - 0.5 * (2.0 / 3.0)).abs() < 1e-12);
        assert!((hu_acc("red", &s) - 0.333333).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let h = dist(&[("a", 0.75), ("b", 0.25)]);
        let p = dist(&[("a", 0.5), ("b", 0.5)]);
        let kl = kl_divergence(&h, &p).unwrap();
        assert!((kl - 0.130812).abs() < 1e-6);

        assert_eq!(kl_divergence(&h, &h).unwrap(), 0.0);

        let point = dist(&[("a", 1.0)]);
        assert_eq!(kl_divergence(&point, &point).unwrap(), 0.0);

        let q = dist(&[("b", 0.5), ("a", 0.5)]);
        assert!(matches!(
            kl_divergence(&h, &q),
            Err(HadolaError::SupportMismatch(_))
        ));
    }

    #[test]
    fn align_support_examples() {
        let h = dist(&[("a", 0.75), ("b", 0.25)]);
        let p = dist(&[("a", 0.5), ("b", 0.5)]);
        let (h2, p2) = align_support(&h, &p);
        assert_eq!(h2, h);
        assert_eq!(p2, p);

        // h over {a, b}, p over {a} only
        let p_single = dist(&[("a", 1.0)]);
        let (h3, p3) = align_support(&h, &p_single);
        assert_eq!(h3.answers(), h.answers());
        assert_eq!(h3.weights()[1], 0.25);
        let sum: f64 = p3.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((p3.weights()[0] - 1.0).abs() < 2e-6);
        assert!(p3.weights()[1] > 0.0 && p3.weights()[1] < 2e-6);

        let single = dist(&[("a", 1.0)]);
        let (h4, p4) = align_support(&single, &single);
        assert_eq!(h4.weights(), &[1.0]);
        assert_eq!(p4.weights(), &[1.0]);
    }

    #[test]
    fn canonical_profile_examples() {
        let d = dist(&[("a", 0.5), ("b", 0.3), ("c", 0.2)]);
        let p = canonical_profile(&d, 2);
        assert!((p.values()[0] - 0.625).abs() < 1e-12);
        assert!((p.values()[1] - 0.375).abs() < 1e-12);

        let single = dist(&[("a", 1.0)]);
        let padded = canonical_profile(&single, 3);
        assert_eq!(padded.values(), &[1.0, 0.0, 0.0]);

        let already = dist(&[("a", 0.6), ("b", 0.4)]);
        let same = canonical_profile(&already, 2);
        assert_eq!(same.values(), &[0.6, 0.4]);
    }

    #[test]
    fn temperature_scale_examples() {
        let answers = vec!["a".to_string(), "b".to_string()];
        let plain = temperature_scale(answers.clone(), &[2.0, 0.0], 1.0).unwrap();
        assert!((plain.weights()[0] - 0.880797).abs() < 1e-6);

        let scaled = temperature_scale(answers.clone(), &[2.0, 0.0], 1.2).unwrap();
        assert!((scaled.weights()[0] - 0.841131).abs() < 1e-6);
        assert!((scaled.weights()[1] - 0.158869).abs() < 1e-6);

        let flat = temperature_scale(answers.clone(), &[2.0, 0.0], 100.0).unwrap();
        assert!((flat.weights()[0] - 0.5).abs() < 0.01);
        assert!(flat.weights()[0] > 0.5);

        assert!(matches!(
            temperature_scale(answers, &[2.0, 0.0], 0.0),
            Err(HadolaError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn evaluate_matches_hand_composition() {
        use crate::model::SurrogateModel;
        // single sample, all annotators yes on one answer; model weights zero
        // -> restricted over one answer -> that answer predicted
        let s = sample_from(&[("c000", Yes); 10], vec![0.0, 0.0]);
        let vocab = vec!["c000".to_string(), "c001".to_string()];
        let model = SurrogateModel::init(2, vocab, 3).unwrap();
        let report = evaluate(&model, &[s]).unwrap();
        assert_eq!(report.vqa_acc_mean, 1.0);
        assert_eq!(report.hu_acc_mean, 0.99);
        assert_eq!(report.kl_mean, 0.0); // single-answer supports on both sides
        assert!(report.low.is_some());
        assert!(report.medium.is_none());
        assert!(report.high.is_none());
        assert_eq!(report.low.unwrap().n, 1);
    }

    #[test]
    fn evaluate_is_deterministic() {
        use crate::model::SurrogateModel;
        let mut samples = Vec::new();
        for i in 0..40 {
            let (a, b) = match i % 3 {
                0 => ("c000", "c001"),
                1 => ("c001", "c002"),
                _ => ("c002", "c000"),
            };
            let mut anns = vec![(a, Yes); 6];
            anns.extend(vec![(b, Maybe); 4]);
            samples.push(sample_from(&anns, vec![i as f64 * 0.1, -(i as f64) * 0.05]));
        }
        let vocab = vec!["c000".to_string(), "c001".to_string(), "c002".to_string()];
        let model = SurrogateModel::init(2, vocab, 9).unwrap();
        let a = evaluate(&model, &samples).unwrap();
        let b = evaluate(&model, &samples).unwrap();
        assert_eq!(a, b);
        assert!(a.hu_acc_mean <= a.vqa_acc_mean + 1e-12);
        let csv = a.to_csv();
        assert!(csv.starts_with("stratum,n,vqa_acc,hu_acc,kl\n"));
        assert!(csv.contains("overall,40,"));
    }
}
