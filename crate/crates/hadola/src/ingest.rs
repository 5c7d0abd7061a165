//! Ingestion of VQA-style annotation files into the internal dataset format.
//!
//! Reads the standard annotation schema (a top-level `annotations` array in
//! which every record carries a `question_id` and exactly ten `answers`,
//! each with an `answer` string and an `answer_confidence` in
//! {yes, maybe, no}). Malformed records are collected and reported per id,
//! never silently dropped or coerced.
//!
//! Real embeddings are out of scope, so features come either from a
//! per-question feature file (JSONL of `{"id": ..., "features": [...]}`) or
//! from a deterministic hash embedding of the question text. The hash
//! embedding keeps the pipeline runnable end to end on real annotation
//! files for stratification and metric purposes; it carries no claim of
//! semantic fidelity.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::annotations::{AnnotatedSample, Annotation, ConfidenceLabel};
use crate::error::{HadolaError, Result};

pub const DEFAULT_HASH_DIM: usize = 64;

/// Where per-question features come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// JSONL file mapping question id to a feature vector.
    File(PathBuf),
    /// Deterministic hash embedding of the question text.
    HashEmbedding { dim: usize },
}

impl Default for FeatureSource {
    fn default() -> Self {
        Self::HashEmbedding {
            dim: DEFAULT_HASH_DIM,
        }
    }
}

/// A per-record problem found while parsing. Parsing continues past these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestIssue {
    MalformedRecord { question_id: String, reason: String },
    OrphanRecord { question_id: String, reason: String },
}

impl IngestIssue {
    pub fn question_id(&self) -> &str {
        match self {
            Self::MalformedRecord { question_id, .. } => question_id,
            Self::OrphanRecord { question_id, .. } => question_id,
        }
    }

    pub fn is_malformed(&self) -> bool {
        matches!(self, Self::MalformedRecord { .. })
    }
}

#[derive(Debug)]
pub struct ParseOutcome {
    pub samples: Vec<AnnotatedSample>,
    pub issues: Vec<IngestIssue>,
}

#[derive(Deserialize)]
struct VqaAnnotationsFile {
    annotations: Vec<VqaAnnotationRecord>,
}

#[derive(Deserialize)]
struct VqaAnnotationRecord {
    question_id: serde_json::Value,
    answers: Vec<VqaAnswer>,
}

#[derive(Deserialize)]
struct VqaAnswer {
    answer: String,
    answer_confidence: String,
}

#[derive(Deserialize)]
struct VqaQuestionsFile {
    questions: Vec<VqaQuestionRecord>,
}

#[derive(Deserialize)]
struct VqaQuestionRecord {
    question_id: serde_json::Value,
    question: String,
}

#[derive(Deserialize)]
struct FeatureLine {
    id: String,
    features: Vec<f64>,
}

fn id_string(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// FNV-1a over a byte stream; stable across platforms and releases.
fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic pseudo-embedding of a question string: one hash per
/// dimension, mapped into [-1, 1).
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let h = fnv1a64(
                text.bytes()
                    .chain(std::iter::once(0xff))
                    .chain((i as u64).to_le_bytes()),
            );
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn read_feature_file(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let file = std::fs::File::open(path)?;
    let mut map = HashMap::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FeatureLine = serde_json::from_str(&line)?;
        map.insert(parsed.id, parsed.features);
    }
    Ok(map)
}

fn read_questions_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let file: VqaQuestionsFile = serde_json::from_str(&text)?;
    Ok(file
        .questions
        .into_iter()
        .map(|q| (id_string(&q.question_id), q.question))
        .collect())
}

/// Parse a VQA-schema annotations file into internal samples.
///
/// One sample per well-formed record, in source order; records with a wrong
/// answer count or an unknown confidence token become `MalformedRecord`
/// issues, records whose id cannot be cross-referenced against the question
/// or feature source become `OrphanRecord` issues.
pub fn parse_vqa_annotations(
    annotations_file: &Path,
    questions_file: Option<&Path>,
    feature_source: &FeatureSource,
) -> Result<ParseOutcome> {
    let text = std::fs::read_to_string(annotations_file)?;
    let parsed: VqaAnnotationsFile = serde_json::from_str(&text)?;

    let questions = match questions_file {
        Some(path) => Some(read_questions_file(path)?),
        None => None,
    };
    let features = match feature_source {
        FeatureSource::File(path) => Some(read_feature_file(path)?),
        FeatureSource::HashEmbedding { dim } => {
            if questions.is_none() {
                return Err(HadolaError::ConfigError(
                    "hash-embedding features require a questions file".to_string(),
                ));
            }
            if *dim == 0 {
                return Err(HadolaError::ConfigError(
                    "hash embedding dimension must be positive".to_string(),
                ));
            }
            None
        }
    };

    let mut samples = Vec::new();
    let mut issues = Vec::new();

    'records: for record in &parsed.annotations {
        let qid = id_string(&record.question_id);
        if record.answers.len() != crate::annotations::ANNOTATORS_PER_SAMPLE {
            issues.push(IngestIssue::MalformedRecord {
                question_id: qid,
                reason: format!("expected 10 answers, got {}", record.answers.len()),
            });
            continue;
        }
        let mut annotations = Vec::with_capacity(record.answers.len());
        for ans in &record.answers {
            let confidence = match ConfidenceLabel::parse(&ans.answer_confidence) {
                Ok(c) => c,
                Err(_) => {
                    issues.push(IngestIssue::MalformedRecord {
                        question_id: qid.clone(),
                        reason: format!("unknown confidence token `{}`", ans.answer_confidence),
                    });
                    continue 'records;
                }
            };
            match Annotation::new(&ans.answer, confidence) {
                Ok(a) => annotations.push(a),
                Err(_) => {
                    issues.push(IngestIssue::MalformedRecord {
                        question_id: qid.clone(),
                        reason: format!("answer `{}` is empty after normalization", ans.answer),
                    });
                    continue 'records;
                }
            }
        }

        let feats: Vec<f64> = match feature_source {
            FeatureSource::File(_) => {
                let map = features.as_ref().expect("feature map loaded");
                match map.get(&qid) {
                    Some(f) => f.clone(),
                    None => {
                        issues.push(IngestIssue::OrphanRecord {
                            question_id: qid,
                            reason: "no entry in the feature file".to_string(),
                        });
                        continue;
                    }
                }
            }
            FeatureSource::HashEmbedding { dim } => {
                let qmap = questions.as_ref().expect("questions loaded");
                match qmap.get(&qid) {
                    Some(question) => hash_embedding(question, *dim),
                    None => {
                        issues.push(IngestIssue::OrphanRecord {
                            question_id: qid,
                            reason: "no matching question record".to_string(),
                        });
                        continue;
                    }
                }
            }
        };

        match AnnotatedSample::new(qid.clone(), feats, annotations) {
            Ok(sample) => samples.push(sample),
            Err(e) => issues.push(IngestIssue::MalformedRecord {
                question_id: qid,
                reason: e.to_string(),
            }),
        }
    }

    Ok(ParseOutcome { samples, issues })
}

/// Drop samples that are entirely unanswerable: the modal normalized answer
/// is "unanswerable" with at least five votes.
pub fn filter_unanswerable(samples: Vec<AnnotatedSample>) -> Vec<AnnotatedSample> {
    samples
        .into_iter()
        .filter(|s| {
            let unanswerable = s.annotator_count("unanswerable");
            if unanswerable < 5 {
                return true;
            }
            let max_count = s
                .distinct_answers()
                .iter()
                .map(|a| s.annotator_count(a))
                .max()
                .unwrap_or(0);
            unanswerable < max_count
        })
        .collect()
}
