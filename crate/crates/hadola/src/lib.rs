//! Human-uncertainty-aware data selection and automatic labeling around a
//! differentiable softmax surrogate classifier.
//!
//! Datasets pair opaque feature vectors with ten human annotations each
//! (answer plus a yes/maybe/no confidence). The [`annotations`] module
//! derives per-answer and per-sample uncertainty scores from those;
//! [`metrics`] measures accuracy and human-alignment; [`model`] provides the
//! trainable surrogate with analytic gradients; [`pipeline`] chains
//! selection, self-labeling, pair screening and training into a
//! deterministic multi-round loop; [`synth`] and [`ingest`] produce datasets
//! from a simulator or from real annotation files; [`oracles`] holds the
//! independent recomputation paths used by tests.

pub mod annotations;
pub mod cli;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod pipeline;
pub mod synth;

pub use annotations::{AnnotatedSample, Annotation, AnswerDistribution, ConfidenceLabel, HuLevel};
pub use error::{HadolaError, Result};
pub use metrics::{EvalReport, StratumReport};
pub use model::{LossWeights, SurrogateModel, TrainItem};
pub use pipeline::{PipelineConfig, Thresholds};
pub use synth::SynthConfig;
