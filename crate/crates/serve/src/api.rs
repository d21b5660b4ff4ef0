//! Request and response bodies.

use std::collections::BTreeMap;
use std::path::PathBuf;

use dtal_core::active::{ALConfig, IterationLog};
use dtal_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    #[default]
    Random,
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Name of a prepared dataset directory under the data root.
    pub dataset: String,
    #[serde(default)]
    pub config: ALConfig,
    #[serde(default)]
    pub init: Init,
    /// Architecture for random initialization; ignored for checkpoints.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Use the dataset's train labels to report FP/TP/FN/TN per iteration.
    #[serde(default)]
    pub attach_gold: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionState {
    AwaitingLabels,
    Training,
    Idle,
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    LikelyFp,
    LikelyFn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPair {
    pub pair_id: usize,
    pub left_id: String,
    pub right_id: String,
    pub left: BTreeMap<String, String>,
    pub right: BTreeMap<String, String>,
    pub probability: f64,
    pub bucket: Bucket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub session_id: String,
    pub iteration: usize,
    /// Attribute names in schema order.
    pub attributes: Vec<String>,
    pub pairs: Vec<BatchPair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelValue {
    Match,
    NonMatch,
}

impl LabelValue {
    pub fn is_match(self) -> bool {
        self == LabelValue::Match
    }

    pub fn of(is_match: bool) -> Self {
        if is_match {
            LabelValue::Match
        } else {
            LabelValue::NonMatch
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelItem {
    pub pair_id: usize,
    pub label: LabelValue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSubmission {
    pub labels: Vec<LabelItem>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsAccepted {
    pub accepted: usize,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advanced {
    pub session_id: String,
    pub iteration: usize,
    pub state: SessionState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub session_id: String,
    pub dataset: String,
    pub state: SessionState,
    /// Iteration being labeled or trained; the last one once finished.
    pub iteration: usize,
    pub iterations: usize,
    pub completed_iterations: usize,
    /// Human picks in the current batch and how many of them are labeled.
    pub pending: usize,
    pub labeled: usize,
    pub human_labels: usize,
    pub error: Option<String>,
}

/// One iteration log; the breakdown counts are null without gold labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub model_version: u64,
    pub human_labels: usize,
    pub proxy_labels: usize,
    pub fp: Option<usize>,
    pub tp: Option<usize>,
    #[serde(rename = "fn")]
    pub fn_: Option<usize>,
    pub tn: Option<usize>,
    pub proxy_errors: Option<usize>,
    pub f1_on_labeled: f64,
    pub best_epoch: usize,
    pub test_f1: Option<f64>,
    pub pool_size: usize,
    pub labeled_size: usize,
}

impl MetricsRow {
    pub fn from_log(log: &IterationLog, with_gold: bool) -> Self {
        let gold = |v: usize| with_gold.then_some(v);
        Self {
            iteration: log.iteration,
            model_version: log.model_version,
            human_labels: log.human_labels,
            proxy_labels: log.proxy_labels,
            fp: gold(log.fp),
            tp: gold(log.tp),
            fn_: gold(log.fn_),
            tn: gold(log.tn),
            proxy_errors: log.proxy_errors,
            f1_on_labeled: log.f1_on_labeled,
            best_epoch: log.best_epoch,
            test_f1: log.test_f1,
            pool_size: log.pool_size,
            labeled_size: log.labeled_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub session_id: String,
    pub history: Vec<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing: Option<Vec<usize>>,
}
