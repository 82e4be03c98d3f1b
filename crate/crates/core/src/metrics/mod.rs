//! Fragment-level evaluation.
//!
//! Predictions are scored per modality against the dialogue's full ID
//! universe, which defines true negatives for MCC. Per-modality values are
//! averaged into joint scores, aggregated over tasks, and broken down by
//! dialogue length.

mod sweep;
mod windows;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{parse_prediction, Dialogue, ElementId, Modality, ParseMode, PredictionSet, TaskInstance};
use crate::embeddings::{cosine, EmbedItem, EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::rewards::{adjacent_mean_cosine, fragment_sequence};

pub use sweep::{
    element_similarities, predict_at, sweep_tasks, threshold_sweep, SimilarityMap, SweepPoint, SweepResult, SweepTask,
    ThresholdGrid,
};
pub use windows::{make_windows, merge_task_windows, merge_windows, WindowConfig};

/// Fallback for fragment consistency on fewer than two elements (before scaling).
pub const FRAGMENT_FALLBACK: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("invalid threshold grid: {0}")]
    InvalidGrid(String),
    #[error("invalid window config: {0}")]
    InvalidWindow(String),
    #[error("task {task_id}: window {start}..{end} does not match the window layout")]
    WindowMismatch { task_id: String, start: usize, end: usize },
    #[error("task {task_id}: missing prediction for window {start}..{end}")]
    MissingWindow { task_id: String, start: usize, end: usize },
    #[error(transparent)]
    Provider(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Empty prediction: 1 when the ground truth is also empty, else 0.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp > 0 {
            self.tp as f64 / (self.tp + self.fp) as f64
        } else if self.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    }

    /// Empty ground truth: 1 when the prediction is also empty, else 0.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ > 0 {
            self.tp as f64 / (self.tp + self.fn_) as f64
        } else if self.fp == 0 {
            1.0
        } else {
            0.0
        }
    }

    /// `2tp / (2tp + fp + fn)`, 1 when prediction and ground truth are both empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn mcc(&self) -> f64 {
        mcc(self)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

/// Counts over `universe`. Predicted IDs outside the universe are not counted;
/// their number is returned alongside.
pub fn confusion(
    pred: &BTreeSet<ElementId>,
    gt: &BTreeSet<ElementId>,
    universe: &BTreeSet<ElementId>,
) -> (ConfusionCounts, usize) {
    debug_assert!(gt.is_subset(universe), "ground truth outside universe");
    let mut c = ConfusionCounts::default();
    let mut dropped = 0;
    for id in pred {
        if !universe.contains(id) {
            dropped += 1;
        } else if gt.contains(id) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    c.fn_ = gt.iter().filter(|id| !pred.contains(id)).count();
    c.tn = universe.len() - c.tp - c.fp - c.fn_;
    (c, dropped)
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let product = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if product == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / product.sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub counts: ConfusionCounts,
}

impl ModalityMetrics {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        ModalityMetrics {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            mcc: counts.mcc(),
            counts,
        }
    }

    pub fn summary(&self) -> ModalitySummary {
        ModalitySummary { precision: self.precision, recall: self.recall, f1: self.f1, mcc: self.mcc }
    }

    fn scaled(self, k: f64) -> Self {
        ModalityMetrics {
            precision: self.precision * k,
            recall: self.recall * k,
            f1: self.f1 * k,
            mcc: self.mcc * k,
            counts: self.counts,
        }
    }
}

/// Precision/recall/F1/MCC for one modality, possibly averaged over tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

impl ModalitySummary {
    fn scaled(self, k: f64) -> Self {
        ModalitySummary { precision: self.precision * k, recall: self.recall * k, f1: self.f1 * k, mcc: self.mcc * k }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JointMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    /// Harmonic mean of the joint precision and recall.
    pub pr_harmonic: f64,
}

impl JointMetrics {
    pub fn scaled(self, k: f64) -> Self {
        JointMetrics {
            precision: self.precision * k,
            recall: self.recall * k,
            f1: self.f1 * k,
            mcc: self.mcc * k,
            pr_harmonic: self.pr_harmonic * k,
        }
    }
}

/// Joint scores are plain means of the two modalities; `pr_harmonic` is
/// reported next to them.
pub fn joint_aggregate(utt: &ModalitySummary, img: &ModalitySummary) -> JointMetrics {
    let precision = (utt.precision + img.precision) / 2.0;
    let recall = (utt.recall + img.recall) / 2.0;
    let pr_harmonic = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    JointMetrics { precision, recall, f1: (utt.f1 + img.f1) / 2.0, mcc: (utt.mcc + img.mcc) / 2.0, pr_harmonic }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub dialogue_id: String,
    pub turn_count: usize,
    pub utterance: ModalityMetrics,
    pub image: ModalityMetrics,
    pub joint: JointMetrics,
    pub dropped_ids: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragment_consistency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_similarity: Option<f64>,
}

/// Scores a parsed prediction against a task.
pub fn score_task(pred: &PredictionSet, task: &TaskInstance, dialogue: &Dialogue) -> TaskScore {
    let mut dropped_ids = 0;
    let mut per = |m: Modality| {
        let (c, dropped) = confusion(pred.ids(m), task.gt(m), &dialogue.ids(m));
        dropped_ids += dropped;
        ModalityMetrics::from_counts(c)
    };
    let utterance = per(Modality::Utterance);
    let image = per(Modality::Image);
    TaskScore {
        task_id: task.task_id.clone(),
        dialogue_id: dialogue.dialogue_id.clone(),
        turn_count: dialogue.turn_count(),
        utterance,
        image,
        joint: joint_aggregate(&utterance.summary(), &image.summary()),
        dropped_ids,
        parse_error: None,
        fragment_consistency: None,
        query_similarity: None,
    }
}

/// Parses a raw output and scores it. Unparseable output counts as an empty
/// prediction; a missing output is passed as `None` and scored the same way.
/// With a provider, the embedding metrics are filled in as well.
pub fn score_prediction(
    raw: Option<&str>,
    task: &TaskInstance,
    dialogue: &Dialogue,
    mode: ParseMode,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<TaskScore, EmbeddingError> {
    let (pred, parse_error) = match raw.map(|r| parse_prediction(r, mode)) {
        Some(Ok(p)) => (p.prediction, None),
        Some(Err(e)) => (PredictionSet::default(), Some(e.kind().to_string())),
        None => (PredictionSet::default(), Some("missing_prediction".to_string())),
    };
    let mut score = score_task(&pred, task, dialogue);
    score.parse_error = parse_error;
    if let Some(provider) = provider {
        score.fragment_consistency = Some(fragment_consistency_metric(&pred, dialogue, provider)?);
        let query = provider.get(&EmbedItem::query(&task.task_id, &task.query))?;
        score.query_similarity = query_similarity_metric(&query, &pred, dialogue, provider)?;
    }
    Ok(score)
}

/// Mean adjacent cosine of retrieved elements in document order, ×100.
pub fn fragment_consistency_metric(
    pred: &PredictionSet,
    dialogue: &Dialogue,
    provider: &dyn EmbeddingProvider,
) -> Result<f64, EmbeddingError> {
    let seq = fragment_sequence(pred, dialogue);
    let value = if seq.items.len() < 2 {
        FRAGMENT_FALLBACK
    } else {
        adjacent_mean_cosine(&provider.get_batch(&seq.items)?, FRAGMENT_FALLBACK)?
    };
    Ok(value * 100.0)
}

/// Mean cosine between the query and each retrieved element, ×100.
/// `None` when nothing resolvable was retrieved.
pub fn query_similarity_metric(
    query: &EmbeddingVector,
    pred: &PredictionSet,
    dialogue: &Dialogue,
    provider: &dyn EmbeddingProvider,
) -> Result<Option<f64>, EmbeddingError> {
    let seq = fragment_sequence(pred, dialogue);
    if seq.items.is_empty() {
        return Ok(None);
    }
    let vectors = provider.get_batch(&seq.items)?;
    let mut sum = 0.0;
    for v in &vectors {
        sum += cosine(query, v)?;
    }
    Ok(Some(sum / vectors.len() as f64 * 100.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Mean of per-task values.
    #[default]
    Macro,
    /// Metrics of counts pooled over tasks.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub tasks: usize,
    pub utterance: ModalitySummary,
    pub image: ModalitySummary,
    pub joint: JointMetrics,
}

impl AggregateMetrics {
    pub fn scaled(self, k: f64) -> Self {
        AggregateMetrics {
            tasks: self.tasks,
            utterance: self.utterance.scaled(k),
            image: self.image.scaled(k),
            joint: self.joint.scaled(k),
        }
    }
}

fn mean_summary<'a>(items: impl Iterator<Item = &'a ModalityMetrics>) -> ModalitySummary {
    let mut acc = ModalitySummary::default();
    let mut n = 0usize;
    for m in items {
        acc.precision += m.precision;
        acc.recall += m.recall;
        acc.f1 += m.f1;
        acc.mcc += m.mcc;
        n += 1;
    }
    acc.scaled(1.0 / n as f64)
}

/// Aggregates task scores; `None` for an empty set.
pub fn aggregate<'a>(
    scores: impl IntoIterator<Item = &'a TaskScore>,
    averaging: Averaging,
) -> Option<AggregateMetrics> {
    let scores: Vec<&TaskScore> = scores.into_iter().collect();
    if scores.is_empty() {
        return None;
    }
    let (utterance, image) = match averaging {
        Averaging::Macro => {
            (mean_summary(scores.iter().map(|s| &s.utterance)), mean_summary(scores.iter().map(|s| &s.image)))
        }
        Averaging::Micro => {
            let pooled = |f: fn(&TaskScore) -> ConfusionCounts| {
                ModalityMetrics::from_counts(scores.iter().map(|s| f(s)).fold(ConfusionCounts::default(), |a, b| a + b))
                    .summary()
            };
            (pooled(|s| s.utterance.counts), pooled(|s| s.image.counts))
        }
    };
    Some(AggregateMetrics { tasks: scores.len(), utterance, image, joint: joint_aggregate(&utterance, &image) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnBucket {
    Short,
    Medium,
    Long,
}

/// Short is `T < short_below`, long is `T > long_above`, medium in between (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketBounds {
    pub short_below: usize,
    pub long_above: usize,
}

impl Default for BucketBounds {
    fn default() -> Self {
        BucketBounds { short_below: 35, long_above: 65 }
    }
}

impl std::str::FromStr for BucketBounds {
    type Err = String;

    /// Parses `"35,65"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("expected LOW,HIGH, got {s:?}"))?;
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
        let bounds = BucketBounds { short_below: parse(a)?, long_above: parse(b)? };
        if bounds.short_below > bounds.long_above + 1 {
            return Err(format!("bucket bounds out of order: {s}"));
        }
        Ok(bounds)
    }
}

impl BucketBounds {
    pub fn bucket(&self, turns: usize) -> TurnBucket {
        if turns < self.short_below {
            TurnBucket::Short
        } else if turns > self.long_above {
            TurnBucket::Long
        } else {
            TurnBucket::Medium
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub tasks: usize,
    /// `None` for an empty bucket.
    pub metrics: Option<AggregateMetrics>,
}

/// Per-bucket aggregates; every bucket is present, empty ones with no metrics.
pub fn bucket_report(
    scores: &[TaskScore],
    bounds: BucketBounds,
    averaging: Averaging,
) -> BTreeMap<TurnBucket, BucketSummary> {
    [TurnBucket::Short, TurnBucket::Medium, TurnBucket::Long]
        .into_iter()
        .map(|b| {
            let members: Vec<&TaskScore> = scores.iter().filter(|s| bounds.bucket(s.turn_count) == b).collect();
            let summary = BucketSummary { tasks: members.len(), metrics: aggregate(members, averaging) };
            (b, summary)
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Evaluation output. All metric values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub averaging: Averaging,
    pub aggregate: Option<AggregateMetrics>,
    pub buckets: BTreeMap<TurnBucket, BucketSummary>,
    pub bucket_bounds: BucketBounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragment_consistency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_similarity: Option<f64>,
    pub unparseable: usize,
    pub dropped_ids_total: usize,
    pub per_task: Vec<TaskScore>,
}

impl EvaluationReport {
    pub fn build(scores: Vec<TaskScore>, bounds: BucketBounds, averaging: Averaging) -> Self {
        let pct = |m: Option<AggregateMetrics>| m.map(|m| m.scaled(100.0));
        let buckets = bucket_report(&scores, bounds, averaging)
            .into_iter()
            .map(|(b, s)| (b, BucketSummary { tasks: s.tasks, metrics: pct(s.metrics) }))
            .collect();
        let per_task = scores
            .iter()
            .map(|s| TaskScore {
                utterance: s.utterance.scaled(100.0),
                image: s.image.scaled(100.0),
                joint: s.joint.scaled(100.0),
                ..s.clone()
            })
            .collect();
        EvaluationReport {
            averaging,
            aggregate: pct(aggregate(&scores, averaging)),
            buckets,
            bucket_bounds: bounds,
            fragment_consistency: mean_of(scores.iter().filter_map(|s| s.fragment_consistency)),
            query_similarity: mean_of(scores.iter().filter_map(|s| s.query_similarity)),
            unparseable: scores.iter().filter(|s| s.parse_error.is_some()).count(),
            dropped_ids_total: scores.iter().map(|s| s.dropped_ids).sum(),
            per_task,
        }
    }
}
