use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    aggregate, confusion, joint_aggregate, score_task, Averaging, JointMetrics, MetricsError, ModalityMetrics,
};
use crate::dialogue::{Dialogue, ElementId, Modality, PredictionSet, TaskInstance};
use crate::embeddings::{cosine, EmbedItem, EmbeddingError, EmbeddingProvider, EmbeddingVector};

/// Query similarity per element.
pub type SimilarityMap = BTreeMap<(Modality, ElementId), f64>;

/// Inclusive arithmetic range `lo, lo+step, ...` up to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid { lo: 0.0, hi: 1.0, step: 0.05 }
    }
}

impl ThresholdGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self, MetricsError> {
        let g = ThresholdGrid { lo, hi, step };
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
            return Err(MetricsError::InvalidGrid("bounds must be finite".into()));
        }
        if step <= 0.0 {
            return Err(MetricsError::InvalidGrid(format!("step {step} must be positive")));
        }
        if lo > hi {
            return Err(MetricsError::InvalidGrid(format!("empty grid: {lo} > {hi}")));
        }
        Ok(g)
    }

    /// Values are computed as `lo + i*step` so no error accumulates, then
    /// rounded to 12 decimals to drop representation noise.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| ((self.lo + i as f64 * self.step) * 1e12).round() / 1e12).collect()
    }
}

impl FromStr for ThresholdGrid {
    type Err = MetricsError;

    /// Parses `lo:hi:step`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(MetricsError::InvalidGrid(format!("expected lo:hi:step, got {s:?}")));
        }
        let mut v = [0.0; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.trim().parse().map_err(|_| MetricsError::InvalidGrid(format!("not a number: {p:?}")))?;
        }
        ThresholdGrid::new(v[0], v[1], v[2])
    }
}

/// Elements with similarity at or above `tau`.
pub fn predict_at(sims: &SimilarityMap, tau: f64) -> PredictionSet {
    let mut out = PredictionSet::default();
    for (&(m, id), &s) in sims {
        if s >= tau {
            out.ids_mut(m).insert(id);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub joint: JointMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_threshold: f64,
    pub best: JointMetrics,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Metrics multiplied by `k`, thresholds unchanged.
    pub fn scaled(&self, k: f64) -> Self {
        SweepResult {
            best_threshold: self.best_threshold,
            best: self.best.scaled(k),
            points: self
                .points
                .iter()
                .map(|p| SweepPoint { threshold: p.threshold, joint: p.joint.scaled(k) })
                .collect(),
        }
    }
}

fn pick_best(points: Vec<SweepPoint>) -> SweepResult {
    // Strict improvement only, so ties keep the lower threshold.
    let mut best = points[0];
    for p in &points[1..] {
        if p.joint.f1 > best.joint.f1 {
            best = *p;
        }
    }
    SweepResult { best_threshold: best.threshold, best: best.joint, points }
}

/// Sweep for a single prediction target. `universe` holds every element ID
/// of the dialogue per modality.
pub fn threshold_sweep(
    sims: &SimilarityMap,
    gt: &PredictionSet,
    universe: &PredictionSet,
    grid: &ThresholdGrid,
) -> SweepResult {
    let points = grid
        .values()
        .into_iter()
        .map(|tau| {
            let pred = predict_at(sims, tau);
            let per = |m: Modality| {
                ModalityMetrics::from_counts(confusion(pred.ids(m), gt.ids(m), universe.ids(m)).0).summary()
            };
            SweepPoint { threshold: tau, joint: joint_aggregate(&per(Modality::Utterance), &per(Modality::Image)) }
        })
        .collect();
    pick_best(points)
}

/// One task's input to a global sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepTask<'a> {
    pub task: &'a TaskInstance,
    pub dialogue: &'a Dialogue,
    pub sims: &'a SimilarityMap,
}

/// A single threshold shared by all tasks, chosen by aggregate joint F1.
/// `None` when there are no tasks.
pub fn sweep_tasks(tasks: &[SweepTask<'_>], grid: &ThresholdGrid, averaging: Averaging) -> Option<SweepResult> {
    if tasks.is_empty() {
        return None;
    }
    let points = grid
        .values()
        .into_iter()
        .map(|tau| {
            let scores: Vec<_> =
                tasks.iter().map(|t| score_task(&predict_at(t.sims, tau), t.task, t.dialogue)).collect();
            SweepPoint { threshold: tau, joint: aggregate(&scores, averaging).expect("non-empty").joint }
        })
        .collect();
    Some(pick_best(points))
}

/// Cosine between the query and every element of the dialogue.
pub fn element_similarities(
    query: &EmbeddingVector,
    dialogue: &Dialogue,
    provider: &dyn EmbeddingProvider,
) -> Result<SimilarityMap, EmbeddingError> {
    let elements: Vec<_> = dialogue.elements().collect();
    let items: Vec<_> = elements.iter().map(|e| EmbedItem::for_element(&dialogue.dialogue_id, e.message)).collect();
    let vectors = provider.get_batch(&items)?;
    let mut out = SimilarityMap::new();
    for (e, v) in elements.iter().zip(&vectors) {
        out.insert((e.message.kind, e.message.element_id), cosine(query, v)?);
    }
    Ok(out)
}
