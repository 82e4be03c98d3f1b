//! Verifiable rewards for group-relative policy optimization.
//!
//! Each candidate output is scored by three rewards:
//! - format: 1 when the output is exactly the two ID blocks with no repeated IDs;
//! - F1: modality-weighted set F1, each term damped by `gamma^|len(pred) - len(gt)|`;
//! - fragment order: mean cosine of adjacent retrieved elements in document order.
//!
//! The rewards are combined into one scalar, normalized within each group of
//! candidates, and groups without reward variance are filtered out.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{parse_prediction, Dialogue, ElementId, Modality, ParseMode, PredictionSet, TaskInstance};
use crate::embeddings::{cosine, EmbedItem, EmbeddingError, EmbeddingProvider, EmbeddingVector};

pub const DEFAULT_GROUP_SIZE: usize = 8;
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("group has {0} rewards; at least 2 are required")]
    GroupTooSmall(usize),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Provider(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombineWeights {
    pub format: f64,
    pub f1: f64,
    pub fragment: f64,
}

impl Default for CombineWeights {
    fn default() -> Self {
        CombineWeights { format: 1.0, f1: 1.0, fragment: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_utt: f64,
    pub lambda_img: f64,
    /// Length-penalty base, strictly between 0 and 1.
    pub gamma: f64,
    /// Fragment reward when fewer than two elements are retrieved.
    pub fragment_fallback: f64,
    pub combine_weights: CombineWeights,
    /// Zero the whole reward when the format reward is 0.
    pub format_gate: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_utt: 0.5,
            lambda_img: 0.5,
            gamma: 0.95,
            fragment_fallback: 0.5,
            combine_weights: CombineWeights::default(),
            format_gate: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let fail = |m: String| Err(RewardError::InvalidConfig(m));
        if self.lambda_utt < 0.0 || self.lambda_img < 0.0 {
            return fail("modality weights must be nonnegative".into());
        }
        if (self.lambda_utt + self.lambda_img - 1.0).abs() > 1e-9 {
            return fail(format!("lambda_utt + lambda_img = {} (must be 1)", self.lambda_utt + self.lambda_img));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma = {} (must be in (0, 1))", self.gamma));
        }
        let w = self.combine_weights;
        if [w.format, w.f1, w.fragment].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return fail("combine weights must be finite and nonnegative".into());
        }
        if !self.fragment_fallback.is_finite() {
            return fail("fragment_fallback must be finite".into());
        }
        Ok(())
    }

    fn lambda(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Utterance => self.lambda_utt,
            Modality::Image => self.lambda_img,
        }
    }
}

/// 1 iff `raw` parses strictly and neither list repeats an ID.
pub fn format_reward(raw: &str) -> u8 {
    match parse_prediction(raw, ParseMode::Strict) {
        Ok(p) if !p.duplicates => 1,
        _ => 0,
    }
}

/// Set F1, `2|P∩G| / (|P|+|G|)`. Two empty sets score 1; one empty set scores 0.
pub fn set_f1(pred: &BTreeSet<ElementId>, gt: &BTreeSet<ElementId>) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let overlap = pred.intersection(gt).count();
    2.0 * overlap as f64 / (pred.len() + gt.len()) as f64
}

/// Length-penalized, modality-weighted F1 of `pred` against `gt`.
pub fn f1_reward_sets(pred: &PredictionSet, gt: &PredictionSet, cfg: &RewardConfig) -> f64 {
    Modality::ALL
        .iter()
        .map(|&m| {
            let (p, g) = (pred.ids(m), gt.ids(m));
            let deviation = p.len().abs_diff(g.len());
            cfg.lambda(m) * set_f1(p, g) * cfg.gamma.powi(deviation.min(i32::MAX as usize) as i32)
        })
        .sum()
}

pub fn f1_reward(pred: &PredictionSet, task: &TaskInstance, cfg: &RewardConfig) -> f64 {
    f1_reward_sets(pred, &task.ground_truth(), cfg)
}

/// Predicted elements resolved against the dialogue, in document order.
#[derive(Debug, Clone)]
pub struct FragmentSequence {
    pub items: Vec<EmbedItem>,
    /// Predicted IDs that do not exist in the dialogue.
    pub dropped_ids: usize,
}

pub fn fragment_sequence(pred: &PredictionSet, dialogue: &Dialogue) -> FragmentSequence {
    let index = dialogue.element_index();
    let mut found = Vec::with_capacity(pred.len());
    let mut dropped_ids = 0;
    for m in Modality::ALL {
        for &id in pred.ids(m) {
            match index.get(&(m, id)) {
                Some(pos) => found.push((pos.ordinal, EmbedItem::for_element(&dialogue.dialogue_id, pos.message))),
                None => dropped_ids += 1,
            }
        }
    }
    if dropped_ids > 0 {
        log::warn!("dialogue {}: {dropped_ids} predicted id(s) not present", dialogue.dialogue_id);
    }
    found.sort_by_key(|(ordinal, _)| *ordinal);
    FragmentSequence { items: found.into_iter().map(|(_, item)| item).collect(), dropped_ids }
}

/// Mean cosine of consecutive vectors; `fallback` when there are fewer than two.
pub fn adjacent_mean_cosine(vectors: &[EmbeddingVector], fallback: f64) -> Result<f64, EmbeddingError> {
    if vectors.len() < 2 {
        return Ok(fallback);
    }
    let mut sum = 0.0;
    for pair in vectors.windows(2) {
        sum += cosine(&pair[0], &pair[1])?;
    }
    Ok(sum / (vectors.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FragmentScore {
    pub value: f64,
    /// Number of resolved elements in the sequence.
    pub elements: usize,
    pub dropped_ids: usize,
}

/// Fragment order consistency of a prediction.
pub fn fragment_order_reward(
    pred: &PredictionSet,
    dialogue: &Dialogue,
    provider: &dyn EmbeddingProvider,
    cfg: &RewardConfig,
) -> Result<FragmentScore, EmbeddingError> {
    let seq = fragment_sequence(pred, dialogue);
    let value = if seq.items.len() < 2 {
        cfg.fragment_fallback
    } else {
        adjacent_mean_cosine(&provider.get_batch(&seq.items)?, cfg.fragment_fallback)?
    };
    Ok(FragmentScore { value, elements: seq.items.len(), dropped_ids: seq.dropped_ids })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: u8,
    pub r_f1: f64,
    pub r_fragment: f64,
    pub total: f64,
    pub dropped_ids: usize,
}

/// Scores one raw candidate output.
///
/// With the format gate on, a candidate with format reward 0 gets all-zero
/// components. With the gate off, an unparseable output scores 0 on F1 and
/// fragment order, while a parseable output with repeated IDs is scored on
/// its deduplicated sets.
pub fn total_reward(
    raw: &str,
    task: &TaskInstance,
    dialogue: &Dialogue,
    provider: &dyn EmbeddingProvider,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, EmbeddingError> {
    let parsed = parse_prediction(raw, ParseMode::Strict);
    let r_format = match &parsed {
        Ok(p) if !p.duplicates => 1u8,
        _ => 0,
    };
    let zero = RewardBreakdown { r_format, r_f1: 0.0, r_fragment: 0.0, total: 0.0, dropped_ids: 0 };
    if r_format == 0 && cfg.format_gate {
        return Ok(zero);
    }
    let w = cfg.combine_weights;
    let Ok(parsed) = parsed else {
        return Ok(RewardBreakdown { total: w.format * f64::from(r_format), ..zero });
    };
    let r_f1 = f1_reward(&parsed.prediction, task, cfg);
    let fragment = fragment_order_reward(&parsed.prediction, dialogue, provider, cfg)?;
    Ok(RewardBreakdown {
        r_format,
        r_f1,
        r_fragment: fragment.value,
        total: w.format * f64::from(r_format) + w.f1 * r_f1 + w.fragment * fragment.value,
        dropped_ids: fragment.dropped_ids,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

/// `(r - mean) / (std + 1e-8)` with population std; constant groups map to zeros.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    if is_constant(rewards) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let mu = mean(rewards);
    let var = rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / rewards.len() as f64;
    let denom = var.sqrt() + ADVANTAGE_EPS;
    Ok(rewards.iter().map(|r| (r - mu) / denom).collect())
}

/// Whether a reward group carries any learning signal.
pub fn has_variance(rewards: &[f64]) -> bool {
    !is_constant(rewards)
}

/// Drops groups whose rewards are all equal. Returns the kept groups in order
/// and the number dropped.
pub fn dynamic_filter<G: AsRef<[f64]>>(groups: Vec<G>) -> (Vec<G>, usize) {
    let before = groups.len();
    let kept: Vec<G> = groups.into_iter().filter(|g| has_variance(g.as_ref())).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// One sampled response for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub task_id: String,
    pub candidate_index: usize,
    #[serde(alias = "output")]
    pub raw_output: String,
    /// Per-token entropies in nats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_entropies: Option<Vec<f64>>,
}

/// One line of reward output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLine {
    pub task_id: String,
    pub candidate_index: usize,
    pub r_format: u8,
    pub r_f1: f64,
    pub r_fragment: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
    pub dropped_ids: usize,
}

impl RewardLine {
    pub fn new(candidate: &CandidateRecord, breakdown: &RewardBreakdown, advantage: Option<f64>) -> Self {
        RewardLine {
            task_id: candidate.task_id.clone(),
            candidate_index: candidate.candidate_index,
            r_format: breakdown.r_format,
            r_f1: breakdown.r_f1,
            r_fragment: breakdown.r_fragment,
            total: breakdown.total,
            advantage,
            dropped_ids: breakdown.dropped_ids,
        }
    }
}
