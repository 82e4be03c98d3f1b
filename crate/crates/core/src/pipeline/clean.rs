use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{similarity, PipelineError};
use crate::dialogue::{Dialogue, Modality};
use crate::embeddings::{EmbedItem, EmbeddingProvider, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub min_turns: usize,
    pub min_resolution_px: u32,
    pub max_aspect_ratio: f64,
    /// Minimum mean image/caption cosine.
    pub min_image_text_sim: f64,
    /// Minimum mean utterance-to-centroid cosine.
    pub min_topic_coherence: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            min_turns: 3,
            min_resolution_px: 500,
            max_aspect_ratio: 7.5,
            min_image_text_sim: 0.0,
            min_topic_coherence: 0.0,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if !(self.max_aspect_ratio.is_finite() && self.max_aspect_ratio >= 1.0) {
            return bad("max_aspect_ratio must be at least 1");
        }
        for (name, v) in
            [("min_image_text_sim", self.min_image_text_sim), ("min_topic_coherence", self.min_topic_coherence)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PipelineError::InvalidConfig(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Filters in the order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleaningFilter {
    ImageText,
    TopicCoherence,
    TurnStructure,
    ImageQuality,
}

impl fmt::Display for CleaningFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CleaningFilter::ImageText => "image_text",
            CleaningFilter::TopicCoherence => "topic_coherence",
            CleaningFilter::TurnStructure => "turn_structure",
            CleaningFilter::ImageQuality => "image_quality",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReportLine {
    pub dialogue_id: String,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<CleaningFilter>,
    /// Checks that could not run, e.g. `image_size_missing`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

fn image_text_score(d: &Dialogue, provider: &dyn EmbeddingProvider) -> Result<Option<f64>, PipelineError> {
    let pairs: Vec<_> = d
        .elements()
        .filter(|e| e.message.kind == Modality::Image && !e.message.text.is_empty())
        .flat_map(|e| {
            [EmbedItem::image_of(&d.dialogue_id, e.message), EmbedItem::caption_of(&d.dialogue_id, e.message)]
        })
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let v = provider.get_batch(&pairs)?;
    let mut sum = 0.0;
    for pair in v.chunks(2) {
        sum += similarity(&pair[0], &pair[1])?;
    }
    Ok(Some(sum / (v.len() / 2) as f64))
}

fn topic_score(d: &Dialogue, provider: &dyn EmbeddingProvider) -> Result<Option<f64>, PipelineError> {
    let items: Vec<_> = d
        .elements()
        .filter(|e| e.message.kind == Modality::Utterance)
        .map(|e| EmbedItem::for_element(&d.dialogue_id, e.message))
        .collect();
    if items.is_empty() {
        return Ok(None);
    }
    let v = provider.get_batch(&items)?;
    let centroid = EmbeddingVector::mean(&v)?.expect("non-empty");
    let mut sum = 0.0;
    for x in &v {
        sum += similarity(x, &centroid)?;
    }
    Ok(Some(sum / v.len() as f64))
}

/// Alternating between exactly two speakers, opening and closing with the same one.
fn turn_structure_ok(d: &Dialogue, min_turns: usize) -> bool {
    let speakers: BTreeSet<&str> = d.turns.iter().map(|t| t.speaker.as_str()).collect();
    d.turns.len() >= min_turns
        && speakers.len() == 2
        && d.turns.windows(2).all(|w| w[0].speaker != w[1].speaker)
        && d.turns.first().map(|t| &t.speaker) == d.turns.last().map(|t| &t.speaker)
}

/// False when a sized image is too small or too elongated. Images without a
/// size are skipped and reported through `missing_size`.
fn image_quality_ok(d: &Dialogue, cfg: &CleaningConfig, missing_size: &mut bool) -> bool {
    for e in d.elements().filter(|e| e.message.kind == Modality::Image) {
        let (Some(w), Some(h)) = (e.message.width_px, e.message.height_px) else {
            *missing_size = true;
            continue;
        };
        let (lo, hi) = (w.min(h), w.max(h));
        if lo < cfg.min_resolution_px || f64::from(hi) / f64::from(lo) > cfg.max_aspect_ratio {
            return false;
        }
    }
    true
}

/// Runs the four filters in order and reports the first failure.
pub fn check_dialogue(
    d: &Dialogue,
    cfg: &CleaningConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<CleaningReportLine, PipelineError> {
    let mut line =
        CleaningReportLine { dialogue_id: d.dialogue_id.clone(), kept: false, reason: None, flags: Vec::new() };
    if image_text_score(d, provider)?.is_some_and(|s| s < cfg.min_image_text_sim) {
        line.reason = Some(CleaningFilter::ImageText);
        return Ok(line);
    }
    if topic_score(d, provider)?.is_some_and(|s| s < cfg.min_topic_coherence) {
        line.reason = Some(CleaningFilter::TopicCoherence);
        return Ok(line);
    }
    if !turn_structure_ok(d, cfg.min_turns) {
        line.reason = Some(CleaningFilter::TurnStructure);
        return Ok(line);
    }
    let mut missing_size = false;
    let quality = image_quality_ok(d, cfg, &mut missing_size);
    if missing_size {
        line.flags.push("image_size_missing".into());
    }
    if !quality {
        line.reason = Some(CleaningFilter::ImageQuality);
        return Ok(line);
    }
    line.kept = true;
    Ok(line)
}

#[derive(Debug, Clone)]
pub struct CleaningOutcome {
    pub kept: Vec<Dialogue>,
    pub report: Vec<CleaningReportLine>,
}

pub fn clean_corpus(
    dialogues: &[Dialogue],
    cfg: &CleaningConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<CleaningOutcome, PipelineError> {
    cfg.validate()?;
    let mut out = CleaningOutcome { kept: Vec::new(), report: Vec::with_capacity(dialogues.len()) };
    for d in dialogues {
        let line = check_dialogue(d, cfg, provider)?;
        if line.kept {
            out.kept.push(d.clone());
        }
        out.report.push(line);
    }
    Ok(out)
}
