use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{similarity, PipelineError};
use crate::dialogue::{Corpus, Dialogue, Message, Modality};
use crate::embeddings::{EmbedItem, EmbeddingError, EmbeddingProvider, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    /// Survivors of the text-only first stage.
    pub top_k: usize,
    pub w_text: f64,
    pub w_img: f64,
    /// Dialogues kept per level of the chain.
    pub branch: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { top_k: 50, w_text: 0.7, w_img: 0.3, branch: 2 }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.w_text) || !(0.0..=1.0).contains(&self.w_img) {
            return bad("weights must lie in [0, 1]".into());
        }
        if (self.w_text + self.w_img - 1.0).abs() > 1e-9 {
            return bad(format!("w_text + w_img = {}, expected 1", self.w_text + self.w_img));
        }
        if self.branch == 0 {
            return bad("branch must be positive".into());
        }
        if self.top_k < self.branch {
            return bad(format!("top_k {} below branch {}", self.top_k, self.branch));
        }
        Ok(())
    }
}

/// A chain `a -> b -> c` of dialogues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub a: String,
    pub b: String,
    pub c: String,
    pub score_ab: f64,
    pub score_bc: f64,
    /// Set when a score fell back to text similarity for lack of images.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub image_fallback: bool,
}

/// What identifies an image across dialogues: its URI, or else a hash of its
/// caption and size.
pub fn image_identity(m: &Message) -> String {
    if let Some(uri) = &m.uri {
        return format!("uri:{uri}");
    }
    let mut h = Sha256::new();
    h.update(m.text.as_bytes());
    h.update([0]);
    h.update(m.width_px.map(|w| w.to_string()).unwrap_or_default().as_bytes());
    h.update([0]);
    h.update(m.height_px.map(|w| w.to_string()).unwrap_or_default().as_bytes());
    let digest = h.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Dialogue-level vectors and image identities used for matching.
#[derive(Debug, Clone)]
pub struct DialogueProfile {
    pub dialogue_id: String,
    /// Mean over utterances and non-empty captions.
    pub text: Option<EmbeddingVector>,
    /// Mean over images.
    pub image: Option<EmbeddingVector>,
    pub image_ids: BTreeSet<String>,
}

pub fn dialogue_profile(d: &Dialogue, provider: &dyn EmbeddingProvider) -> Result<DialogueProfile, EmbeddingError> {
    let mut text_items = Vec::new();
    let mut image_items = Vec::new();
    let mut image_ids = BTreeSet::new();
    for e in d.elements() {
        let m = e.message;
        match m.kind {
            Modality::Utterance => text_items.push(EmbedItem::for_element(&d.dialogue_id, m)),
            Modality::Image => {
                if !m.text.is_empty() {
                    text_items.push(EmbedItem::caption_of(&d.dialogue_id, m));
                }
                image_items.push(EmbedItem::image_of(&d.dialogue_id, m));
                image_ids.insert(image_identity(m));
            }
        }
    }
    Ok(DialogueProfile {
        dialogue_id: d.dialogue_id.clone(),
        text: EmbeddingVector::mean(&provider.get_batch(&text_items)?)?,
        image: EmbeddingVector::mean(&provider.get_batch(&image_items)?)?,
        image_ids,
    })
}

pub fn dialogue_profiles(
    dialogues: &[Dialogue],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<DialogueProfile>, EmbeddingError> {
    dialogues.iter().map(|d| dialogue_profile(d, provider)).collect()
}

fn text_sim(x: &DialogueProfile, y: &DialogueProfile) -> Result<f64, EmbeddingError> {
    match (&x.text, &y.text) {
        (Some(a), Some(b)) => similarity(a, b),
        _ => Ok(0.0),
    }
}

/// Weighted text and image similarity, or text alone (flagged) when either side has no images.
fn stage2(x: &DialogueProfile, y: &DialogueProfile, cfg: &TripletConfig) -> Result<(f64, bool), EmbeddingError> {
    let t = text_sim(x, y)?;
    match (&x.image, &y.image) {
        (Some(a), Some(b)) => Ok((cfg.w_text * t + cfg.w_img * similarity(a, b)?, false)),
        _ => Ok((t, true)),
    }
}

/// Best `branch` partners of `profiles[from]` among `candidates` (indices in corpus order).
fn select(
    profiles: &[DialogueProfile],
    from: usize,
    candidates: Vec<usize>,
    cfg: &TripletConfig,
) -> Result<Vec<(usize, f64, bool)>, EmbeddingError> {
    let mut first = Vec::with_capacity(candidates.len());
    for i in candidates {
        first.push((i, text_sim(&profiles[from], &profiles[i])?));
    }
    // Stable sort keeps corpus order among ties.
    first.sort_by(|a, b| b.1.total_cmp(&a.1));
    first.truncate(cfg.top_k);
    let mut second = Vec::with_capacity(first.len());
    for (i, _) in first {
        let (s, fallback) = stage2(&profiles[from], &profiles[i], cfg)?;
        second.push((i, s, fallback));
    }
    second.sort_by(|a, b| b.1.total_cmp(&a.1));
    second.truncate(cfg.branch);
    Ok(second)
}

fn disjoint(x: &DialogueProfile, chain: &[&DialogueProfile]) -> bool {
    chain.iter().all(|c| c.dialogue_id != x.dialogue_id && c.image_ids.is_disjoint(&x.image_ids))
}

/// The `branch²` chains starting at `profiles[anchor]`. Candidates sharing a
/// dialogue or an image with the chain so far are excluded before ranking.
pub fn match_triplets(
    anchor: usize,
    profiles: &[DialogueProfile],
    cfg: &TripletConfig,
) -> Result<Vec<Triplet>, PipelineError> {
    cfg.validate()?;
    let a = &profiles[anchor];
    let insufficient = |level, found| PipelineError::InsufficientCandidates {
        anchor: a.dialogue_id.clone(),
        level,
        found,
        needed: cfg.branch,
    };
    let pool_b: Vec<usize> = (0..profiles.len()).filter(|&i| i != anchor && disjoint(&profiles[i], &[a])).collect();
    let bs = select(profiles, anchor, pool_b, cfg)?;
    if bs.len() < cfg.branch {
        return Err(insufficient("b", bs.len()));
    }
    let mut out = Vec::with_capacity(cfg.branch * cfg.branch);
    for (b, score_ab, fb_ab) in bs {
        let pb = &profiles[b];
        let pool_c: Vec<usize> =
            (0..profiles.len()).filter(|&i| i != anchor && i != b && disjoint(&profiles[i], &[a, pb])).collect();
        let cs = select(profiles, b, pool_c, cfg)?;
        if cs.len() < cfg.branch {
            return Err(insufficient("c", cs.len()));
        }
        for (c, score_bc, fb_bc) in cs {
            out.push(Triplet {
                a: a.dialogue_id.clone(),
                b: pb.dialogue_id.clone(),
                c: profiles[c].dialogue_id.clone(),
                score_ab,
                score_bc,
                image_fallback: fb_ab || fb_bc,
            });
        }
    }
    Ok(out)
}

/// Result for one anchor of a corpus-wide run.
#[derive(Debug)]
pub struct AnchorOutcome {
    pub anchor: String,
    pub result: Result<Vec<Triplet>, PipelineError>,
}

/// Matches every dialogue as an anchor, sequentially.
pub fn match_all(
    corpus: &Corpus,
    cfg: &TripletConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<AnchorOutcome>, PipelineError> {
    cfg.validate()?;
    let dialogues: Vec<Dialogue> = corpus.iter().cloned().collect();
    let profiles = dialogue_profiles(&dialogues, provider)?;
    Ok((0..profiles.len())
        .map(|i| AnchorOutcome { anchor: profiles[i].dialogue_id.clone(), result: match_triplets(i, &profiles, cfg) })
        .collect())
}
