//! Data model for multimodal long-form dialogues.
//!
//! A [`Dialogue`] is an ordered list of [`Turn`]s, each holding one or more
//! [`Message`]s. Every message is either an utterance or an image and carries
//! an element ID that is unique per modality within the dialogue. Retrieval
//! tasks ([`TaskInstance`]) reference those IDs, and model outputs are parsed
//! into a [`PredictionSet`] of the same IDs.

mod io;
mod parse;
mod render;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    load_corpus, load_predictions, load_tasks, read_jsonl, validate_tasks, Corpus, JsonlReader, LoadError,
    PredictionLine,
};
pub use parse::{format_prediction, parse_prediction, FormatError, ParseMode, ParsedPrediction};
pub use render::{render_context, scan_context_ids, IMAGE_SENTINEL};

/// Element IDs are non-negative and unique per modality inside one dialogue.
pub type ElementId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Utterance,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Utterance, Modality::Image];

    /// Short tag used in marker tokens and embedding keys.
    pub fn short(self) -> &'static str {
        match self {
            Modality::Utterance => "utt",
            Modality::Image => "img",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub kind: Modality,
    pub element_id: ElementId,
    /// Utterance text, or the image caption (possibly empty).
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_px: Option<u32>,
}

impl Message {
    pub fn utterance(element_id: ElementId, text: impl Into<String>) -> Self {
        Message { kind: Modality::Utterance, element_id, text: text.into(), uri: None, width_px: None, height_px: None }
    }

    pub fn image(element_id: ElementId, caption: impl Into<String>) -> Self {
        Message { kind: Modality::Image, element_id, text: caption.into(), uri: None, width_px: None, height_px: None }
    }

    pub fn with_uri(mut self, uri: impl Into<String>) -> Self {
        self.uri = Some(uri.into());
        self
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width_px = Some(width);
        self.height_px = Some(height);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_index: u32,
    pub speaker: String,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ElementRef {
    pub modality: Modality,
    pub element_id: ElementId,
}

/// A shared topic tag attached to at least two elements of a dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub tag: String,
    pub granularity: Granularity,
    pub element_refs: Vec<ElementRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<Annotation>>,
}

/// A dialogue-level invariant violation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("dialogue {dialogue_id}: {reason}")]
pub struct InvariantError {
    pub dialogue_id: String,
    pub reason: String,
}

/// Position of an element inside a dialogue, in document order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElementPos<'a> {
    /// Index into `Dialogue::turns`.
    pub turn_pos: usize,
    /// Global message ordinal across all turns.
    pub ordinal: usize,
    pub message: &'a Message,
}

impl Dialogue {
    pub fn turn_count(&self) -> usize {
        self.turns.len()
    }

    /// All messages in document order.
    pub fn elements(&self) -> impl Iterator<Item = ElementPos<'_>> {
        self.turns
            .iter()
            .enumerate()
            .flat_map(|(turn_pos, turn)| turn.messages.iter().map(move |m| (turn_pos, m)))
            .enumerate()
            .map(|(ordinal, (turn_pos, message))| ElementPos { turn_pos, ordinal, message })
    }

    pub fn ids(&self, modality: Modality) -> BTreeSet<ElementId> {
        self.elements().filter(|e| e.message.kind == modality).map(|e| e.message.element_id).collect()
    }

    /// IDs of the given modality whose turn falls inside `turns`.
    pub fn ids_in_turns(&self, modality: Modality, turns: Range<usize>) -> BTreeSet<ElementId> {
        self.elements()
            .filter(|e| e.message.kind == modality && turns.contains(&e.turn_pos))
            .map(|e| e.message.element_id)
            .collect()
    }

    /// Lookup table from (modality, id) to document position.
    pub fn element_index(&self) -> HashMap<(Modality, ElementId), ElementPos<'_>> {
        self.elements().map(|e| ((e.message.kind, e.message.element_id), e)).collect()
    }

    pub fn find(&self, modality: Modality, id: ElementId) -> Option<&Message> {
        self.elements().find(|e| e.message.kind == modality && e.message.element_id == id).map(|e| e.message)
    }

    /// A copy restricted to the given turn range, keeping original IDs.
    pub fn slice_turns(&self, turns: Range<usize>) -> Dialogue {
        let end = turns.end.min(self.turns.len());
        let start = turns.start.min(end);
        Dialogue { dialogue_id: self.dialogue_id.clone(), turns: self.turns[start..end].to_vec(), tags: None }
    }

    fn invariant(&self, reason: impl Into<String>) -> InvariantError {
        InvariantError { dialogue_id: self.dialogue_id.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.turns.is_empty() {
            return Err(self.invariant("dialogue has no turns"));
        }
        let mut prev_index: Option<u32> = None;
        let mut seen: HashSet<(Modality, ElementId)> = HashSet::new();
        for turn in &self.turns {
            if let Some(prev) = prev_index {
                if turn.turn_index <= prev {
                    return Err(
                        self.invariant(format!("turn_index {} does not increase after {}", turn.turn_index, prev))
                    );
                }
            }
            prev_index = Some(turn.turn_index);
            if turn.messages.is_empty() {
                return Err(self.invariant(format!("turn {} has no messages", turn.turn_index)));
            }
            for m in &turn.messages {
                if !seen.insert((m.kind, m.element_id)) {
                    return Err(self.invariant(format!("duplicate {} id {}", m.kind.short(), m.element_id)));
                }
                match m.kind {
                    Modality::Utterance => {
                        if m.uri.is_some() || m.width_px.is_some() || m.height_px.is_some() {
                            return Err(self.invariant(format!("utterance {} carries image metadata", m.element_id)));
                        }
                    }
                    Modality::Image => {
                        if m.width_px == Some(0) || m.height_px == Some(0) {
                            return Err(self.invariant(format!("image {} has a zero dimension", m.element_id)));
                        }
                    }
                }
            }
        }
        for ann in self.tags.iter().flatten() {
            let distinct: HashSet<_> = ann.element_refs.iter().collect();
            if distinct.len() < 2 {
                return Err(self.invariant(format!("tag {:?} is shared by fewer than two elements", ann.tag)));
            }
            if let Some(r) = ann.element_refs.iter().find(|r| !seen.contains(&(r.modality, r.element_id))) {
                return Err(self.invariant(format!(
                    "tag {:?} references missing {} id {}",
                    ann.tag,
                    r.modality.short(),
                    r.element_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Multimodal,
    UtteranceOnly,
    ImageOnly,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub dialogue_id: String,
    pub query: String,
    pub gt_utt_ids: BTreeSet<ElementId>,
    pub gt_img_ids: BTreeSet<ElementId>,
    pub task_type: TaskType,
}

impl TaskInstance {
    pub fn gt(&self, modality: Modality) -> &BTreeSet<ElementId> {
        match modality {
            Modality::Utterance => &self.gt_utt_ids,
            Modality::Image => &self.gt_img_ids,
        }
    }

    pub fn ground_truth(&self) -> PredictionSet {
        PredictionSet { utt_ids: self.gt_utt_ids.clone(), img_ids: self.gt_img_ids.clone() }
    }

    /// Checks the task-type constraints on the ground-truth sets.
    pub fn validate(&self) -> Result<(), String> {
        let ok = match self.task_type {
            TaskType::Negative => self.gt_utt_ids.is_empty() && self.gt_img_ids.is_empty(),
            TaskType::UtteranceOnly => self.gt_img_ids.is_empty(),
            TaskType::ImageOnly => self.gt_utt_ids.is_empty(),
            TaskType::Multimodal => true,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("task {}: ground truth inconsistent with task_type {:?}", self.task_id, self.task_type))
        }
    }

    /// Checks that every ground-truth ID exists in `dialogue` with the right modality.
    pub fn validate_against(&self, dialogue: &Dialogue) -> Result<(), InvariantError> {
        for modality in Modality::ALL {
            let ids = dialogue.ids(modality);
            if let Some(missing) = self.gt(modality).iter().find(|id| !ids.contains(id)) {
                return Err(InvariantError {
                    dialogue_id: dialogue.dialogue_id.clone(),
                    reason: format!("task {} references absent {} id {}", self.task_id, modality.short(), missing),
                });
            }
        }
        Ok(())
    }
}

/// Predicted utterance and image IDs for one task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictionSet {
    pub utt_ids: BTreeSet<ElementId>,
    pub img_ids: BTreeSet<ElementId>,
}

impl PredictionSet {
    pub fn new(utt: impl IntoIterator<Item = ElementId>, img: impl IntoIterator<Item = ElementId>) -> Self {
        PredictionSet { utt_ids: utt.into_iter().collect(), img_ids: img.into_iter().collect() }
    }

    pub fn ids(&self, modality: Modality) -> &BTreeSet<ElementId> {
        match modality {
            Modality::Utterance => &self.utt_ids,
            Modality::Image => &self.img_ids,
        }
    }

    pub fn ids_mut(&mut self, modality: Modality) -> &mut BTreeSet<ElementId> {
        match modality {
            Modality::Utterance => &mut self.utt_ids,
            Modality::Image => &mut self.img_ids,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty() && self.img_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.utt_ids.len() + self.img_ids.len()
    }

    pub fn union_with(&mut self, other: &PredictionSet) {
        self.utt_ids.extend(other.utt_ids.iter().copied());
        self.img_ids.extend(other.img_ids.iter().copied());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dialogue {
        Dialogue {
            dialogue_id: "d1".into(),
            turns: vec![
                Turn {
                    turn_index: 0,
                    speaker: "User1".into(),
                    messages: vec![Message::utterance(0, "hello"), Message::image(0, "a cat")],
                },
                Turn { turn_index: 1, speaker: "User2".into(), messages: vec![Message::utterance(1, "nice cat")] },
            ],
            tags: None,
        }
    }

    #[test]
    fn valid_dialogue_passes() {
        sample().validate().unwrap();
    }

    #[test]
    fn same_id_across_modalities_is_fine() {
        let d = sample();
        assert_eq!(d.ids(Modality::Utterance), BTreeSet::from([0, 1]));
        assert_eq!(d.ids(Modality::Image), BTreeSet::from([0]));
    }

    #[test]
    fn duplicate_utterance_id_rejected() {
        let mut d = sample();
        d.turns[1].messages[0].element_id = 0;
        let err = d.validate().unwrap_err();
        assert!(err.reason.contains("duplicate utt id 0"), "{err}");
    }

    #[test]
    fn turn_index_must_increase() {
        let mut d = sample();
        d.turns[1].turn_index = 0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn utterance_with_uri_rejected() {
        let mut d = sample();
        d.turns[0].messages[0].uri = Some("x.png".into());
        assert!(d.validate().is_err());
    }

    #[test]
    fn tag_needs_two_existing_refs() {
        let mut d = sample();
        let r = |m, id| ElementRef { modality: m, element_id: id };
        d.tags = Some(vec![Annotation {
            tag: "pets".into(),
            granularity: Granularity::Coarse,
            element_refs: vec![r(Modality::Utterance, 1)],
        }]);
        assert!(d.validate().is_err());
        d.tags.as_mut().unwrap()[0].element_refs.push(r(Modality::Image, 7));
        assert!(d.validate().is_err());
        d.tags.as_mut().unwrap()[0].element_refs[1] = r(Modality::Image, 0);
        d.validate().unwrap();
    }

    #[test]
    fn ids_in_turns_respects_range() {
        let d = sample();
        assert_eq!(d.ids_in_turns(Modality::Utterance, 1..2), BTreeSet::from([1]));
        assert_eq!(d.ids_in_turns(Modality::Image, 1..2), BTreeSet::new());
    }

    #[test]
    fn task_type_constraints() {
        let mut t = TaskInstance {
            task_id: "t".into(),
            dialogue_id: "d1".into(),
            query: "q".into(),
            gt_utt_ids: BTreeSet::from([0]),
            gt_img_ids: BTreeSet::new(),
            task_type: TaskType::UtteranceOnly,
        };
        t.validate().unwrap();
        t.task_type = TaskType::Negative;
        assert!(t.validate().is_err());
        t.task_type = TaskType::ImageOnly;
        assert!(t.validate().is_err());
    }

    #[test]
    fn task_referencing_absent_image_rejected() {
        let t = TaskInstance {
            task_id: "t".into(),
            dialogue_id: "d1".into(),
            query: "q".into(),
            gt_utt_ids: BTreeSet::new(),
            gt_img_ids: BTreeSet::from([3]),
            task_type: TaskType::ImageOnly,
        };
        let err = t.validate_against(&sample()).unwrap_err();
        assert!(err.reason.contains("absent img id 3"));
    }
}
