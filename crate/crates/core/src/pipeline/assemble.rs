use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Triplet};
use crate::dialogue::{render_context, Annotation, Corpus, Dialogue, ElementId, ElementRef, Message, Modality, Turn};

/// Where an element of an assembled dialogue came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub modality: Modality,
    pub new_id: ElementId,
    pub source_dialogue: String,
    pub old_id: ElementId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub dialogue: Dialogue,
    pub provenance: Vec<ProvenanceEntry>,
    pub generation_prompt: String,
    pub annotation_prompt: String,
}

/// Concatenates the chain's turns in order and renumbers elements densely per
/// modality. Source tags are carried over onto the new IDs.
pub fn assemble_longform(triplet: &Triplet, corpus: &Corpus) -> Result<Assembled, PipelineError> {
    let sources: Vec<&Dialogue> = [&triplet.a, &triplet.b, &triplet.c]
        .into_iter()
        .map(|id| corpus.get(id).ok_or_else(|| PipelineError::UnknownDialogue(id.clone())))
        .collect::<Result<_, _>>()?;

    let mut next: BTreeMap<Modality, ElementId> = BTreeMap::new();
    let mut turns = Vec::new();
    let mut provenance = Vec::new();
    let mut tags: Vec<Annotation> = Vec::new();
    let mut any_tags = false;
    for src in &sources {
        let mut remap: BTreeMap<(Modality, ElementId), ElementId> = BTreeMap::new();
        for turn in &src.turns {
            let messages = turn
                .messages
                .iter()
                .map(|m| {
                    let slot = next.entry(m.kind).or_insert(0);
                    let new_id = *slot;
                    *slot += 1;
                    remap.insert((m.kind, m.element_id), new_id);
                    provenance.push(ProvenanceEntry {
                        modality: m.kind,
                        new_id,
                        source_dialogue: src.dialogue_id.clone(),
                        old_id: m.element_id,
                    });
                    Message { element_id: new_id, ..m.clone() }
                })
                .collect();
            turns.push(Turn { turn_index: turns.len() as u32, speaker: turn.speaker.clone(), messages });
        }
        if let Some(src_tags) = &src.tags {
            any_tags = true;
            tags.extend(src_tags.iter().map(|a| {
                Annotation {
                    tag: a.tag.clone(),
                    granularity: a.granularity,
                    element_refs: a
                        .element_refs
                        .iter()
                        .map(|r| ElementRef { modality: r.modality, element_id: remap[&(r.modality, r.element_id)] })
                        .collect(),
                }
            }));
        }
    }
    let dialogue = Dialogue {
        dialogue_id: format!("{}+{}+{}", triplet.a, triplet.b, triplet.c),
        turns,
        tags: any_tags.then_some(tags),
    };
    Ok(Assembled {
        generation_prompt: generation_prompt(&sources),
        annotation_prompt: annotation_prompt(&dialogue),
        dialogue,
        provenance,
    })
}

/// Prompt asking a language model to merge source dialogues into one.
pub fn generation_prompt(sources: &[&Dialogue]) -> String {
    let mut p = String::from(
        "You will receive several short multimodal dialogues. Rewrite them as one continuous \
conversation between the same two participants.\n\
\n\
Requirements:\n\
- Keep every utterance and every image. Do not drop, merge or reorder element markers.\n\
- Keep each element ID marker exactly as written. Images appear as [IMAGE] followed by their caption.\n\
- You may add short bridging utterances between segments so the topic change reads naturally. \
Bridging utterances carry no ID marker.\n\
- Keep the tone of an everyday chat.\n\
\n\
Output the merged dialogue in the same line format: one turn per line, `speaker: messages`.\n",
    );
    for (i, d) in sources.iter().enumerate() {
        p.push_str(&format!("\n### Segment {} ({})\n", i + 1, d.dialogue_id));
        p.push_str(&render_context(d));
        p.push('\n');
    }
    p
}

/// Prompt asking a language model for two-level shared tags.
pub fn annotation_prompt(dialogue: &Dialogue) -> String {
    let mut p = String::from(
        "Label the dialogue below with shared topic tags.\n\
\n\
For every utterance and every image caption assign:\n\
- a coarse tag naming the broad domain or situation, and\n\
- a fine tag naming the specific activity within it.\n\
\n\
Each tag must be used by at least two elements. Reuse an existing tag whenever it fits; \
elements about the same topic in different turns should share it.\n\
\n\
Answer with JSON lines, one per tag:\n\
{\"tag\": \"...\", \"granularity\": \"coarse\" | \"fine\", \"element_refs\": \
[{\"modality\": \"utterance\" | \"image\", \"element_id\": N}, ...]}\n\
\n",
    );
    p.push_str(&render_context(dialogue));
    p.push('\n');
    p
}
