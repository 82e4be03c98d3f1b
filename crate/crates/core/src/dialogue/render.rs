use super::{Dialogue, ElementId, Modality};

pub const UTT_ID_START: &str = "<|utt_id_start|>";
pub const UTT_ID_END: &str = "<|utt_id_end|>";
pub const IMG_ID_START: &str = "<|img_id_start|>";
pub const IMG_ID_END: &str = "<|img_id_end|>";

/// Placeholder emitted where an image sits in the text rendering; the caption follows it.
pub const IMAGE_SENTINEL: &str = "[IMAGE]";

fn markers(modality: Modality) -> (&'static str, &'static str) {
    match modality {
        Modality::Utterance => (UTT_ID_START, UTT_ID_END),
        Modality::Image => (IMG_ID_START, IMG_ID_END),
    }
}

// Free text must not be able to forge a marker or break the one-line-per-turn layout.
fn sanitize(text: &str) -> String {
    text.replace("<|", "< |").replace(['\r', '\n'], " ")
}

/// Renders a dialogue as model context, one line per turn.
///
/// Utterances become `<|utt_id_start|>K<|utt_id_end|>TEXT`, images become
/// `<|img_id_start|>K<|img_id_end|>[IMAGE]CAPTION`. Messages inside a turn are
/// separated by a single space and each line starts with `speaker: `.
pub fn render_context(dialogue: &Dialogue) -> String {
    let mut out = String::new();
    for (i, turn) in dialogue.turns.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&sanitize(&turn.speaker));
        out.push_str(": ");
        for (j, m) in turn.messages.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let (start, end) = markers(m.kind);
            out.push_str(start);
            out.push_str(&m.element_id.to_string());
            out.push_str(end);
            if m.kind == Modality::Image {
                out.push_str(IMAGE_SENTINEL);
            }
            out.push_str(&sanitize(&m.text));
        }
    }
    out
}

/// Extracts every `(modality, id)` marker from rendered context, in order of appearance.
pub fn scan_context_ids(rendered: &str) -> Vec<(Modality, ElementId)> {
    let mut found = Vec::new();
    let mut rest = rendered;
    loop {
        let next = Modality::ALL
            .iter()
            .filter_map(|&m| rest.find(markers(m).0).map(|pos| (pos, m)))
            .min_by_key(|&(pos, _)| pos);
        let Some((pos, modality)) = next else { break };
        let (start, end) = markers(modality);
        let after = &rest[pos + start.len()..];
        match after.find(end) {
            Some(close) => {
                if let Ok(id) = after[..close].parse::<ElementId>() {
                    found.push((modality, id));
                }
                rest = &after[close + end.len()..];
            }
            None => rest = after,
        }
    }
    found
}
