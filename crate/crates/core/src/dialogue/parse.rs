//! Parser for model prediction outputs.
//!
//! The expected answer is two bracketed ID lists wrapped in block markers:
//!
//! ```text
//! <|utt_ids_start|>[1, 5]<|utt_ids_end|><|img_ids_start|>[]<|img_ids_end|>
//! ```

use std::collections::BTreeSet;

use thiserror::Error;

use super::{ElementId, Modality, PredictionSet};

pub const UTT_IDS_START: &str = "<|utt_ids_start|>";
pub const UTT_IDS_END: &str = "<|utt_ids_end|>";
pub const IMG_IDS_START: &str = "<|img_ids_start|>";
pub const IMG_IDS_END: &str = "<|img_ids_end|>";

fn block_markers(block: Modality) -> (&'static str, &'static str) {
    match block {
        Modality::Utterance => (UTT_IDS_START, UTT_IDS_END),
        Modality::Image => (IMG_IDS_START, IMG_IDS_END),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// The whole string must be exactly the two blocks, utterances first.
    #[default]
    Strict,
    /// Take the first well-formed block of each kind anywhere in the text.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("missing {block} block")]
    MissingBlock { block: Modality },
    #[error("malformed {block} id list at byte {offset}")]
    MalformedList { block: Modality, offset: usize },
    #[error("unexpected content at byte {offset}")]
    TrailingGarbage { offset: usize },
    #[error("non-integer {block} id {token:?}")]
    NonIntegerId { block: Modality, token: String },
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::MissingBlock { .. } => "missing_block",
            FormatError::MalformedList { .. } => "malformed_list",
            FormatError::TrailingGarbage { .. } => "trailing_garbage",
            FormatError::NonIntegerId { .. } => "non_integer_id",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrediction {
    pub prediction: PredictionSet,
    /// Whether either list repeated an ID before deduplication.
    pub duplicates: bool,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }
}

fn is_token_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'+' | b'-' | b'.' | b'_')
}

/// Parses `[a, b, ...]` at the cursor. Returns the IDs and whether any repeated.
fn parse_list(cur: &mut Cursor<'_>, block: Modality) -> Result<(BTreeSet<ElementId>, bool), FormatError> {
    let malformed = |offset| FormatError::MalformedList { block, offset };
    if !cur.eat("[") {
        return Err(malformed(cur.pos));
    }
    let mut ids = BTreeSet::new();
    let mut duplicates = false;
    cur.skip_ws();
    if cur.eat("]") {
        return Ok((ids, duplicates));
    }
    loop {
        cur.skip_ws();
        let start = cur.pos;
        while cur.peek().is_some_and(is_token_byte) {
            cur.pos += 1;
        }
        let token = &cur.src[start..cur.pos];
        if token.is_empty() {
            return Err(malformed(start));
        }
        if !token.bytes().all(|b| b.is_ascii_digit()) {
            return Err(FormatError::NonIntegerId { block, token: token.to_string() });
        }
        let id: ElementId = token.parse().map_err(|_| FormatError::NonIntegerId { block, token: token.to_string() })?;
        if !ids.insert(id) {
            duplicates = true;
        }
        cur.skip_ws();
        if cur.eat(",") {
            continue;
        }
        if cur.eat("]") {
            return Ok((ids, duplicates));
        }
        return Err(malformed(cur.pos));
    }
}

/// Parses one block whose start marker begins exactly at the cursor.
fn parse_block(cur: &mut Cursor<'_>, block: Modality) -> Result<(BTreeSet<ElementId>, bool), FormatError> {
    let (start, end) = block_markers(block);
    if !cur.eat(start) {
        return Err(if cur.rest().contains(start) {
            FormatError::TrailingGarbage { offset: cur.pos }
        } else {
            FormatError::MissingBlock { block }
        });
    }
    cur.skip_ws();
    let list = parse_list(cur, block)?;
    cur.skip_ws();
    if !cur.eat(end) {
        return Err(FormatError::MalformedList { block, offset: cur.pos });
    }
    Ok(list)
}

fn parse_strict(raw: &str) -> Result<ParsedPrediction, FormatError> {
    let mut cur = Cursor { src: raw, pos: 0 };
    cur.skip_ws();
    let (utt_ids, dup_utt) = parse_block(&mut cur, Modality::Utterance)?;
    cur.skip_ws();
    let (img_ids, dup_img) = parse_block(&mut cur, Modality::Image)?;
    cur.skip_ws();
    if cur.pos != raw.len() {
        return Err(FormatError::TrailingGarbage { offset: cur.pos });
    }
    Ok(ParsedPrediction { prediction: PredictionSet { utt_ids, img_ids }, duplicates: dup_utt || dup_img })
}

fn find_block(raw: &str, block: Modality) -> Result<(BTreeSet<ElementId>, bool), FormatError> {
    let (start, _) = block_markers(block);
    let mut first_err = None;
    for (pos, _) in raw.match_indices(start) {
        let mut cur = Cursor { src: raw, pos };
        match parse_block(&mut cur, block) {
            Ok(found) => return Ok(found),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(FormatError::MissingBlock { block }))
}

fn parse_lenient(raw: &str) -> Result<ParsedPrediction, FormatError> {
    let (utt_ids, dup_utt) = find_block(raw, Modality::Utterance)?;
    let (img_ids, dup_img) = find_block(raw, Modality::Image)?;
    Ok(ParsedPrediction { prediction: PredictionSet { utt_ids, img_ids }, duplicates: dup_utt || dup_img })
}

/// Parses a model output into predicted ID sets. IDs are deduplicated; the
/// `duplicates` flag reports whether any list repeated an ID.
pub fn parse_prediction(raw: &str, mode: ParseMode) -> Result<ParsedPrediction, FormatError> {
    match mode {
        ParseMode::Strict => parse_strict(raw),
        ParseMode::Lenient => parse_lenient(raw),
    }
}

fn join_ids(ids: &BTreeSet<ElementId>) -> String {
    ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical serialization: ascending IDs, comma-separated, no whitespace.
pub fn format_prediction(pred: &PredictionSet) -> String {
    format!(
        "{UTT_IDS_START}[{}]{UTT_IDS_END}{IMG_IDS_START}[{}]{IMG_IDS_END}",
        join_ids(&pred.utt_ids),
        join_ids(&pred.img_ids)
    )
}
