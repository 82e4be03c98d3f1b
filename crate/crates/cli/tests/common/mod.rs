#![allow(dead_code)]

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

use fragtide_core::dialogue::{Annotation, Dialogue, ElementRef, Granularity, Message, Modality, Turn};
use rand::Rng;
use serde::Serialize;
use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fragtide"));
    c.env_remove("FRAGTIDE_PROVIDER_URL").env("RUST_LOG", "error");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) {
    let mut f = std::fs::File::create(path).unwrap();
    for it in items {
        writeln!(f, "{}", serde_json::to_string(it).unwrap()).unwrap();
    }
}

/// Payload lines of a JSONL output, without the metadata header.
pub fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v.get("_meta").is_none())
        .collect()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn words(rng: &mut impl Rng, n: usize) -> String {
    const VOCAB: [&str; 12] =
        ["hiking", "lake", "camera", "dinner", "puppy", "train", "garden", "rain", "coffee", "beach", "movie", "bike"];
    (0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

/// A dialogue that passes every cleaning filter with default thresholds:
/// alternating speakers over an odd number of turns, images 800x600 with a
/// unique URI and no caption, and two tags each spanning at least two elements.
pub fn clean_dialogue(rng: &mut impl Rng, id: &str) -> Dialogue {
    let n_turns = [3, 5, 7][rng.random_range(0..3)];
    let (mut u, mut i) = (0u32, 0u32);
    let mut turns = Vec::new();
    for t in 0..n_turns {
        let mut messages = vec![Message::utterance(u, words(rng, 5))];
        u += 1;
        if t % 2 == 0 || rng.random_bool(0.3) {
            messages.push(Message::image(i, "").with_uri(format!("img://{id}/{i}")).with_size(800, 600));
            i += 1;
        }
        turns.push(Turn { turn_index: t, speaker: if t % 2 == 0 { "User1" } else { "User2" }.into(), messages });
    }
    let refs = |m: Modality, ids: &[u32]| -> Vec<ElementRef> {
        ids.iter().map(|&k| ElementRef { modality: m, element_id: k }).collect()
    };
    let mixed: Vec<ElementRef> = [refs(Modality::Utterance, &[0]), refs(Modality::Image, &[0])].concat();
    let talk = refs(Modality::Utterance, &[1, u - 1]);
    let pics = refs(Modality::Image, &[0, i - 1]);
    let mut tags = vec![
        Annotation { tag: format!("{id} mixed"), granularity: Granularity::Fine, element_refs: mixed },
        Annotation { tag: format!("{id} talk"), granularity: Granularity::Coarse, element_refs: talk },
    ];
    if i > 1 {
        tags.push(Annotation { tag: format!("{id} pics"), granularity: Granularity::Fine, element_refs: pics });
    }
    let d = Dialogue { dialogue_id: id.into(), turns, tags: Some(tags) };
    d.validate().unwrap();
    d
}
