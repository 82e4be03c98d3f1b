//! JSONL ingestion for corpora, tasks and prediction files.

use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dialogue, InvariantError, TaskInstance};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Schema { line: usize, field: String, message: String },
    #[error("line {line}: {source}")]
    Invariant {
        line: usize,
        #[source]
        source: InvariantError,
    },
}

/// Output files start with a `{"_meta": ...}` header line; readers skip it.
fn is_meta_line(line: &str) -> bool {
    line.trim_start().starts_with("{\"_meta\"")
}

/// Streams one JSON object per line, skipping blank and metadata lines.
/// Yields the 1-based line number alongside each record.
pub struct JsonlReader<R, T> {
    lines: io::Lines<R>,
    line_no: usize,
    _marker: PhantomData<T>,
}

impl<R: BufRead, T: DeserializeOwned> JsonlReader<R, T> {
    pub fn new(reader: R) -> Self {
        JsonlReader { lines: reader.lines(), line_no: 0, _marker: PhantomData }
    }
}

impl<R: BufRead, T: DeserializeOwned> Iterator for JsonlReader<R, T> {
    type Item = Result<(usize, T), LoadError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(LoadError::Schema {
                        line: self.line_no,
                        field: String::new(),
                        message: e.to_string(),
                    }))
                }
            };
            if line.trim().is_empty() || is_meta_line(&line) {
                continue;
            }
            let de = &mut serde_json::Deserializer::from_str(&line);
            let parsed = serde_path_to_error::deserialize(de).map_err(|e| LoadError::Schema {
                line: self.line_no,
                field: e.path().to_string(),
                message: e.inner().to_string(),
            });
            return Some(parsed.map(|v| (self.line_no, v)));
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, LoadError> {
    File::open(path).map(BufReader::new).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })
}

/// Opens a JSONL file as a record stream.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<JsonlReader<BufReader<File>, T>, LoadError> {
    Ok(JsonlReader::new(open(path.as_ref())?))
}

/// Dialogues keyed by ID, in file order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    dialogues: IndexMap<String, Dialogue>,
}

impl Corpus {
    /// Builds a corpus from dialogues, validating each. Duplicate IDs are rejected.
    pub fn from_dialogues(dialogues: impl IntoIterator<Item = Dialogue>) -> Result<Self, InvariantError> {
        let mut corpus = Corpus::default();
        for d in dialogues {
            corpus.insert(d)?;
        }
        Ok(corpus)
    }

    pub fn insert(&mut self, dialogue: Dialogue) -> Result<(), InvariantError> {
        dialogue.validate()?;
        if self.dialogues.contains_key(&dialogue.dialogue_id) {
            return Err(InvariantError { dialogue_id: dialogue.dialogue_id, reason: "duplicate dialogue_id".into() });
        }
        self.dialogues.insert(dialogue.dialogue_id.clone(), dialogue);
        Ok(())
    }

    pub fn get(&self, dialogue_id: &str) -> Option<&Dialogue> {
        self.dialogues.get(dialogue_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.values()
    }

    pub fn position(&self, dialogue_id: &str) -> Option<usize> {
        self.dialogues.get_index_of(dialogue_id)
    }

    pub fn by_position(&self, index: usize) -> Option<&Dialogue> {
        self.dialogues.get_index(index).map(|(_, d)| d)
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn into_vec(self) -> Vec<Dialogue> {
        self.dialogues.into_values().collect()
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, LoadError> {
    let mut corpus = Corpus::default();
    for record in read_jsonl::<Dialogue>(path)? {
        let (line, dialogue) = record?;
        corpus.insert(dialogue).map_err(|source| LoadError::Invariant { line, source })?;
    }
    Ok(corpus)
}

/// Loads tasks and checks the task-type constraints on each line.
/// Use [`validate_tasks`] to cross-check them against a corpus.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>, LoadError> {
    let mut tasks = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for record in read_jsonl::<TaskInstance>(path)? {
        let (line, task) = record?;
        let invariant = |reason: String| LoadError::Invariant {
            line,
            source: InvariantError { dialogue_id: task.dialogue_id.clone(), reason },
        };
        task.validate().map_err(invariant)?;
        if !seen.insert(task.task_id.clone()) {
            return Err(invariant(format!("duplicate task_id {}", task.task_id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Referential integrity between tasks and the corpus they point into.
/// Errors carry the 1-based position of the offending task.
pub fn validate_tasks(tasks: &[TaskInstance], corpus: &Corpus) -> Result<(), LoadError> {
    for (i, task) in tasks.iter().enumerate() {
        let line = i + 1;
        let dialogue = corpus.get(&task.dialogue_id).ok_or_else(|| LoadError::Invariant {
            line,
            source: InvariantError {
                dialogue_id: task.dialogue_id.clone(),
                reason: format!("task {} references unknown dialogue", task.task_id),
            },
        })?;
        task.validate_against(dialogue).map_err(|source| LoadError::Invariant { line, source })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub task_id: String,
    pub output: String,
}

/// Raw model outputs keyed by task ID, in file order.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<IndexMap<String, String>, LoadError> {
    let mut out = IndexMap::new();
    for record in read_jsonl::<PredictionLine>(path)? {
        let (line, p) = record?;
        if out.contains_key(&p.task_id) {
            return Err(LoadError::Schema {
                line,
                field: "task_id".into(),
                message: format!("duplicate prediction for task {}", p.task_id),
            });
        }
        out.insert(p.task_id, p.output);
    }
    Ok(out)
}
