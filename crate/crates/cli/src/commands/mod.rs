pub mod baseline;
pub mod curriculum;
pub mod evaluate;
pub mod pipeline;
pub mod render;
pub mod reward;
pub mod windows;

use std::path::Path;

use anyhow::Result;
use fragtide_core::dialogue::{load_corpus, load_tasks, validate_tasks, Corpus, TaskInstance};

/// Tasks checked against the corpus they reference.
pub fn load_task_set(tasks: &Path, corpus: &Path) -> Result<(Vec<TaskInstance>, Corpus)> {
    let corpus = load_corpus(corpus)?;
    let tasks = load_tasks(tasks)?;
    validate_tasks(&tasks, &corpus)?;
    Ok((tasks, corpus))
}
