use std::path::PathBuf;

use anyhow::Result;
use fragtide_core::dialogue::{load_corpus, render_context, Dialogue};
use fragtide_core::metrics::make_windows;
use serde::Serialize;

use super::load_task_set;
use crate::output::JsonlWriter;
use crate::Context;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Emit one context per task (with its query) instead of per dialogue.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Split each context into the configured turn windows.
    #[arg(long)]
    pub windowed: bool,
    #[serde(skip)]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ContextLine<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    task_id: Option<&'a str>,
    dialogue_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    query: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<[usize; 2]>,
    context: String,
}

pub fn run(args: &Args, ctx: &Context) -> Result<u8> {
    let meta = ctx.meta("render", args);
    ctx.cfg.window.validate()?;
    let mut out = JsonlWriter::create(args.out.as_deref(), &meta)?;
    let mut emit = |d: &Dialogue, task: Option<(&str, &str)>| -> Result<()> {
        let pieces: Vec<(Option<[usize; 2]>, String)> = if args.windowed {
            make_windows(d.turn_count(), &ctx.cfg.window)
                .into_iter()
                .map(|r| (Some([r.start, r.end]), render_context(&d.slice_turns(r))))
                .collect()
        } else {
            vec![(None, render_context(d))]
        };
        for (window, context) in pieces {
            out.write(&ContextLine {
                task_id: task.map(|t| t.0),
                dialogue_id: &d.dialogue_id,
                query: task.map(|t| t.1),
                window,
                context,
            })?;
        }
        Ok(())
    };
    match &args.tasks {
        Some(tasks) => {
            let (tasks, corpus) = load_task_set(tasks, &args.corpus)?;
            for t in &tasks {
                let d = corpus.get(&t.dialogue_id).expect("validated");
                emit(d, Some((&t.task_id, &t.query)))?;
            }
        }
        None => {
            for d in load_corpus(&args.corpus)?.iter() {
                emit(d, None)?;
            }
        }
    }
    out.finish()?;
    Ok(0)
}
