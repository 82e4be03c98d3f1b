use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::PathBuf;

use anyhow::Result;
use fragtide_core::dialogue::{
    format_prediction, parse_prediction, read_jsonl, ParseMode, PredictionLine, PredictionSet,
};
use fragtide_core::metrics::merge_task_windows;
use serde::{Deserialize, Serialize};

use super::load_task_set;
use crate::config::{ConfigError, Layer};
use crate::output::JsonlWriter;
use crate::{input_error, Context};

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Window prediction JSONL: task_id, window [start, end), output.
    #[arg(long)]
    pub predictions: PathBuf,
    #[serde(skip)]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub window_turns: Option<usize>,
    #[arg(long)]
    pub overlap_turns: Option<usize>,
}

impl Args {
    pub fn overrides(&self, flags: &mut Layer) -> Result<(), ConfigError> {
        if let Some(w) = self.window_turns {
            flags.set("window.window_turns", w)?;
        }
        if let Some(o) = self.overlap_turns {
            flags.set("window.overlap_turns", o)?;
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct WindowLine {
    task_id: String,
    window: [usize; 2],
    output: String,
}

pub fn run(args: &Args, ctx: &Context) -> Result<u8> {
    let meta = ctx.meta("windows", args);
    let (tasks, corpus) = load_task_set(&args.tasks, &args.corpus)?;
    let mode = if args.strict { ParseMode::Strict } else { ParseMode::Lenient };
    let mut by_task: HashMap<String, Vec<(Range<usize>, PredictionSet)>> = HashMap::new();
    let mut seen: BTreeMap<(String, usize, usize), usize> = BTreeMap::new();
    for record in read_jsonl::<WindowLine>(&args.predictions)? {
        let (line, w) = record?;
        let [start, end] = w.window;
        if let Some(prev) = seen.insert((w.task_id.clone(), start, end), line) {
            return Err(input_error(format!(
                "line {line}: window [{start}, {end}) of task {} already given on line {prev}",
                w.task_id
            )));
        }
        let pred = match parse_prediction(&w.output, mode) {
            Ok(p) => p.prediction,
            Err(e) => {
                log::warn!(
                    "line {line}: task {} window [{start}, {end}) unparseable ({}), counted empty",
                    w.task_id,
                    e.kind()
                );
                PredictionSet::default()
            }
        };
        by_task.entry(w.task_id).or_default().push((start..end, pred));
    }
    if let Some(id) = by_task.keys().find(|id| !tasks.iter().any(|t| &t.task_id == *id)) {
        return Err(input_error(format!("window predictions for unknown task {id}")));
    }
    let mut merged = Vec::with_capacity(tasks.len());
    let mut absent = 0;
    for t in &tasks {
        let Some(windows) = by_task.get(&t.task_id) else {
            absent += 1;
            continue;
        };
        let turns = corpus.get(&t.dialogue_id).expect("validated").turn_count();
        let p = merge_task_windows(&t.task_id, turns, &ctx.cfg.window, windows)?;
        merged.push(PredictionLine { task_id: t.task_id.clone(), output: format_prediction(&p) });
    }
    let mut out = JsonlWriter::create(args.out.as_deref(), &meta)?;
    for line in &merged {
        out.write(line)?;
    }
    out.finish()?;
    if absent > 0 {
        log::warn!("{absent} task(s) without window predictions skipped");
    }
    Ok(0)
}
