use std::collections::HashSet;
use std::path::PathBuf;

use anyhow::Result;
use fragtide_core::dialogue::{load_predictions, ParseMode};
use fragtide_core::metrics::{score_prediction, Averaging, BucketBounds, EvaluationReport};
use serde::Serialize;

use super::load_task_set;
use crate::output::{par_map, write_json};
use crate::{input_error, Context};

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AveragingArg {
    Macro,
    Micro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Macro => Averaging::Macro,
            AveragingArg::Micro => Averaging::Micro,
        }
    }
}

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub tasks: PathBuf,
    /// Prediction JSONL: task_id, output.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[serde(skip)]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parse outputs with the strict grammar instead of the lenient one.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, value_enum, default_value = "macro")]
    pub averaging: AveragingArg,
    /// Turn-count bucket bounds `SHORT_BELOW,LONG_ABOVE`.
    #[arg(long, default_value = "35,65")]
    pub buckets: BucketBounds,
}

pub fn run(args: &Args, ctx: &Context) -> Result<u8> {
    let (tasks, corpus) = load_task_set(&args.tasks, &args.corpus)?;
    let predictions = load_predictions(&args.predictions)?;
    let known: HashSet<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let unknown: Vec<&str> = predictions.keys().filter(|id| !known.contains(id.as_str())).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(input_error(format!("{} prediction(s) for unknown tasks, first: {}", unknown.len(), unknown[0])));
    }
    let missing = tasks.iter().filter(|t| !predictions.contains_key(&t.task_id)).count();
    if missing > 0 {
        log::warn!("{missing} task(s) have no prediction and are scored as empty");
    }
    let provider = match &ctx.cfg.provider {
        Some(_) => Some(ctx.provider("evaluate")?),
        None => None,
    };
    let mode = if args.strict { ParseMode::Strict } else { ParseMode::Lenient };
    let scores = par_map(ctx.cfg.parallelism, &tasks, |t| {
        let dialogue = corpus.get(&t.dialogue_id).expect("validated");
        let raw = predictions.get(&t.task_id).map(String::as_str);
        score_prediction(raw, t, dialogue, mode, provider.as_deref())
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let report = EvaluationReport::build(scores, args.buckets, args.averaging.into());
    write_json(args.out.as_deref(), &ctx.meta("evaluate", args), &report)?;
    Ok(0)
}
