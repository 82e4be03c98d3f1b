use std::path::PathBuf;

use anyhow::Result;
use fragtide_core::dialogue::{format_prediction, PredictionLine};
use fragtide_core::embeddings::EmbedItem;
use fragtide_core::metrics::{
    element_similarities, predict_at, score_task, sweep_tasks, BucketBounds, EvaluationReport, SweepTask, ThresholdGrid,
};
use serde::Serialize;

use super::evaluate::AveragingArg;
use super::load_task_set;
use crate::output::{par_map, write_json, JsonlWriter};
use crate::{input_error, Context};

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Threshold grid `LO:HI:STEP`, inclusive.
    #[arg(long, default_value = "0:1:0.05")]
    pub thresholds: String,
    #[arg(long, value_enum, default_value = "macro")]
    pub averaging: AveragingArg,
    #[arg(long, default_value = "35,65")]
    pub buckets: BucketBounds,
    /// Directory for predictions.jsonl, sweep.json and report.json.
    #[serde(skip)]
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(args: &Args, ctx: &Context) -> Result<u8> {
    let grid: ThresholdGrid = args.thresholds.parse()?;
    let (tasks, corpus) = load_task_set(&args.tasks, &args.corpus)?;
    if tasks.is_empty() {
        return Err(input_error("no tasks"));
    }
    let provider = ctx.provider("baseline")?;
    let sims = par_map(ctx.cfg.parallelism, &tasks, |t| {
        let dialogue = corpus.get(&t.dialogue_id).expect("validated");
        let q = provider.get(&EmbedItem::query(&t.task_id, &t.query))?;
        element_similarities(&q, dialogue, provider.as_ref())
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let inputs: Vec<SweepTask> = tasks
        .iter()
        .zip(&sims)
        .map(|(task, sims)| SweepTask { task, dialogue: corpus.get(&task.dialogue_id).expect("validated"), sims })
        .collect();
    let averaging = args.averaging.into();
    let sweep = sweep_tasks(&inputs, &grid, averaging).expect("non-empty");
    log::info!("best threshold {} (joint F1 {:.4})", sweep.best_threshold, sweep.best.f1);

    let meta = ctx.meta("baseline", args);
    let mut w = JsonlWriter::create(Some(&args.out_dir.join("predictions.jsonl")), &meta)?;
    let mut scores = Vec::with_capacity(inputs.len());
    for t in &inputs {
        let pred = predict_at(t.sims, sweep.best_threshold);
        w.write(&PredictionLine { task_id: t.task.task_id.clone(), output: format_prediction(&pred) })?;
        scores.push(score_task(&pred, t.task, t.dialogue));
    }
    w.finish()?;
    write_json(Some(&args.out_dir.join("sweep.json")), &meta, &sweep.scaled(100.0))?;
    let report = EvaluationReport::build(scores, args.buckets, averaging);
    write_json(Some(&args.out_dir.join("report.json")), &meta, &report)?;
    Ok(0)
}
