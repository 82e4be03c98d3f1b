use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::Result;
use fragtide_core::curriculum::{
    bucket_population, build_schedule, default_phases, instance_scores, parse_phases, score_population, InstanceScore,
    QuantileThresholds,
};
use fragtide_core::dialogue::{load_tasks, read_jsonl};
use fragtide_core::rewards::CandidateRecord;
use serde::Serialize;

use crate::output::{par_map, write_json, JsonlWriter};
use crate::{input_error, Context};

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    /// Precomputed scores JSONL: task_id, f, h.
    #[arg(long, conflicts_with_all = ["candidates", "tasks"])]
    pub scores: Option<PathBuf>,
    /// Cold-start candidates with token entropies; needs --tasks.
    #[arg(long, requires = "tasks")]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Phases `FRACTION:LEVEL,LEVEL;...`, e.g. `0.1:easy,medium;0.5:easy,medium,confusing;1.0:all`.
    #[arg(long)]
    pub phases: Option<String>,
    /// Directory for scores.jsonl, levels.jsonl, thresholds.json and schedule.jsonl.
    #[serde(skip)]
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct Thresholds {
    population: usize,
    thresholds: QuantileThresholds,
}

fn population(args: &Args, ctx: &Context) -> Result<Vec<InstanceScore>> {
    if let Some(path) = &args.scores {
        return Ok(read_jsonl(path)?.map(|r| r.map(|(_, s)| s)).collect::<Result<_, _>>()?);
    }
    let (Some(cand_path), Some(task_path)) = (&args.candidates, &args.tasks) else {
        return Err(input_error("give --scores, or --candidates with --tasks"));
    };
    let tasks = load_tasks(task_path)?;
    let by_id: HashMap<&str, _> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let candidates: Vec<CandidateRecord> =
        read_jsonl(cand_path)?.map(|r| r.map(|(_, c)| c)).collect::<Result<_, _>>()?;
    if let Some(c) = candidates.iter().find(|c| !by_id.contains_key(c.task_id.as_str())) {
        return Err(input_error(format!("candidate for unknown task {}", c.task_id)));
    }
    let flat = candidates.iter().filter(|c| c.token_entropies.as_ref().is_none_or(|e| e.is_empty())).count();
    if flat > 0 {
        log::warn!("{flat} candidate(s) without token entropies scored with h = 0");
    }
    let scored = par_map(ctx.cfg.parallelism, &candidates, |c| instance_scores(c, by_id[c.task_id.as_str()]))?;
    Ok(score_population(candidates.iter().map(|c| c.task_id.as_str()).zip(scored)))
}

pub fn run(args: &Args, ctx: &Context) -> Result<u8> {
    let seed = ctx.cfg.seed;
    let phases = match &args.phases {
        Some(p) => parse_phases(p, seed)?,
        None => default_phases(seed),
    };
    let scores = population(args, ctx)?;
    let (thresholds, records) = bucket_population(&scores)?;
    let schedule = build_schedule(&records, &phases)?;

    let meta = ctx.meta("curriculum", args);
    let dir = &args.out_dir;
    let mut w = JsonlWriter::create(Some(&dir.join("scores.jsonl")), &meta)?;
    for s in &scores {
        w.write(s)?;
    }
    w.finish()?;
    let mut w = JsonlWriter::create(Some(&dir.join("levels.jsonl")), &meta)?;
    for r in &records {
        w.write(r)?;
    }
    w.finish()?;
    write_json(Some(&dir.join("thresholds.json")), &meta, &Thresholds { population: scores.len(), thresholds })?;
    let mut w = JsonlWriter::create(Some(&dir.join("schedule.jsonl")), &meta)?;
    for b in &schedule {
        w.write(b)?;
    }
    w.finish()?;
    Ok(0)
}
