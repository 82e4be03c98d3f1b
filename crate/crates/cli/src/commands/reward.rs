use std::path::PathBuf;

use anyhow::Result;
use fragtide_core::dialogue::read_jsonl;
use fragtide_core::rewards::{
    dynamic_filter, group_advantages, total_reward, CandidateRecord, RewardLine, DEFAULT_GROUP_SIZE,
};
use indexmap::IndexMap;
use serde::Serialize;

use super::load_task_set;
use crate::config::{ConfigError, Layer};
use crate::output::{par_map, JsonlWriter};
use crate::Context;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub tasks: PathBuf,
    /// Candidate JSONL: task_id, candidate_index, raw_output.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output file; stdout when omitted.
    #[serde(skip)]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    /// Accept groups whose size differs from --group-size.
    #[arg(long)]
    pub allow_ragged: bool,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda_utt: Option<f64>,
    #[arg(long)]
    pub lambda_img: Option<f64>,
    /// Score unparseable outputs instead of zeroing them.
    #[arg(long)]
    pub no_format_gate: bool,
}

impl Args {
    pub fn overrides(&self, flags: &mut Layer) -> Result<(), ConfigError> {
        if let Some(g) = self.gamma {
            flags.set("reward.gamma", g)?;
        }
        if let Some(l) = self.lambda_utt {
            flags.set("reward.lambda_utt", l)?;
        }
        if let Some(l) = self.lambda_img {
            flags.set("reward.lambda_img", l)?;
        }
        if self.no_format_gate {
            flags.set("reward.format_gate", false)?;
        }
        Ok(())
    }
}

struct Group<'a> {
    members: &'a [usize],
    rewards: Vec<f64>,
}

impl AsRef<[f64]> for Group<'_> {
    fn as_ref(&self) -> &[f64] {
        &self.rewards
    }
}

#[derive(Serialize)]
struct Summary {
    candidates: usize,
    groups: usize,
    dropped_groups: usize,
    errors: usize,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    task_id: &'a str,
    candidate_index: usize,
    error: String,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Line<'a> {
    Reward(RewardLine),
    Error(ErrorLine<'a>),
}

pub fn run(args: &Args, ctx: &Context) -> Result<u8> {
    if args.group_size < 2 {
        return Err(crate::input_error("--group-size must be at least 2"));
    }
    let provider = ctx.provider("reward")?;
    let (tasks, corpus) = load_task_set(&args.tasks, &args.corpus)?;
    let tasks: IndexMap<&str, _> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let candidates: Vec<CandidateRecord> =
        read_jsonl(&args.candidates)?.map(|r| r.map(|(_, c)| c)).collect::<Result<_, _>>()?;

    let cfg = ctx.cfg.reward;
    let scored = par_map(ctx.cfg.parallelism, &candidates, |c| {
        let task = tasks.get(c.task_id.as_str()).ok_or_else(|| format!("unknown task {}", c.task_id))?;
        let dialogue = corpus.get(&task.dialogue_id).expect("validated");
        total_reward(&c.raw_output, task, dialogue, provider.as_ref(), &cfg).map_err(|e| e.to_string())
    })?;

    // Groups in first-appearance order, as indices into `candidates`.
    let mut groups: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, c) in candidates.iter().enumerate() {
        if scored[i].is_ok() {
            groups.entry(c.task_id.as_str()).or_default().push(i);
        }
    }
    let mut errors: Vec<Option<String>> = scored.iter().map(|s| s.as_ref().err().cloned()).collect();
    let mut eligible = Vec::new();
    for (task_id, members) in &groups {
        if members.len() != args.group_size && !args.allow_ragged {
            for &i in members {
                errors[i] =
                    Some(format!("group {task_id} has {} candidates, expected {}", members.len(), args.group_size));
            }
        } else if members.len() < 2 {
            errors[members[0]] = Some(format!("group {task_id} has a single candidate"));
        } else {
            eligible.push(members.clone());
        }
    }
    let total_of = |i: usize| scored[i].as_ref().map(|b| b.total).unwrap_or_default();
    let reward_groups: Vec<Group> =
        eligible.iter().map(|m| Group { members: m, rewards: m.iter().map(|&i| total_of(i)).collect() }).collect();
    let (kept, dropped_groups) = dynamic_filter(reward_groups);
    let mut advantage = vec![None; candidates.len()];
    for g in &kept {
        for (&i, a) in g.members.iter().zip(group_advantages(&g.rewards)?) {
            advantage[i] = Some(a);
        }
    }

    let mut out = JsonlWriter::create(args.out.as_deref(), &ctx.meta("reward", args))?;
    let mut n_errors = 0;
    for (i, c) in candidates.iter().enumerate() {
        let line = match (&scored[i], &errors[i]) {
            (Ok(b), None) => Line::Reward(RewardLine::new(c, b, advantage[i])),
            (_, Some(e)) | (Err(e), None) => {
                n_errors += 1;
                log::error!("task {} candidate {}: {e}", c.task_id, c.candidate_index);
                Line::Error(ErrorLine { task_id: &c.task_id, candidate_index: c.candidate_index, error: e.clone() })
            }
        };
        out.write(&line)?;
    }
    #[derive(Serialize)]
    struct SummaryLine {
        _summary: Summary,
    }
    out.write(&SummaryLine {
        _summary: Summary { candidates: candidates.len(), groups: groups.len(), dropped_groups, errors: n_errors },
    })?;
    out.finish()?;
    Ok(if n_errors > 0 { 2 } else { 0 })
}
