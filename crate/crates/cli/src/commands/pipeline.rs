use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use fragtide_core::dialogue::{load_corpus, read_jsonl, Corpus};
use fragtide_core::pipeline::{
    assemble_longform, check_dialogue, dialogue_profile, match_triplets, sample_tasks, PipelineError,
    TaskSamplingConfig, Triplet, TypeWeights,
};
use serde::Serialize;

use crate::output::{par_map, JsonlWriter, Meta};
use crate::{input_error, Context};

#[derive(Debug, clap::Subcommand)]
pub enum Command {
    /// Filter a corpus and report why dialogues were dropped.
    Clean(CleanArgs),
    /// Chain each dialogue with its nearest image-disjoint neighbours.
    Triplets(TripletArgs),
    /// Concatenate triplets into long dialogues and write rewriting and tagging prompts.
    Assemble(AssembleArgs),
    /// Draw retrieval tasks from tagged dialogues.
    SampleTasks(SampleArgs),
}

#[derive(Debug, clap::Args, Serialize)]
pub struct CleanArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Kept dialogues.
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
    /// One line per input dialogue: dialogue_id, kept, reason.
    #[serde(skip)]
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, clap::Args, Serialize)]
pub struct TripletArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
    /// Anchors without enough candidates, one line each.
    #[serde(skip)]
    #[arg(long)]
    pub skipped: Option<PathBuf>,
}

#[derive(Debug, clap::Args, Serialize)]
pub struct AssembleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub triplets: PathBuf,
    /// Assembled dialogues.
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
    /// Where `<id>.generation.txt` and `<id>.annotation.txt` go.
    #[serde(skip)]
    #[arg(long)]
    pub prompts_dir: PathBuf,
    /// Element provenance lines.
    #[serde(skip)]
    #[arg(long)]
    pub provenance: Option<PathBuf>,
}

#[derive(Debug, clap::Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_per_dialogue: usize,
    /// Type weights `MULTIMODAL,UTTERANCE,IMAGE,NEGATIVE`.
    #[arg(long, default_value = "1,1,1,1")]
    pub weights: String,
}

pub fn run(cmd: &Command, ctx: &Context) -> Result<u8> {
    match cmd {
        Command::Clean(a) => clean(a, ctx, ctx.meta("pipeline clean", a)),
        Command::Triplets(a) => triplets(a, ctx, ctx.meta("pipeline triplets", a)),
        Command::Assemble(a) => assemble(a, ctx.meta("pipeline assemble", a)),
        Command::SampleTasks(a) => sample(a, ctx, ctx.meta("pipeline sample-tasks", a)),
    }
}

fn dialogues(path: &Path) -> Result<Vec<fragtide_core::dialogue::Dialogue>> {
    Ok(load_corpus(path)?.into_vec())
}

fn clean(args: &CleanArgs, ctx: &Context, meta: Meta) -> Result<u8> {
    ctx.cfg.cleaning.validate()?;
    let provider = ctx.provider("pipeline clean")?;
    let ds = dialogues(&args.corpus)?;
    let lines = par_map(ctx.cfg.parallelism, &ds, |d| check_dialogue(d, &ctx.cfg.cleaning, provider.as_ref()))?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut kept = JsonlWriter::create(Some(&args.out), &meta)?;
    let mut report = JsonlWriter::create(Some(&args.report), &meta)?;
    for (d, line) in ds.iter().zip(&lines) {
        if line.kept {
            kept.write(d)?;
        }
        report.write(line)?;
    }
    kept.finish()?;
    report.finish()?;
    let n = lines.iter().filter(|l| l.kept).count();
    log::info!("kept {n} of {} dialogues", lines.len());
    Ok(0)
}

#[derive(Serialize)]
struct SkippedAnchor {
    anchor: String,
    reason: String,
}

fn triplets(args: &TripletArgs, ctx: &Context, meta: Meta) -> Result<u8> {
    ctx.cfg.triplet.validate()?;
    let provider = ctx.provider("pipeline triplets")?;
    let ds = dialogues(&args.corpus)?;
    let profiles = par_map(ctx.cfg.parallelism, &ds, |d| dialogue_profile(d, provider.as_ref()))?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let anchors: Vec<usize> = (0..profiles.len()).collect();
    let results = par_map(ctx.cfg.parallelism, &anchors, |&i| match_triplets(i, &profiles, &ctx.cfg.triplet))?;
    let mut out = JsonlWriter::create(Some(&args.out), &meta)?;
    let mut skipped = match &args.skipped {
        Some(p) => Some(JsonlWriter::create(Some(p), &meta)?),
        None => None,
    };
    for (p, r) in profiles.iter().zip(results) {
        match r {
            Ok(ts) => {
                for t in &ts {
                    out.write(t)?;
                }
            }
            Err(e @ PipelineError::InsufficientCandidates { .. }) => {
                log::warn!("{e}");
                if let Some(w) = skipped.as_mut() {
                    w.write(&SkippedAnchor { anchor: p.dialogue_id.clone(), reason: e.to_string() })?;
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
    out.finish()?;
    if let Some(w) = skipped {
        w.finish()?;
    }
    Ok(0)
}

/// Dialogue IDs made safe for file names.
fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "._+-".contains(c) { c } else { '_' }).collect()
}

#[derive(Serialize)]
struct ProvenanceLine<'a> {
    dialogue_id: &'a str,
    #[serde(flatten)]
    entry: &'a fragtide_core::pipeline::ProvenanceEntry,
}

fn assemble(args: &AssembleArgs, meta: Meta) -> Result<u8> {
    let corpus = load_corpus(&args.corpus)?;
    let triplets: Vec<Triplet> = read_jsonl(&args.triplets)?.map(|r| r.map(|(_, t)| t)).collect::<Result<_, _>>()?;
    std::fs::create_dir_all(&args.prompts_dir).with_context(|| format!("creating {}", args.prompts_dir.display()))?;
    let mut assembled = Corpus::default();
    let mut out = JsonlWriter::create(Some(&args.out), &meta)?;
    let mut prov = match &args.provenance {
        Some(p) => Some(JsonlWriter::create(Some(p), &meta)?),
        None => None,
    };
    for t in &triplets {
        let a = assemble_longform(t, &corpus)?;
        let id = a.dialogue.dialogue_id.clone();
        if assembled.get(&id).is_some() {
            return Err(input_error(format!("triplet {id} listed twice")));
        }
        let stem = file_stem(&id);
        std::fs::write(args.prompts_dir.join(format!("{stem}.generation.txt")), &a.generation_prompt)?;
        std::fs::write(args.prompts_dir.join(format!("{stem}.annotation.txt")), &a.annotation_prompt)?;
        out.write(&a.dialogue)?;
        if let Some(w) = prov.as_mut() {
            for entry in &a.provenance {
                w.write(&ProvenanceLine { dialogue_id: &id, entry })?;
            }
        }
        assembled.insert(a.dialogue)?;
    }
    out.finish()?;
    if let Some(w) = prov {
        w.finish()?;
    }
    Ok(0)
}

fn parse_weights(s: &str) -> Result<TypeWeights> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| input_error(format!("bad --weights {s:?}")))?;
    let [multimodal, utterance_only, image_only, negative] = v[..] else {
        return Err(input_error(format!("--weights needs four values, got {s:?}")));
    };
    Ok(TypeWeights { multimodal, utterance_only, image_only, negative })
}

fn sample(args: &SampleArgs, ctx: &Context, meta: Meta) -> Result<u8> {
    let cfg = TaskSamplingConfig {
        weights: parse_weights(&args.weights)?,
        max_per_dialogue: args.max_per_dialogue,
        seed: ctx.cfg.seed,
    };
    let ds = dialogues(&args.corpus)?;
    let outcome = sample_tasks(&ds, &cfg)?;
    let mut out = JsonlWriter::create(Some(&args.out), &meta)?;
    for t in &outcome.tasks {
        out.write(t)?;
    }
    out.finish()?;
    if !outcome.skipped.is_empty() {
        log::warn!("{} dialogue(s) without tags skipped", outcome.skipped.len());
    }
    Ok(0)
}
