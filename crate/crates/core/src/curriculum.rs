//! Difficulty-aware curriculum.
//!
//! Each task gets a retrieval F1 `f` and a mean token entropy `h` from a
//! cold-start prediction. Quartiles over the population split tasks into four
//! levels, and a phased schedule feeds them to training from easy to hard.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{parse_prediction, Modality, ParseMode, TaskInstance};
use crate::rewards::{set_f1, CandidateRecord};

/// Tolerance on the sum of a probability vector.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurriculumError {
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("quantile of an empty list")]
    EmptyInput,
    #[error("invalid phases: {0}")]
    InvalidPhases(String),
}

/// Shannon entropy in nats.
pub fn token_entropy(dist: &[f64]) -> Result<f64, CurriculumError> {
    if dist.is_empty() {
        return Err(CurriculumError::NotADistribution("empty vector".into()));
    }
    if let Some(p) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(CurriculumError::NotADistribution(format!("entry {p}")));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(CurriculumError::NotADistribution(format!("sums to {sum}")));
    }
    Ok(-dist.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

/// Cold-start indicators of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub task_id: String,
    pub f: f64,
    pub h: f64,
}

/// `(f, h)` of one candidate: joint set F1 against the ground truth (0 when the
/// output does not parse) and the mean of its token entropies.
pub fn instance_scores(candidate: &CandidateRecord, task: &TaskInstance) -> (f64, f64) {
    let f = match parse_prediction(&candidate.raw_output, ParseMode::Strict) {
        Ok(p) => Modality::ALL.iter().map(|&m| set_f1(p.prediction.ids(m), task.gt(m))).sum::<f64>() / 2.0,
        Err(_) => 0.0,
    };
    let h = match candidate.token_entropies.as_deref() {
        Some(e) if !e.is_empty() => e.iter().sum::<f64>() / e.len() as f64,
        _ => {
            log::debug!(
                "task {} candidate {}: no token entropies, using h = 0",
                candidate.task_id,
                candidate.candidate_index
            );
            0.0
        }
    };
    (f, h)
}

/// Per-task scores, averaging over the candidates of each task. Tasks keep
/// their first-appearance order.
pub fn score_population<'a>(scored: impl IntoIterator<Item = (&'a str, (f64, f64))>) -> Vec<InstanceScore> {
    let mut acc: IndexMap<&str, (f64, f64, usize)> = IndexMap::new();
    for (task_id, (f, h)) in scored {
        let e = acc.entry(task_id).or_default();
        e.0 += f;
        e.1 += h;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(task_id, (f, h, n))| InstanceScore { task_id: task_id.to_string(), f: f / n as f64, h: h / n as f64 })
        .collect()
}

/// Linear-interpolation quantile at index `p·(n−1)` of the sorted values.
pub fn quantile(values: &[f64], p: f64) -> Result<f64, CurriculumError> {
    if values.is_empty() {
        return Err(CurriculumError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, p))
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileThresholds {
    pub q25_f: f64,
    pub q75_f: f64,
    pub q25_h: f64,
    pub q75_h: f64,
}

impl QuantileThresholds {
    pub fn from_population(scores: &[InstanceScore]) -> Result<Self, CurriculumError> {
        let mut f: Vec<f64> = scores.iter().map(|s| s.f).collect();
        let mut h: Vec<f64> = scores.iter().map(|s| s.h).collect();
        if f.is_empty() {
            return Err(CurriculumError::EmptyInput);
        }
        f.sort_by(f64::total_cmp);
        h.sort_by(f64::total_cmp);
        Ok(QuantileThresholds {
            q25_f: quantile_sorted(&f, 0.25),
            q75_f: quantile_sorted(&f, 0.75),
            q25_h: quantile_sorted(&h, 0.25),
            q75_h: quantile_sorted(&h, 0.75),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyLevel {
    Easy,
    Medium,
    Confusing,
    Hard,
}

impl DifficultyLevel {
    pub const ALL: [DifficultyLevel; 4] =
        [DifficultyLevel::Easy, DifficultyLevel::Medium, DifficultyLevel::Confusing, DifficultyLevel::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyLevel::Easy => "easy",
            DifficultyLevel::Medium => "medium",
            DifficultyLevel::Confusing => "confusing",
            DifficultyLevel::Hard => "hard",
        }
    }
}

impl fmt::Display for DifficultyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DifficultyLevel {
    type Err = CurriculumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DifficultyLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s.trim())
            .ok_or_else(|| CurriculumError::InvalidPhases(format!("unknown level {s:?}")))
    }
}

/// Branches are checked in the order easy, confusing, hard.
pub fn assign_difficulty(f: f64, h: f64, t: &QuantileThresholds) -> DifficultyLevel {
    if f >= t.q75_f && h <= t.q25_h {
        DifficultyLevel::Easy
    } else if f <= t.q25_f && h >= t.q75_h {
        DifficultyLevel::Confusing
    } else if f <= t.q25_f && h <= t.q25_h {
        DifficultyLevel::Hard
    } else {
        DifficultyLevel::Medium
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub task_id: String,
    pub f: f64,
    pub h: f64,
    pub level: DifficultyLevel,
}

/// Thresholds over the population and the level of every task.
pub fn bucket_population(
    scores: &[InstanceScore],
) -> Result<(QuantileThresholds, Vec<DifficultyRecord>), CurriculumError> {
    let t = QuantileThresholds::from_population(scores)?;
    let records = scores
        .iter()
        .map(|s| DifficultyRecord {
            task_id: s.task_id.clone(),
            f: s.f,
            h: s.h,
            level: assign_difficulty(s.f, s.h, &t),
        })
        .collect();
    Ok((t, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePhase {
    pub phase_index: usize,
    pub included_levels: BTreeSet<DifficultyLevel>,
    pub fraction: f64,
    pub seed: u64,
}

fn levels(ls: &[DifficultyLevel]) -> BTreeSet<DifficultyLevel> {
    ls.iter().copied().collect()
}

/// Three phases: a tenth of easy and medium, half with confusing added, then everything.
pub fn default_phases(seed: u64) -> Vec<SchedulePhase> {
    use DifficultyLevel::*;
    let spec = [
        (0.1, levels(&[Easy, Medium])),
        (0.5, levels(&[Easy, Medium, Confusing])),
        (1.0, levels(&DifficultyLevel::ALL)),
    ];
    spec.into_iter()
        .enumerate()
        .map(|(i, (fraction, included_levels))| SchedulePhase {
            phase_index: i,
            included_levels,
            fraction,
            seed: seed.wrapping_add(i as u64),
        })
        .collect()
}

/// Parses `"0.1:easy,medium;0.5:easy,medium,confusing;1.0:all"`. A final
/// phase covering all levels at fraction 1 is appended if missing. Phase `i`
/// is seeded with `seed + i`.
pub fn parse_phases(s: &str, seed: u64) -> Result<Vec<SchedulePhase>, CurriculumError> {
    let mut phases = Vec::new();
    for (i, part) in s.split(';').map(str::trim).filter(|p| !p.is_empty()).enumerate() {
        let (frac, lvls) = part
            .split_once(':')
            .ok_or_else(|| CurriculumError::InvalidPhases(format!("expected FRACTION:LEVELS, got {part:?}")))?;
        let fraction: f64 =
            frac.trim().parse().map_err(|_| CurriculumError::InvalidPhases(format!("bad fraction {frac:?}")))?;
        let included_levels = if lvls.trim() == "all" {
            levels(&DifficultyLevel::ALL)
        } else {
            lvls.split(',').map(str::parse).collect::<Result<_, _>>()?
        };
        phases.push(SchedulePhase { phase_index: i, included_levels, fraction, seed: seed.wrapping_add(i as u64) });
    }
    let complete =
        phases.last().is_some_and(|p| p.fraction == 1.0 && p.included_levels.len() == DifficultyLevel::ALL.len());
    if !complete {
        let i = phases.len();
        phases.push(SchedulePhase {
            phase_index: i,
            included_levels: levels(&DifficultyLevel::ALL),
            fraction: 1.0,
            seed: seed.wrapping_add(i as u64),
        });
    }
    validate_phases(&phases)?;
    Ok(phases)
}

pub fn validate_phases(phases: &[SchedulePhase]) -> Result<(), CurriculumError> {
    let err = |m: String| Err(CurriculumError::InvalidPhases(m));
    let Some(last) = phases.last() else {
        return err("no phases".into());
    };
    let mut prev = 0.0;
    for p in phases {
        if !(p.fraction > 0.0 && p.fraction <= 1.0) {
            return err(format!("phase {}: fraction {} outside (0, 1]", p.phase_index, p.fraction));
        }
        if p.fraction < prev {
            return err(format!("phase {}: fraction decreases", p.phase_index));
        }
        if p.included_levels.is_empty() {
            return err(format!("phase {}: no levels", p.phase_index));
        }
        prev = p.fraction;
    }
    if last.fraction != 1.0 || last.included_levels.len() != DifficultyLevel::ALL.len() {
        return err("final phase must include all levels at fraction 1".into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBatch {
    pub phase: usize,
    pub task_ids: Vec<String>,
}

/// Per phase: eligible tasks in input order, shuffled with the phase seed and
/// truncated to `floor(fraction · n)`.
pub fn build_schedule(
    records: &[DifficultyRecord],
    phases: &[SchedulePhase],
) -> Result<Vec<PhaseBatch>, CurriculumError> {
    validate_phases(phases)?;
    Ok(phases
        .iter()
        .map(|p| {
            let mut seen = HashSet::new();
            let mut eligible: Vec<&str> = records
                .iter()
                .filter(|r| p.included_levels.contains(&r.level))
                .map(|r| r.task_id.as_str())
                .filter(|id| seen.insert(*id))
                .collect();
            eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(p.seed));
            let keep = phase_size(p.fraction, eligible.len());
            PhaseBatch { phase: p.phase_index, task_ids: eligible[..keep].iter().map(|s| s.to_string()).collect() }
        })
        .collect())
}

/// `floor(fraction · n)`, with slack for fractions like 0.1 that are not exact in binary.
pub fn phase_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).min(n)
}
