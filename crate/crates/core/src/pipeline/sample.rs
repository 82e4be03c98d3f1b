use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dialogue::{Dialogue, ElementId, Modality, TaskInstance, TaskType};

/// Relative weight of each task type when picking the next task of a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeWeights {
    pub multimodal: f64,
    pub utterance_only: f64,
    pub image_only: f64,
    pub negative: f64,
}

impl Default for TypeWeights {
    fn default() -> Self {
        TypeWeights { multimodal: 1.0, utterance_only: 1.0, image_only: 1.0, negative: 1.0 }
    }
}

impl TypeWeights {
    fn get(&self, t: TaskType) -> f64 {
        match t {
            TaskType::Multimodal => self.multimodal,
            TaskType::UtteranceOnly => self.utterance_only,
            TaskType::ImageOnly => self.image_only,
            TaskType::Negative => self.negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSamplingConfig {
    pub weights: TypeWeights,
    pub max_per_dialogue: usize,
    pub seed: u64,
}

impl Default for TaskSamplingConfig {
    fn default() -> Self {
        TaskSamplingConfig { weights: TypeWeights::default(), max_per_dialogue: 4, seed: 0 }
    }
}

impl TaskSamplingConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let w = self.weights;
        let all = [w.multimodal, w.utterance_only, w.image_only, w.negative];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(PipelineError::InvalidConfig("type weights must be nonnegative".into()));
        }
        if all.iter().all(|x| *x == 0.0) {
            return Err(PipelineError::InvalidConfig("all type weights are zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOutcome {
    pub tasks: Vec<TaskInstance>,
    /// Dialogues without tags.
    pub skipped: Vec<String>,
}

const TYPES: [TaskType; 4] = [TaskType::Multimodal, TaskType::UtteranceOnly, TaskType::ImageOnly, TaskType::Negative];

/// Candidate queries of one type: a tag and its fragment.
type Pool = Vec<(String, BTreeSet<ElementId>, BTreeSet<ElementId>)>;

fn pools(d: &Dialogue, foreign: &BTreeSet<&str>) -> [Pool; 4] {
    let mut out: [Pool; 4] = Default::default();
    for a in d.tags.iter().flatten() {
        let ids = |m: Modality| -> BTreeSet<ElementId> {
            a.element_refs.iter().filter(|r| r.modality == m).map(|r| r.element_id).collect()
        };
        let (utt, img) = (ids(Modality::Utterance), ids(Modality::Image));
        let slot = match (utt.is_empty(), img.is_empty()) {
            (false, false) => 0,
            (false, true) => 1,
            (true, false) => 2,
            (true, true) => continue,
        };
        out[slot].push((a.tag.clone(), utt, img));
    }
    let own: BTreeSet<&str> = d.tags.iter().flatten().map(|a| a.tag.as_str()).collect();
    out[3] = foreign
        .iter()
        .filter(|t| !own.contains(*t))
        .map(|t| (t.to_string(), BTreeSet::new(), BTreeSet::new()))
        .collect();
    out
}

/// Draws up to `max_per_dialogue` tasks per tagged dialogue. Each draw picks a
/// type by weight among the non-empty pools, then a tag from that pool without
/// replacement. Negatives use tags of other dialogues. Untagged dialogues are
/// skipped.
pub fn sample_tasks(dialogues: &[Dialogue], cfg: &TaskSamplingConfig) -> Result<SamplingOutcome, PipelineError> {
    cfg.validate()?;
    let all_tags: BTreeSet<&str> =
        dialogues.iter().flat_map(|d| d.tags.iter().flatten().map(|a| a.tag.as_str())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SamplingOutcome { tasks: Vec::new(), skipped: Vec::new() };
    for d in dialogues {
        if d.tags.as_ref().is_none_or(|t| t.is_empty()) {
            log::warn!("dialogue {}: no tags, skipped", d.dialogue_id);
            out.skipped.push(d.dialogue_id.clone());
            continue;
        }
        let mut pools = pools(d, &all_tags);
        for n in 0..cfg.max_per_dialogue {
            let weights: Vec<f64> =
                TYPES.iter().zip(&pools).map(|(t, p)| if p.is_empty() { 0.0 } else { cfg.weights.get(*t) }).collect();
            let Ok(dist) = WeightedIndex::new(&weights) else {
                break;
            };
            let k = dist.sample(&mut rng);
            let pick = rng.random_range(0..pools[k].len());
            let (query, utt, img) = pools[k].swap_remove(pick);
            out.tasks.push(TaskInstance {
                task_id: format!("{}#{n}", d.dialogue_id),
                dialogue_id: d.dialogue_id.clone(),
                query,
                gt_utt_ids: utt,
                gt_img_ids: img,
                task_type: TYPES[k],
            });
        }
    }
    Ok(out)
}
