use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, SegWeights};
use crate::tasks::{names, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Relative sampling weight of each task.
    pub task_mix: BTreeMap<String, f64>,
    /// Rate at which interleave-retrieval training entries swap an entity
    /// for a visual reference to its own segment.
    pub p_replace: f64,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

pub fn default_task_mix() -> BTreeMap<String, f64> {
    [
        (names::GENERIC_SEGMENTATION, 1.0),
        (names::GROUNDED_SEGMENTATION, 1.0),
        (names::IMAGE_TEXT_RETRIEVAL, 2.0),
        (names::INTERACTIVE_SEGMENTATION, 1.0),
        (names::INTERLEAVE_GROUNDING, 3.0),
        (names::INTERLEAVE_RETRIEVAL, 2.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1.5e-3,
            task_mix: default_task_mix(),
            p_replace: 0.5,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

const TASKS: [&str; 6] = [
    names::GENERIC_SEGMENTATION,
    names::GROUNDED_SEGMENTATION,
    names::IMAGE_TEXT_RETRIEVAL,
    names::INTERACTIVE_SEGMENTATION,
    names::INTERLEAVE_GROUNDING,
    names::INTERLEAVE_RETRIEVAL,
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "learning_rate must be finite and nonnegative",
            ));
        }
        if !(0.0..=1.0).contains(&self.p_replace) {
            return Err(Error::invalid("p_replace must lie in [0, 1]"));
        }
        for (task, w) in &self.task_mix {
            if !TASKS.contains(&task.as_str()) {
                return Err(Error::invalid(format!(
                    "task_mix names unknown task `{task}`"
                )));
            }
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!(
                    "task_mix weight of `{task}` must be nonnegative"
                )));
            }
        }
        if self.task_mix.values().all(|w| *w == 0.0) {
            return Err(Error::invalid("task_mix needs a positive weight"));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// The loss weights that apply to `task`, every other weight zeroed.
pub fn task_weights(w: &LossWeights, task: &str) -> LossWeights {
    let mut out = LossWeights::zero();
    match task {
        names::GENERIC_SEGMENTATION => out.pano = w.pano,
        names::GROUNDED_SEGMENTATION => out.grd = w.grd,
        names::INTERACTIVE_SEGMENTATION => out.iseg = w.iseg,
        names::IMAGE_TEXT_RETRIEVAL => out.theta = w.theta,
        names::INTERLEAVE_RETRIEVAL => out.phi = w.phi,
        names::INTERLEAVE_GROUNDING => out.intg = w.intg,
        _ => {}
    }
    out
}

pub(crate) fn is_zero(w: &LossWeights) -> bool {
    let seg = |s: SegWeights| s.alpha == 0.0 && s.beta == 0.0 && s.gamma == 0.0;
    seg(w.pano) && seg(w.grd) && seg(w.iseg) && seg(w.intg) && w.theta == 0.0 && w.phi == 0.0
}
