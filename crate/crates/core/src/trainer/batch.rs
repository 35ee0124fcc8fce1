use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::bench::CaptionPart;
use crate::bench::{BenchRecord, Corpus};
use crate::encoders::{InterleaveEntry, InterleaveNode};
use crate::error::{Error, Result};
use crate::tasks::names;

/// One training example. Scene and record fields index into the corpus.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Generic {
        scene: usize,
    },
    Grounded {
        scene: usize,
        segment: usize,
    },
    Interactive {
        scene: usize,
        segment: usize,
        click: (usize, usize),
    },
    ImageText {
        scene: usize,
    },
    InterleaveRetrieval {
        scene: usize,
        entry: InterleaveEntry,
    },
    InterleaveGrounding {
        record: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task: String,
    pub samples: Vec<Sample>,
}

/// Step-local generator: the same `(seed, step)` always yields the same
/// stream.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub(crate) fn scene_index(corpus: &Corpus) -> BTreeMap<u64, usize> {
    corpus
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.scene_id, i))
        .collect()
}

/// The record's caption with each entity independently swapped, at rate
/// `p`, for a visual reference to its own segment.
pub fn same_image_entry<R: Rng>(record: &BenchRecord, p: f64, rng: &mut R) -> InterleaveEntry {
    let mut k = 0;
    let nodes = record
        .caption
        .parts()
        .iter()
        .map(|part| match part {
            CaptionPart::Text(t) => InterleaveNode::Connection(t.clone()),
            CaptionPart::Entity { ann_id, phrase } => {
                k += 1;
                if rng.gen::<f64>() < p {
                    InterleaveNode::VisualRef {
                        scene_id: record.scene_id,
                        ann_id: *ann_id,
                    }
                } else {
                    InterleaveNode::TextSpan(phrase.clone())
                }
            }
        })
        .collect();
    debug_assert_eq!(k, record.entities.len());
    InterleaveEntry::new(nodes)
}

/// Draws a task by `task_mix`, then up to `batch_size` distinct records
/// for it.
pub fn make_batch(corpus: &Corpus, cfg: &TrainConfig, step: usize) -> Result<Batch> {
    if corpus.records.is_empty() {
        return Err(Error::invalid("training corpus has no records"));
    }
    let mut rng = step_rng(cfg.seed, step);
    let tasks: Vec<(&String, &f64)> = cfg.task_mix.iter().collect();
    let dist = WeightedIndex::new(tasks.iter().map(|t| *t.1))
        .map_err(|e| Error::invalid(format!("task_mix: {e}")))?;
    let task = tasks[dist.sample(&mut rng)].0.clone();

    let scenes = scene_index(corpus);
    let eligible: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.entities.is_empty() && scenes.contains_key(&r.scene_id))
        .map(|(i, _)| i)
        .collect();
    let retrieval = task == names::IMAGE_TEXT_RETRIEVAL || task == names::INTERLEAVE_RETRIEVAL;
    if eligible.is_empty() || (retrieval && eligible.len() < 2) {
        return Err(Error::invalid(format!(
            "no eligible records for task `{task}`"
        )));
    }
    let picked: Vec<usize> = sample(&mut rng, eligible.len(), cfg.batch_size.min(eligible.len()))
        .into_iter()
        .map(|i| eligible[i])
        .collect();

    let mut samples = Vec::with_capacity(picked.len());
    for r in picked {
        let record = &corpus.records[r];
        let si = scenes[&record.scene_id];
        let scene = &corpus.scenes[si];
        let sample = match task.as_str() {
            names::GENERIC_SEGMENTATION => Sample::Generic { scene: si },
            names::GROUNDED_SEGMENTATION => Sample::Grounded {
                scene: si,
                segment: rng.gen_range(0..scene.segments.len()),
            },
            names::INTERACTIVE_SEGMENTATION => {
                let segment = rng.gen_range(0..scene.segments.len());
                let mask = &scene.segments[segment].mask;
                let cells: Vec<usize> =
                    (0..mask.data().len()).filter(|&c| mask.data()[c]).collect();
                let c = cells[rng.gen_range(0..cells.len())];
                Sample::Interactive {
                    scene: si,
                    segment,
                    click: (c / scene.width, c % scene.width),
                }
            }
            names::IMAGE_TEXT_RETRIEVAL => Sample::ImageText { scene: si },
            names::INTERLEAVE_RETRIEVAL => Sample::InterleaveRetrieval {
                scene: si,
                entry: same_image_entry(record, cfg.p_replace, &mut rng),
            },
            names::INTERLEAVE_GROUNDING => Sample::InterleaveGrounding { record: r },
            other => {
                return Err(Error::invalid(format!(
                    "no batch builder for task `{other}`"
                )))
            }
        };
        samples.push(sample);
    }
    Ok(Batch { task, samples })
}
