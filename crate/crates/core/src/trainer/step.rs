use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::batch::{Batch, Sample};
use super::config::{is_zero, task_weights, TrainConfig};
use super::optim::Adam;
use crate::bench::Corpus;
use crate::encoders::Scene;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, GroundTruth, LossWeights, PanopticTarget, TaskOutputs};
use crate::tasks::{
    embed_caption, embed_image, embed_interleave, forward_generic, forward_grounded,
    forward_interactive, forward_interleave_grounding, names, score, segment_masks, stack_masks,
    Model,
};
use crate::tensor::{BoolMatrix, ParamVars, Tape, Var};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub task: String,
    /// Weighted total, averaged over the batch.
    pub loss: f64,
    /// Unweighted terms, averaged over the batch.
    pub terms: BTreeMap<String, f64>,
    pub lr: f64,
    /// True when every weight of the sampled task is zero and nothing was
    /// updated.
    pub skipped: bool,
}

fn single_mask(scene: &Scene, segment: usize) -> Result<BoolMatrix> {
    stack_masks(std::slice::from_ref(&scene.segments[segment].mask))
}

struct Losses {
    total: Vec<Var>,
    terms: Vec<BTreeMap<String, f64>>,
}

impl Losses {
    fn push(
        &mut self,
        tape: &mut Tape,
        out: TaskOutputs,
        gt: GroundTruth,
        w: &LossWeights,
    ) -> Result<()> {
        let r = combined_loss(tape, &out, &gt, w)?;
        self.total.push(r.total);
        self.terms.push(r.terms);
        Ok(())
    }
}

fn batch_losses(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    corpus: &Corpus,
    batch: &Batch,
    w: &LossWeights,
) -> Result<Losses> {
    let mut acc = Losses {
        total: Vec::new(),
        terms: Vec::new(),
    };
    let scenes = &corpus.scenes;
    match batch.task.as_str() {
        names::IMAGE_TEXT_RETRIEVAL => {
            let mut im = Vec::new();
            let mut tx = Vec::new();
            for s in &batch.samples {
                let Sample::ImageText { scene } = s else {
                    return Err(Error::invalid("mixed batch"));
                };
                im.push(embed_image(
                    tape,
                    model,
                    vars,
                    names::IMAGE_TEXT_RETRIEVAL,
                    &scenes[*scene],
                )?);
                tx.push(embed_caption(tape, model, vars, &corpus.captions[*scene])?);
            }
            let (im, tx) = (tape.concat_rows(&im)?, tape.concat_rows(&tx)?);
            let s = score(tape, model, vars, tx, im)?;
            let out = TaskOutputs {
                imgtextr: Some(s),
                ..Default::default()
            };
            acc.push(tape, out, GroundTruth::default(), w)?;
        }
        names::INTERLEAVE_RETRIEVAL => {
            let mut im = Vec::new();
            let mut en = Vec::new();
            for s in &batch.samples {
                let Sample::InterleaveRetrieval { scene, entry } = s else {
                    return Err(Error::invalid("mixed batch"));
                };
                im.push(embed_image(
                    tape,
                    model,
                    vars,
                    names::INTERLEAVE_RETRIEVAL,
                    &scenes[*scene],
                )?);
                en.push(embed_interleave(tape, model, vars, entry, scenes)?);
            }
            let (im, en) = (tape.concat_rows(&im)?, tape.concat_rows(&en)?);
            let s = score(tape, model, vars, en, im)?;
            let out = TaskOutputs {
                intr: Some(s),
                ..Default::default()
            };
            acc.push(tape, out, GroundTruth::default(), w)?;
        }
        _ => {
            for s in &batch.samples {
                let (out, gt) = match s {
                    Sample::Generic { scene } => {
                        let sc = &scenes[*scene];
                        let target = PanopticTarget {
                            labels: sc.segments.iter().map(|g| g.category).collect(),
                            masks: segment_masks(sc)?,
                        };
                        let out = TaskOutputs {
                            pano: Some(forward_generic(tape, model, vars, sc)?),
                            ..Default::default()
                        };
                        (
                            out,
                            GroundTruth {
                                pano: Some(target),
                                ..Default::default()
                            },
                        )
                    }
                    Sample::Grounded { scene, segment } => {
                        let sc = &scenes[*scene];
                        let p =
                            forward_grounded(tape, model, vars, sc, &sc.segments[*segment].phrase)?;
                        let out = TaskOutputs {
                            grd: Some(p),
                            ..Default::default()
                        };
                        (
                            out,
                            GroundTruth {
                                grd: Some(single_mask(sc, *segment)?),
                                ..Default::default()
                            },
                        )
                    }
                    Sample::Interactive {
                        scene,
                        segment,
                        click,
                    } => {
                        let sc = &scenes[*scene];
                        let p = forward_interactive(tape, model, vars, sc, *click)?;
                        let out = TaskOutputs {
                            iseg: Some(p),
                            ..Default::default()
                        };
                        (
                            out,
                            GroundTruth {
                                iseg: Some(single_mask(sc, *segment)?),
                                ..Default::default()
                            },
                        )
                    }
                    Sample::InterleaveGrounding { record } => {
                        let r = &corpus.records[*record];
                        let sc = corpus.scene(r.scene_id).ok_or_else(|| {
                            Error::invalid(format!("record scene {} missing", r.scene_id))
                        })?;
                        let p = forward_interleave_grounding(
                            tape,
                            model,
                            vars,
                            sc,
                            &r.to_entry(),
                            scenes,
                        )?;
                        let out = TaskOutputs {
                            intg: Some(p),
                            ..Default::default()
                        };
                        (
                            out,
                            GroundTruth {
                                intg: Some(stack_masks(&r.gt_masks())?),
                                ..Default::default()
                            },
                        )
                    }
                    _ => return Err(Error::invalid("mixed batch")),
                };
                acc.push(tape, out, gt, w)?;
            }
        }
    }
    Ok(acc)
}

/// Forward, combined loss, backward and one optimizer update.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    corpus: &Corpus,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepReport> {
    let w = task_weights(&cfg.weights, &batch.task);
    let mut report = StepReport {
        step,
        task: batch.task.clone(),
        loss: 0.0,
        terms: BTreeMap::new(),
        lr: opt.lr,
        skipped: true,
    };
    if is_zero(&w) || batch.samples.is_empty() {
        return Ok(report);
    }
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true);
    let losses = batch_losses(&mut tape, model, &vars, corpus, batch, &w)?;
    let n = losses.total.len() as f64;
    let sum = tape.concat_rows(&losses.total)?;
    let sum = tape.sum(sum);
    let total = tape.scale(sum, 1.0 / n);
    for t in &losses.terms {
        for (k, v) in t {
            *report.terms.entry(k.clone()).or_insert(0.0) += v / n;
        }
    }
    report.loss = tape.value(total).item();
    report.skipped = false;
    if !report.loss.is_finite() || report.terms.values().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            report: serde_json::to_string(&report)?,
        });
    }
    let mut grads = tape.backward(total)?;
    let grads = vars.collect_grads(&tape, &mut grads);
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            report: format!("non-finite gradient; {}", serde_json::to_string(&report)?),
        });
    }
    opt.update(&mut model.params, &grads)?;
    Ok(report)
}
