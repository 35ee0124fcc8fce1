use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::batch::scene_index;
use crate::bench::{metric_ciou, metric_ir_at_k, metric_miou, metric_pq, Corpus, Partition};
use crate::encoders::Scene;
use crate::error::{Error, Result};
use crate::tasks::{
    ground_masks, run_generic_segmentation, run_grounded, run_image_text_retrieval,
    run_interactive, run_interleave_retrieval, Model,
};
use crate::tensor::BoolMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub ciou: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub ir_at_1: f64,
    pub ir_at_5: f64,
    pub ir_at_10: f64,
    /// Image-to-text recall at 1; absent for interleave retrieval.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tr_at_1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub scenes: usize,
    pub interleave_grounding: GroundingMetrics,
    pub interleave_retrieval: RetrievalMetrics,
    pub image_text_retrieval: RetrievalMetrics,
    pub generic_segmentation_pq: f64,
    pub grounded_segmentation: GroundingMetrics,
    pub interactive_segmentation: GroundingMetrics,
}

impl MetricsReport {
    /// Every metric as `(name, value)`, in report order.
    pub fn flatten(&self) -> Vec<(String, f64)> {
        let g = |p: &str, m: &GroundingMetrics| {
            vec![(format!("{p}.ciou"), m.ciou), (format!("{p}.miou"), m.miou)]
        };
        let r = |p: &str, m: &RetrievalMetrics| {
            let mut v = vec![
                (format!("{p}.ir_at_1"), m.ir_at_1),
                (format!("{p}.ir_at_5"), m.ir_at_5),
                (format!("{p}.ir_at_10"), m.ir_at_10),
            ];
            if let Some(t) = m.tr_at_1 {
                v.push((format!("{p}.tr_at_1"), t));
            }
            v
        };
        let mut out = g("interleave_grounding", &self.interleave_grounding);
        out.extend(r("interleave_retrieval", &self.interleave_retrieval));
        out.extend(r("image_text_retrieval", &self.image_text_retrieval));
        out.push((
            "generic_segmentation.pq".into(),
            self.generic_segmentation_pq,
        ));
        out.extend(g("grounded_segmentation", &self.grounded_segmentation));
        out.extend(g(
            "interactive_segmentation",
            &self.interactive_segmentation,
        ));
        out
    }

    /// Fixed-width two-column table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<36} {:>8}\n", "metric", "value");
        for (k, v) in self.flatten() {
            s.push_str(&format!("{k:<36} {v:>8.4}\n"));
        }
        s
    }
}

/// Everything the metrics are computed from. Scene ids appear as `usize`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutputs {
    /// Per record, one mask per entity.
    pub grounding: Vec<Vec<BoolMatrix>>,
    /// Per record, retrieval corpus scene ids best first.
    pub interleave_rankings: Vec<Vec<usize>>,
    /// Per caption, image indices best first.
    pub text_to_image: Vec<Vec<usize>>,
    /// Per image, caption indices best first.
    pub image_to_text: Vec<Vec<usize>>,
    /// Per retrieval scene.
    pub generic: Vec<Partition>,
    /// Per retrieval scene, one mask per segment.
    pub grounded: Vec<Vec<BoolMatrix>>,
    pub interactive: Vec<Vec<BoolMatrix>>,
}

/// Ground truth matching [`EvalOutputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTargets {
    pub grounding: Vec<Vec<BoolMatrix>>,
    pub interleave_targets: Vec<usize>,
    pub generic: Vec<Partition>,
    pub segments: Vec<Vec<BoolMatrix>>,
}

impl EvalOutputs {
    /// Outputs that reproduce `targets` exactly.
    pub fn oracle(targets: &EvalTargets) -> Self {
        let n = targets.generic.len();
        let rotate = |i: usize| (0..n).map(|k| (i + k) % n).collect::<Vec<_>>();
        Self {
            grounding: targets.grounding.clone(),
            interleave_rankings: targets
                .interleave_targets
                .iter()
                .map(|&t| vec![t])
                .collect(),
            text_to_image: (0..n).map(rotate).collect(),
            image_to_text: (0..n).map(rotate).collect(),
            generic: targets.generic.clone(),
            grounded: targets.segments.clone(),
            interactive: targets.segments.clone(),
        }
    }
}

/// Distinct scenes of the corpus records, in first-appearance order.
pub fn eval_scenes(corpus: &Corpus) -> Result<Vec<&Scene>> {
    let index = scene_index(corpus);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in &corpus.records {
        let &i = index
            .get(&r.scene_id)
            .ok_or_else(|| Error::invalid(format!("record scene {} missing", r.scene_id)))?;
        if seen.insert(i) {
            out.push(&corpus.scenes[i]);
        }
    }
    Ok(out)
}

pub fn eval_targets(corpus: &Corpus) -> Result<EvalTargets> {
    let scenes = eval_scenes(corpus)?;
    Ok(EvalTargets {
        grounding: corpus.records.iter().map(|r| r.gt_masks()).collect(),
        interleave_targets: corpus.records.iter().map(|r| r.scene_id as usize).collect(),
        generic: scenes
            .iter()
            .map(|s| Partition {
                labels: s.labels(),
                categories: s.segments.iter().map(|g| g.category).collect(),
            })
            .collect(),
        segments: scenes
            .iter()
            .map(|s| s.segments.iter().map(|g| g.mask.clone()).collect())
            .collect(),
    })
}

/// The mask cell nearest the mask's centroid; ties go to the first cell in
/// row-major order.
pub fn central_cell(mask: &BoolMatrix) -> Option<(usize, usize)> {
    let cells: Vec<(usize, usize)> = (0..mask.rows())
        .flat_map(|r| (0..mask.cols()).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.get(r, c))
        .collect();
    let n = cells.len() as f64;
    let cr = cells.iter().map(|c| c.0 as f64).sum::<f64>() / n;
    let cc = cells.iter().map(|c| c.1 as f64).sum::<f64>() / n;
    let d = |&(r, c): &(usize, usize)| (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
    cells
        .iter()
        .fold(None, |best: Option<(usize, usize)>, c| match best {
            Some(b) if d(&b) <= d(c) => Some(b),
            _ => Some(*c),
        })
}

/// Runs every task over the corpus records and their scenes.
pub fn predict(model: &Model, corpus: &Corpus) -> Result<EvalOutputs> {
    let scenes = eval_scenes(corpus)?;
    let mut grounding = Vec::with_capacity(corpus.records.len());
    let mut entries = Vec::with_capacity(corpus.records.len());
    for r in &corpus.records {
        let scene = corpus.scene(r.scene_id).expect("checked by eval_scenes");
        let entry = r.to_entry();
        grounding.push(ground_masks(model, scene, &entry, &corpus.scenes)?);
        entries.push(entry);
    }
    let owned: Vec<Scene> = scenes.iter().map(|s| (*s).clone()).collect();
    let ranked = run_interleave_retrieval(model, &owned, &entries, &corpus.scenes)?;
    let captions: Vec<String> = scenes
        .iter()
        .map(|s| {
            let i = corpus
                .scenes
                .iter()
                .position(|c| c.scene_id == s.scene_id)
                .expect("scene present");
            corpus.captions[i].clone()
        })
        .collect();
    let it = run_image_text_retrieval(model, &owned, &captions)?;
    let mut generic = Vec::new();
    let mut grounded = Vec::new();
    let mut interactive = Vec::new();
    for s in &scenes {
        generic.push(run_generic_segmentation(model, s)?);
        let mut g = Vec::new();
        let mut c = Vec::new();
        for seg in &s.segments {
            g.push(run_grounded(model, s, &seg.phrase)?);
            let click =
                central_cell(&seg.mask).ok_or_else(|| Error::invalid("empty segment mask"))?;
            c.push(run_interactive(model, s, click)?);
        }
        grounded.push(g);
        interactive.push(c);
    }
    Ok(EvalOutputs {
        grounding,
        interleave_rankings: ranked
            .into_iter()
            .map(|r| r.into_iter().map(|(id, _)| id as usize).collect())
            .collect(),
        text_to_image: it.text_to_image,
        image_to_text: it.image_to_text,
        generic,
        grounded,
        interactive,
    })
}

fn grounding_metrics(pred: &[Vec<BoolMatrix>], gt: &[Vec<BoolMatrix>]) -> Result<GroundingMetrics> {
    let p: Vec<BoolMatrix> = pred.iter().flatten().cloned().collect();
    let g: Vec<BoolMatrix> = gt.iter().flatten().cloned().collect();
    Ok(GroundingMetrics {
        ciou: metric_ciou(&p, &g)?,
        miou: metric_miou(&p, &g)?,
    })
}

fn retrieval_metrics(
    rankings: &[Vec<usize>],
    targets: &[usize],
    tr: Option<&[Vec<usize>]>,
) -> Result<RetrievalMetrics> {
    Ok(RetrievalMetrics {
        ir_at_1: metric_ir_at_k(rankings, targets, 1)?,
        ir_at_5: metric_ir_at_k(rankings, targets, 5)?,
        ir_at_10: metric_ir_at_k(rankings, targets, 10)?,
        tr_at_1: tr.map(|r| metric_ir_at_k(r, targets, 1)).transpose()?,
    })
}

/// Metrics of `out` against `gt`.
pub fn score_outputs(out: &EvalOutputs, gt: &EvalTargets) -> Result<MetricsReport> {
    let n = gt.generic.len();
    if n == 0 {
        return Err(Error::invalid("evaluation corpus is empty"));
    }
    let diag: Vec<usize> = (0..n).collect();
    let pq = gt
        .generic
        .iter()
        .zip(&out.generic)
        .map(|(g, p)| metric_pq(p, g))
        .sum::<Result<f64>>()?
        / n as f64;
    Ok(MetricsReport {
        records: gt.grounding.len(),
        scenes: n,
        interleave_grounding: grounding_metrics(&out.grounding, &gt.grounding)?,
        interleave_retrieval: retrieval_metrics(
            &out.interleave_rankings,
            &gt.interleave_targets,
            None,
        )?,
        image_text_retrieval: retrieval_metrics(
            &out.text_to_image,
            &diag,
            Some(&out.image_to_text),
        )?,
        generic_segmentation_pq: pq,
        grounded_segmentation: grounding_metrics(&out.grounded, &gt.segments)?,
        interactive_segmentation: grounding_metrics(&out.interactive, &gt.segments)?,
    })
}

/// Predicts and scores every task on `corpus`. Retrieval ranks the scenes
/// of the corpus records.
pub fn evaluate(model: &Model, corpus: &Corpus) -> Result<MetricsReport> {
    if corpus.records.is_empty() {
        return Err(Error::invalid("evaluation corpus has no records"));
    }
    score_outputs(&predict(model, corpus)?, &eval_targets(corpus)?)
}
