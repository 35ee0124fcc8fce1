use std::cmp::Ordering;

use super::model::Model;
use super::spec::{names, TaskSpec};
use crate::bench::Partition;
use crate::encoders::{
    category_names, sample_prompts, sample_queries, InterleaveEntry, PromptInput, QueryCounts,
    Sampling, Scene, SceneSource, TextSeq,
};
use crate::error::{Error, Result};
use crate::interface::{head_mask, head_score, interface_forward, project, ProjectedQueries};
use crate::losses::{PanopticPrediction, ReferringPrediction};
use crate::tensor::{sigmoid_f64, BoolMatrix, ParamVars, Tape, Tensor, Var};

/// Index of the best non-excluded target for each source row. Ties go to
/// the lowest index.
pub fn unify_match(sim: &Tensor, exclusion: &[(usize, usize)]) -> Result<Vec<usize>> {
    if !sim.is_finite() {
        return Err(Error::NonFinite("unify_match"));
    }
    (0..sim.rows())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..sim.cols() {
                if exclusion.contains(&(i, j)) {
                    continue;
                }
                let v = sim.at(i, j);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|b| b.0).ok_or(Error::AllExcluded(i))
        })
        .collect()
}

/// Indices sorted by descending score; equal scores keep index order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Encodes prompts, runs the interface and projects the queries.
fn run(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    task: &TaskSpec,
    inputs: Vec<PromptInput>,
    counts: QueryCounts,
) -> Result<ProjectedQueries> {
    let prompts = sample_prompts(tape, inputs, task)?;
    let queries = sample_queries(tape, vars, task, counts)?;
    let (_, queries) = interface_forward(
        tape,
        &prompts,
        &queries,
        task,
        &model.config.interface,
        vars,
    )?;
    project(tape, &queries, task, vars)
}

pub(crate) fn score(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    a: Var,
    b: Var,
) -> Result<Var> {
    head_score(tape, a, b, model.config.interface.score, vars)
}

fn flat_masks(masks: &[&BoolMatrix]) -> Result<BoolMatrix> {
    let cols = masks.first().map_or(0, |m| m.rows() * m.cols());
    let data = masks
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    BoolMatrix::new(masks.len(), cols, data)
}

/// Every segment mask of `scene`, one flattened row each.
pub fn segment_masks(scene: &Scene) -> Result<BoolMatrix> {
    flat_masks(&scene.segments.iter().map(|s| &s.mask).collect::<Vec<_>>())
}

/// Flattened `[n × (H·W)]` matrix of the given masks.
pub fn stack_masks(masks: &[BoolMatrix]) -> Result<BoolMatrix> {
    flat_masks(&masks.iter().collect::<Vec<_>>())
}

/// Class-per-query outputs: scores of object queries against one class
/// query per category, with a trailing no-object column.
pub fn forward_generic(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    scene: &Scene,
) -> Result<PanopticPrediction> {
    let task = model.task(names::GENERIC_SEGMENTATION)?;
    let image = model.encoders.encode_image(tape, scene, vars)?;
    let classes = category_names();
    let text = TextSeq::new(&classes.join(" "))?;
    if text.len() != classes.len() {
        return Err(Error::invalid("each class name must be one token"));
    }
    let class_tokens = model.encoders.encode_text(tape, &text, vars)?;
    let groups = (0..classes.len()).map(|i| i..i + 1).collect();
    let inputs = vec![
        PromptInput::new("p.image", image, Sampling::Identity),
        PromptInput::new("p.class", class_tokens, Sampling::GroupMean(groups)),
    ];
    let counts = QueryCounts {
        entities: 0,
        classes: classes.len(),
    };
    let out = run(tape, model, vars, task, inputs, counts)?;
    let obj = out.semantic("q.object")?;
    let cls = out.semantic("q.class")?;
    let s = score(tape, model, vars, obj, cls)?;
    let n = tape.value(obj).rows();
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let no_obj = vars.get("head.no_object")?;
    let no_obj = tape.matmul(ones, no_obj)?;
    let class_logits = tape.concat_cols(&[s, no_obj])?;
    let pixel = out.pixel("q.object")?;
    let mask_logits = head_mask(tape, pixel, image)?;
    Ok(PanopticPrediction {
        class_logits,
        mask_logits,
    })
}

fn referring(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    task: &TaskSpec,
    image: Var,
    inputs: Vec<PromptInput>,
    (objects, single): (&str, &str),
) -> Result<ReferringPrediction> {
    let out = run(tape, model, vars, task, inputs, QueryCounts::default())?;
    let q = out.semantic(single)?;
    let o = out.semantic(objects)?;
    let query_logits = score(tape, model, vars, q, o)?;
    let pixel = out.pixel(objects)?;
    let mask_logits = head_mask(tape, pixel, image)?;
    Ok(ReferringPrediction {
        query_logits,
        mask_logits,
    })
}

/// Text-referred segmentation: one distribution over object queries.
pub fn forward_grounded(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    scene: &Scene,
    phrase: &str,
) -> Result<ReferringPrediction> {
    let task = model.task(names::GROUNDED_SEGMENTATION)?;
    let image = model.encoders.encode_image(tape, scene, vars)?;
    let text = model
        .encoders
        .encode_text(tape, &TextSeq::new(phrase)?, vars)?;
    let inputs = vec![
        PromptInput::new("p.image", image, Sampling::Identity),
        PromptInput::new("p.text", text, Sampling::Identity),
    ];
    referring(
        tape,
        model,
        vars,
        task,
        image,
        inputs,
        ("q.grounding", "q.text"),
    )
}

/// Click-referred segmentation. The click is the image features pooled
/// over the cell at `(row, col)`.
pub fn forward_interactive(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    scene: &Scene,
    click: (usize, usize),
) -> Result<ReferringPrediction> {
    let task = model.task(names::INTERACTIVE_SEGMENTATION)?;
    let image = model.encoders.encode_image(tape, scene, vars)?;
    let (r, c) = click;
    let inputs = vec![
        PromptInput::new("p.image", image, Sampling::Identity),
        PromptInput::new(
            "p.spatial",
            image,
            Sampling::Roi {
                grid: (scene.height, scene.width),
                bbox: [c, r, 1, 1],
            },
        ),
    ];
    referring(
        tape,
        model,
        vars,
        task,
        image,
        inputs,
        ("q.segment", "q.spatial"),
    )
}

/// Entity grounding: `query_logits` is `n_ent × n_obj`.
pub fn forward_interleave_grounding<S: SceneSource + ?Sized>(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    scene: &Scene,
    entry: &InterleaveEntry,
    scenes: &S,
) -> Result<ReferringPrediction> {
    let task = model.task(names::INTERLEAVE_GROUNDING)?;
    if entry.entity_count() == 0 {
        return Err(Error::invalid("interleave entry has no entities"));
    }
    let image = model.encoders.encode_image(tape, scene, vars)?;
    let enc = model
        .encoders
        .encode_interleave(tape, entry, scenes, vars)?;
    let inputs = vec![
        PromptInput::new("p.image", image, Sampling::Identity),
        PromptInput::new("p.interleave", enc.tokens, Sampling::Identity)
            .with_groups(enc.entity_spans()),
    ];
    let counts = QueryCounts {
        entities: entry.entity_count(),
        classes: 0,
    };
    let out = run(tape, model, vars, task, inputs, counts)?;
    let ent = out.semantic("q.interleave")?;
    let obj = out.semantic("q.entity")?;
    let query_logits = score(tape, model, vars, ent, obj)?;
    let pixel = out.pixel("q.entity")?;
    let mask_logits = head_mask(tape, pixel, image)?;
    Ok(ReferringPrediction {
        query_logits,
        mask_logits,
    })
}

/// Semantic image embedding `[1 × d]` from a retrieval task's image query.
pub fn embed_image(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    task_name: &str,
    scene: &Scene,
) -> Result<Var> {
    let task = model.task(task_name)?.restrict(&["q.image"])?;
    let image = model.encoders.encode_image(tape, scene, vars)?;
    let inputs = vec![PromptInput::new("p.image", image, Sampling::Identity)];
    run(tape, model, vars, &task, inputs, QueryCounts::default())?.semantic("q.image")
}

/// Semantic caption embedding `[1 × d]`.
pub fn embed_caption(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    caption: &str,
) -> Result<Var> {
    let task = model
        .task(names::IMAGE_TEXT_RETRIEVAL)?
        .restrict(&["q.caption"])?;
    let text = model
        .encoders
        .encode_text(tape, &TextSeq::new(caption)?, vars)?;
    let inputs = vec![PromptInput::new("p.caption", text, Sampling::Identity)];
    run(tape, model, vars, &task, inputs, QueryCounts::default())?.semantic("q.caption")
}

/// Entry embedding `[1 × d]`: the mean of the per-entity interleave
/// queries.
pub fn embed_interleave<S: SceneSource + ?Sized>(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    entry: &InterleaveEntry,
    scenes: &S,
) -> Result<Var> {
    let task = model
        .task(names::INTERLEAVE_RETRIEVAL)?
        .restrict(&["q._interleave"])?;
    if entry.entity_count() == 0 {
        return Err(Error::invalid("interleave entry has no entities"));
    }
    let enc = model
        .encoders
        .encode_interleave(tape, entry, scenes, vars)?;
    let inputs = vec![
        PromptInput::new("p.interleave", enc.tokens, Sampling::Identity)
            .with_groups(enc.entity_spans()),
    ];
    let counts = QueryCounts {
        entities: entry.entity_count(),
        classes: 0,
    };
    let q = run(tape, model, vars, &task, inputs, counts)?.semantic("q._interleave")?;
    let n = tape.value(q).rows();
    let w = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    tape.matmul(w, q)
}

fn inference<T>(model: &Model, f: impl FnOnce(&mut Tape, &ParamVars) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    f(&mut tape, &vars)
}

fn threshold_rows(logits: &Tensor, h: usize, w: usize) -> Result<Vec<BoolMatrix>> {
    (0..logits.rows())
        .map(|i| BoolMatrix::new(h, w, logits.row(i).iter().map(|&x| x > 0.0).collect()))
        .collect()
}

/// Per-entity mask logits `[n_ent × (H·W)]`: each entity takes the pixel
/// query of the object query that scores highest against it.
pub fn run_interleave_grounding<S: SceneSource + ?Sized>(
    model: &Model,
    scene: &Scene,
    entry: &InterleaveEntry,
    scenes: &S,
) -> Result<Tensor> {
    inference(model, |tape, vars| {
        let p = forward_interleave_grounding(tape, model, vars, scene, entry, scenes)?;
        let index = unify_match(tape.value(p.query_logits), &[])?;
        let masks = tape.value(p.mask_logits);
        Ok(masks.select_rows(&index))
    })
}

/// Binary masks from [`run_interleave_grounding`].
pub fn ground_masks<S: SceneSource + ?Sized>(
    model: &Model,
    scene: &Scene,
    entry: &InterleaveEntry,
    scenes: &S,
) -> Result<Vec<BoolMatrix>> {
    let logits = run_interleave_grounding(model, scene, entry, scenes)?;
    threshold_rows(&logits, scene.height, scene.width)
}

/// For each entry, every corpus scene not contributing a visual reference
/// to it, with its score, best first.
pub fn run_interleave_retrieval<S: SceneSource + ?Sized>(
    model: &Model,
    corpus: &[Scene],
    entries: &[InterleaveEntry],
    scenes: &S,
) -> Result<Vec<Vec<(u64, f64)>>> {
    inference(model, |tape, vars| {
        let imgs = corpus
            .iter()
            .map(|s| embed_image(tape, model, vars, names::INTERLEAVE_RETRIEVAL, s))
            .collect::<Result<Vec<_>>>()?;
        let imgs = tape.concat_rows(&imgs)?;
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let q = embed_interleave(tape, model, vars, e, scenes)?;
            let s = score(tape, model, vars, q, imgs)?;
            let excluded = e.referenced_scenes();
            let scores = tape.value(s).row(0).to_vec();
            let ranked: Vec<(u64, f64)> = rank_desc(&scores)
                .into_iter()
                .filter(|&j| !excluded.contains(&corpus[j].scene_id))
                .map(|j| (corpus[j].scene_id, scores[j]))
                .collect();
            if ranked.is_empty() {
                return Err(Error::invalid("corpus is empty after exclusion"));
            }
            out.push(ranked);
        }
        Ok(out)
    })
}

/// Caption-to-image and image-to-caption rankings by index.
pub struct TextImageRankings {
    pub text_to_image: Vec<Vec<usize>>,
    pub image_to_text: Vec<Vec<usize>>,
}

pub fn run_image_text_retrieval(
    model: &Model,
    images: &[Scene],
    captions: &[String],
) -> Result<TextImageRankings> {
    inference(model, |tape, vars| {
        let im = images
            .iter()
            .map(|s| embed_image(tape, model, vars, names::IMAGE_TEXT_RETRIEVAL, s))
            .collect::<Result<Vec<_>>>()?;
        let tx = captions
            .iter()
            .map(|c| embed_caption(tape, model, vars, c))
            .collect::<Result<Vec<_>>>()?;
        let im = tape.concat_rows(&im)?;
        let tx = tape.concat_rows(&tx)?;
        let s = score(tape, model, vars, tx, im)?;
        let s = tape.value(s).clone();
        let st = s.transpose();
        Ok(TextImageRankings {
            text_to_image: (0..s.rows()).map(|i| rank_desc(s.row(i))).collect(),
            image_to_text: (0..st.rows()).map(|i| rank_desc(st.row(i))).collect(),
        })
    })
}

/// Panoptic prediction: each cell goes to the query maximizing
/// `p(object) · σ(mask logit)`, and that query's best class names the
/// segment.
pub fn run_generic_segmentation(model: &Model, scene: &Scene) -> Result<Partition> {
    inference(model, |tape, vars| {
        let p = forward_generic(tape, model, vars, scene)?;
        let cls = tape.value(p.class_logits);
        let masks = tape.value(p.mask_logits);
        let n_cls = cls.cols() - 1;
        let mut best_class = Vec::with_capacity(cls.rows());
        let mut p_obj = Vec::with_capacity(cls.rows());
        for i in 0..cls.rows() {
            let row = cls.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let (k, pk) =
                e[..n_cls]
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (k, &v)| if v > b.1 { (k, v) } else { b },
                    );
            best_class.push(k);
            p_obj.push(pk / z);
        }
        let mut owner = Vec::with_capacity(masks.cols());
        for c in 0..masks.cols() {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, p) in p_obj.iter().enumerate() {
                let v = p * sigmoid_f64(masks.at(i, c));
                if v > best.1 {
                    best = (i, v);
                }
            }
            owner.push(best.0);
        }
        let mut used: Vec<usize> = owner.clone();
        used.sort_unstable();
        used.dedup();
        let labels = owner
            .iter()
            .map(|o| used.binary_search(o).expect("owner is used"))
            .collect();
        let categories = used.iter().map(|&q| best_class[q]).collect();
        Ok(Partition { labels, categories })
    })
}

fn referring_mask(tape: &Tape, p: &ReferringPrediction, h: usize, w: usize) -> Result<BoolMatrix> {
    let q = unify_match(tape.value(p.query_logits), &[])?[0];
    let row = tape.value(p.mask_logits).select_rows(&[q]);
    Ok(threshold_rows(&row, h, w)?.remove(0))
}

pub fn run_grounded(model: &Model, scene: &Scene, phrase: &str) -> Result<BoolMatrix> {
    inference(model, |tape, vars| {
        let p = forward_grounded(tape, model, vars, scene, phrase)?;
        referring_mask(tape, &p, scene.height, scene.width)
    })
}

pub fn run_interactive(model: &Model, scene: &Scene, click: (usize, usize)) -> Result<BoolMatrix> {
    if click.0 >= scene.height || click.1 >= scene.width {
        return Err(Error::BadRegion([click.1, click.0, 1, 1]));
    }
    inference(model, |tape, vars| {
        let p = forward_interactive(tape, model, vars, scene, click)?;
        referring_mask(tape, &p, scene.height, scene.width)
    })
}
