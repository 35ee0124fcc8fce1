//! Fixtures and check suites shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::ops::Range;

use find_core::bench::{
    generate_corpus, iou, match_segment, metric_ciou, metric_ir_at_k, metric_miou, metric_pq,
    parse_caption, read_dataset, record_from_line, record_to_line, serialize_caption,
    write_dataset, BenchEntity, BenchRecord, Corpus, CorpusConfig, InterleavedCaption, MockClient,
    Partition, SimilarityIndex, VisualRef,
};
use find_core::encoders::{
    sample_queries, EncoderConfig, PromptSet, PromptStreamData, QueryCounts, QuerySet,
};
use find_core::error::{Error, Result};
use find_core::interface::{build_masks, interface_forward, AttentionMask, InterfaceConfig};
use find_core::losses::{
    bce_mask_loss, ce_class_loss, combined_loss, contrastive_loss, dice_loss, hungarian_match,
    GroundTruth, LossWeights, PanopticTarget, TaskOutputs,
};
use find_core::tasks::{
    builtin_tasks, embed_caption, embed_image, embed_interleave, forward_generic, forward_grounded,
    forward_interactive, forward_interleave_grounding, names, segment_masks, stack_masks,
    unify_match, Model, ModelConfig, QueryRows, TaskSpec,
};
use find_core::tensor::{grad_check, BoolMatrix, ParamVars, Tape, Tensor, Var};
use find_core::trainer::task_weights;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

pub fn random_mask(r: &mut impl Rng, rows: usize, cols: usize, p: f64) -> BoolMatrix {
    BoolMatrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| r.gen_bool(p)).collect(),
    )
    .unwrap()
}

/// Two-layer model small enough for exhaustive finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            ..Default::default()
        },
        interface: InterfaceConfig {
            d: 8,
            layers: 2,
            heads: 2,
            n_obj: 3,
            ..Default::default()
        },
    }
}

/// A model whose parameters are all perturbed away from their
/// initialisation, so zero-initialised adapters also carry gradient.
pub fn perturbed_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xabcd);
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    model
}

pub fn small_corpus(model: &Model, scenes: usize, seed: u64) -> Corpus {
    let cfg = CorpusConfig {
        seed,
        scenes,
        height: 4,
        width: 4,
        min_segments: 2,
        max_segments: 3,
        p_replace: 0.5,
        parallelism: 1,
    };
    generate_corpus(&cfg, &MockClient, &model.encoders, &model.params).unwrap()
}

/// Fixed pseudo-random weights so a weighted sum exercises every output
/// element with a distinct coefficient.
fn wsum(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(tape.shape(y), |i| (1.3 * i as f64 + 0.7).sin());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn op(
    name: &'static str,
    x: Tensor,
    f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> (&'static str, Tensor, OpFn) {
    (name, x, Box::new(f))
}

/// Worst relative gradient error of every differentiable operation.
pub fn op_gradient_errors() -> Vec<(String, f64)> {
    let mut r = rng(7);
    let a34 = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b42 = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let c34 = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let pos34 = uniform(&mut r, &[3, 4], 0.5, 2.0);
    let row4 = uniform(&mut r, &[4], -1.0, 1.0);
    let mask = BoolMatrix::from_rows(&[
        vec![true, false, true, true],
        vec![false, false, false, false],
        vec![false, true, false, false],
    ])
    .unwrap();
    let gt = random_mask(&mut r, 3, 4, 0.5);
    let feats = uniform(&mut r, &[12, 3], -1.0, 1.0);
    let pool_mask = random_mask(&mut r, 3, 4, 0.5);
    let pool_mask = if pool_mask.count_true() == 0 {
        BoolMatrix::filled(3, 4, true)
    } else {
        pool_mask
    };

    let (b, c, p, rw, m, g, pm) = (
        b42.clone(),
        c34.clone(),
        pos34.clone(),
        row4.clone(),
        mask,
        gt,
        pool_mask,
    );
    let ops: Vec<(&'static str, Tensor, OpFn)> = vec![
        op("matmul.lhs", a34.clone(), {
            let b = b.clone();
            move |t, x| {
                let k = t.constant(b.clone());
                let y = t.matmul(x, k)?;
                wsum(t, y)
            }
        }),
        op("matmul.rhs", b42.clone(), {
            let a = a34.clone();
            move |t, x| {
                let k = t.constant(a.clone());
                let y = t.matmul(k, x)?;
                wsum(t, y)
            }
        }),
        op("matmul_t.lhs", a34.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.matmul_t(x, k)?;
                wsum(t, y)
            }
        }),
        op("matmul_t.rhs", a34.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.matmul_t(k, x)?;
                wsum(t, y)
            }
        }),
        op(
            "matmul.self",
            uniform(&mut r, &[3, 3], -1.0, 1.0),
            |t, x| {
                let y = t.matmul(x, x)?;
                wsum(t, y)
            },
        ),
        op("transpose", a34.clone(), |t, x| {
            let y = t.transpose(x)?;
            wsum(t, y)
        }),
        op("add", a34.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.add(x, k)?;
                wsum(t, y)
            }
        }),
        op("sub.rhs", a34.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.sub(k, x)?;
                wsum(t, y)
            }
        }),
        op("mul", a34.clone(), |t, x| {
            let y = t.mul(x, x)?;
            wsum(t, y)
        }),
        op("div.num", a34.clone(), {
            let p = p.clone();
            move |t, x| {
                let k = t.constant(p.clone());
                let y = t.div(x, k)?;
                wsum(t, y)
            }
        }),
        op("div.den", pos34.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.div(k, x)?;
                wsum(t, y)
            }
        }),
        op("add_row.matrix", a34.clone(), {
            let rw = rw.clone();
            move |t, x| {
                let k = t.constant(rw.clone());
                let y = t.add_row(x, k)?;
                wsum(t, y)
            }
        }),
        op("add_row.row", row4.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.add_row(k, x)?;
                wsum(t, y)
            }
        }),
        op("scale", a34.clone(), |t, x| {
            let y = t.scale(x, -2.5);
            wsum(t, y)
        }),
        op("add_scalar", a34.clone(), |t, x| {
            let y = t.add_scalar(x, 0.3);
            let y = t.mul(y, y)?;
            wsum(t, y)
        }),
        op("mul_scalar.matrix", a34.clone(), |t, x| {
            let s = t.constant(Tensor::scalar(1.7));
            let y = t.mul_scalar(x, s)?;
            wsum(t, y)
        }),
        op("mul_scalar.scalar", Tensor::scalar(0.8), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.mul_scalar(k, x)?;
                wsum(t, y)
            }
        }),
        op("masked_softmax", a34.clone(), move |t, x| {
            let y = t.masked_softmax(x, &m)?;
            wsum(t, y)
        }),
        op("layer_norm.x", a34.clone(), |t, x| {
            let g = t.constant(Tensor::from_fn(&[4], |i| 0.5 + i as f64 * 0.25));
            let b = t.constant(Tensor::from_fn(&[4], |i| 0.1 * i as f64));
            let y = t.layer_norm(x, g, b)?;
            wsum(t, y)
        }),
        op("layer_norm.gain", row4.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let b = t.constant(Tensor::zeros(&[4]));
                let y = t.layer_norm(k, x, b)?;
                wsum(t, y)
            }
        }),
        op("layer_norm.bias", row4.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let g = t.constant(Tensor::ones(&[4]));
                let y = t.layer_norm(k, g, x)?;
                wsum(t, y)
            }
        }),
        op("gelu", a34.clone(), |t, x| {
            let y = t.gelu(x);
            wsum(t, y)
        }),
        op("sigmoid", a34.clone(), |t, x| {
            let y = t.sigmoid(x);
            wsum(t, y)
        }),
        op("softplus", a34.clone(), |t, x| {
            let y = t.softplus(x);
            wsum(t, y)
        }),
        op("exp", a34.clone(), |t, x| {
            let y = t.exp(x)?;
            wsum(t, y)
        }),
        op("ln", pos34.clone(), |t, x| {
            let y = t.ln(x)?;
            wsum(t, y)
        }),
        op("log_softmax", a34.clone(), |t, x| {
            let y = t.log_softmax(x)?;
            wsum(t, y)
        }),
        op("sum", a34.clone(), |t, x| {
            let y = t.mul(x, x)?;
            Ok(t.sum(y))
        }),
        op("mean", a34.clone(), |t, x| {
            let y = t.mul(x, x)?;
            Ok(t.mean(y))
        }),
        op("sum_rows", a34.clone(), |t, x| {
            let y = t.sum_rows(x);
            let y = t.mul(y, y)?;
            wsum(t, y)
        }),
        op("slice_rows", a34.clone(), |t, x| {
            let y = t.slice_rows(x, 1, 3)?;
            wsum(t, y)
        }),
        op("slice_cols", a34.clone(), |t, x| {
            let y = t.slice_cols(x, 1, 3)?;
            wsum(t, y)
        }),
        op("concat_rows", a34.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.concat_rows(&[x, k, x])?;
                wsum(t, y)
            }
        }),
        op("concat_cols", a34.clone(), {
            let c = c.clone();
            move |t, x| {
                let k = t.constant(c.clone());
                let y = t.concat_cols(&[k, x, x])?;
                wsum(t, y)
            }
        }),
        op("gather_rows", a34.clone(), |t, x| {
            let y = t.gather_rows(x, &[2, 0, 2, 1])?;
            wsum(t, y)
        }),
        op("pick", a34.clone(), |t, x| {
            let y = t.pick(x, &[(0, 1), (2, 3), (0, 1)])?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        }),
        op("normalize_rows", a34.clone(), |t, x| {
            let y = t.normalize_rows(x)?;
            wsum(t, y)
        }),
        op("index_add_rows.base", a34.clone(), |t, x| {
            let u = t.constant(Tensor::from_fn(&[2, 4], |i| i as f64 * 0.1));
            let y = t.index_add_rows(x, u, &[2, 0])?;
            let y = t.mul(y, y)?;
            wsum(t, y)
        }),
        op(
            "index_add_rows.update",
            uniform(&mut r, &[2, 4], -1.0, 1.0),
            {
                let c = c.clone();
                move |t, x| {
                    let k = t.constant(c.clone());
                    let y = t.index_add_rows(k, x, &[2, 0])?;
                    let y = t.mul(y, y)?;
                    wsum(t, y)
                }
            },
        ),
        op("bce_mask_loss", a34.clone(), {
            let g = g.clone();
            move |t, x| bce_mask_loss(t, x, &g)
        }),
        op("dice_loss", a34.clone(), move |t, x| dice_loss(t, x, &g)),
        op("ce_class_loss", a34.clone(), |t, x| {
            ce_class_loss(t, x, &[3, 0, 1])
        }),
        op(
            "contrastive_loss",
            uniform(&mut r, &[3, 3], -2.0, 2.0),
            contrastive_loss,
        ),
        op("roi_pool", feats.clone(), |t, x| {
            let y = find_core::encoders::roi_pool(t, x, (3, 4), [1, 0, 2, 2])?;
            wsum(t, y)
        }),
        op("mask_pool", feats, move |t, x| {
            let y = find_core::encoders::mask_pool(t, x, &pm)?;
            wsum(t, y)
        }),
    ];
    ops.into_iter()
        .map(|(name, x, f)| {
            let e = grad_check(f, &x, GRAD_STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name.to_string(), e)
        })
        .collect()
}

/// Combined loss of one task on a tiny fixed input.
fn task_loss(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    corpus: &Corpus,
    task: &str,
) -> Result<Var> {
    let w = task_weights(&LossWeights::default(), task);
    let scenes = &corpus.scenes;
    let scene = &scenes[0];
    let (out, gt) = match task {
        names::GENERIC_SEGMENTATION => (
            TaskOutputs {
                pano: Some(forward_generic(tape, model, vars, scene)?),
                ..Default::default()
            },
            GroundTruth {
                pano: Some(PanopticTarget {
                    labels: scene.segments.iter().map(|s| s.category).collect(),
                    masks: segment_masks(scene)?,
                }),
                ..Default::default()
            },
        ),
        names::GROUNDED_SEGMENTATION => (
            TaskOutputs {
                grd: Some(forward_grounded(
                    tape,
                    model,
                    vars,
                    scene,
                    &scene.segments[1].phrase,
                )?),
                ..Default::default()
            },
            GroundTruth {
                grd: Some(stack_masks(std::slice::from_ref(&scene.segments[1].mask))?),
                ..Default::default()
            },
        ),
        names::INTERACTIVE_SEGMENTATION => {
            let m = &scene.segments[0].mask;
            let cell = (0..m.rows())
                .flat_map(|r| (0..m.cols()).map(move |c| (r, c)))
                .find(|&(r, c)| m.get(r, c))
                .expect("nonempty segment");
            (
                TaskOutputs {
                    iseg: Some(forward_interactive(tape, model, vars, scene, cell)?),
                    ..Default::default()
                },
                GroundTruth {
                    iseg: Some(stack_masks(std::slice::from_ref(m))?),
                    ..Default::default()
                },
            )
        }
        names::INTERLEAVE_GROUNDING => {
            let rec = corpus
                .records
                .iter()
                .find(|r| r.replaced_count() > 0)
                .unwrap_or(&corpus.records[0]);
            let sc = corpus.scene(rec.scene_id).expect("record scene");
            (
                TaskOutputs {
                    intg: Some(forward_interleave_grounding(
                        tape,
                        model,
                        vars,
                        sc,
                        &rec.to_entry(),
                        scenes,
                    )?),
                    ..Default::default()
                },
                GroundTruth {
                    intg: Some(stack_masks(&rec.gt_masks())?),
                    ..Default::default()
                },
            )
        }
        names::IMAGE_TEXT_RETRIEVAL => {
            let mut im = Vec::new();
            let mut tx = Vec::new();
            for (s, c) in scenes.iter().zip(&corpus.captions).take(2) {
                im.push(embed_image(
                    tape,
                    model,
                    vars,
                    names::IMAGE_TEXT_RETRIEVAL,
                    s,
                )?);
                tx.push(embed_caption(tape, model, vars, c)?);
            }
            let (im, tx) = (tape.concat_rows(&im)?, tape.concat_rows(&tx)?);
            let s =
                find_core::interface::head_score(tape, tx, im, model.config.interface.score, vars)?;
            (
                TaskOutputs {
                    imgtextr: Some(s),
                    ..Default::default()
                },
                GroundTruth::default(),
            )
        }
        names::INTERLEAVE_RETRIEVAL => {
            let mut im = Vec::new();
            let mut en = Vec::new();
            for r in corpus.records.iter().take(2) {
                let sc = corpus.scene(r.scene_id).expect("record scene");
                im.push(embed_image(
                    tape,
                    model,
                    vars,
                    names::INTERLEAVE_RETRIEVAL,
                    sc,
                )?);
                en.push(embed_interleave(tape, model, vars, &r.to_entry(), scenes)?);
            }
            let (im, en) = (tape.concat_rows(&im)?, tape.concat_rows(&en)?);
            let s =
                find_core::interface::head_score(tape, en, im, model.config.interface.score, vars)?;
            (
                TaskOutputs {
                    intr: Some(s),
                    ..Default::default()
                },
                GroundTruth::default(),
            )
        }
        other => return Err(Error::Invalid(format!("unknown task {other}"))),
    };
    Ok(combined_loss(tape, &out, &gt, &w)?.total)
}

pub const TASKS: [&str; 6] = [
    names::GENERIC_SEGMENTATION,
    names::GROUNDED_SEGMENTATION,
    names::IMAGE_TEXT_RETRIEVAL,
    names::INTERACTIVE_SEGMENTATION,
    names::INTERLEAVE_GROUNDING,
    names::INTERLEAVE_RETRIEVAL,
];

/// Worst relative error over every parameter tensor of the tiny two-layer
/// model, per task, for the combined loss.
pub fn model_gradient_errors() -> Vec<(String, f64)> {
    let model = perturbed_model(tiny_config(), 3);
    let corpus = small_corpus(&model, 3, 5);
    let names: Vec<String> = model.params.names().cloned().collect();
    TASKS
        .iter()
        .map(|&task| {
            let mut worst: f64 = 0.0;
            for name in &names {
                let x = model.params.get(name).unwrap().clone();
                let f = |tape: &mut Tape, v: Var| {
                    let vars = model.params.bind_with(tape, name, v)?;
                    task_loss(tape, &model, &vars, &corpus, task)
                };
                // a parameter the task never reads leaves the root untracked
                let e = match grad_check(f, &x, GRAD_STEP) {
                    Err(Error::NotTracked) => continue,
                    r => r.unwrap_or_else(|e| panic!("{task}/{name}: {e}")),
                };
                worst = worst.max(e);
            }
            (format!("model/{task}"), worst)
        })
        .collect()
}

fn random_groups(r: &mut impl Rng, rows: usize, k: usize) -> Vec<Range<usize>> {
    let mut cuts: Vec<usize> = (1..rows).collect();
    cuts.shuffle(r);
    let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for c in cuts.into_iter().chain(std::iter::once(rows)) {
        out.push(at..c);
        at = c;
    }
    out
}

/// Token-level mask expansion written directly from the block semantics:
/// an allowed block is fully open, except that a per-entity or per-class
/// query stream whose row count equals the attended stream's group count
/// sees only its own group.
fn token_mask(
    mask: &AttentionMask,
    rows: &[usize],
    groups: &[Option<Vec<Range<usize>>>],
    per_group: &[bool],
) -> Vec<Vec<Vec<usize>>> {
    let n = rows.len();
    let off: Vec<usize> = rows
        .iter()
        .scan(0, |a, &r| {
            let o = *a;
            *a += r;
            Some(o)
        })
        .collect();
    (0..n)
        .map(|b| {
            (0..rows[b])
                .map(|i| {
                    let mut cols = Vec::new();
                    for c in 0..n {
                        if !mask.blocks.get(b, c) {
                            continue;
                        }
                        let range = match &groups[c] {
                            Some(g) if per_group[b] && g.len() == rows[b] => g[i].clone(),
                            _ => 0..rows[c],
                        };
                        cols.extend(range.map(|j| off[c] + j));
                    }
                    cols
                })
                .collect()
        })
        .collect()
}

/// Outcome of the mask faithfulness check for one task.
pub struct FaithfulnessReport {
    pub task: String,
    pub trials: usize,
    /// Trials where at least one prompt token was unreachable from some
    /// query stream, so the perturbation was not vacuous.
    pub effective: usize,
    pub violations: usize,
}

/// Runs the interface with random prompts, perturbs every prompt token that
/// the masks make unreachable from a query stream, and checks that stream's
/// output is bitwise unchanged.
pub fn mask_faithfulness(task: &TaskSpec, trials: usize, seed: u64) -> FaithfulnessReport {
    let cfg = tiny_config();
    let model = perturbed_model(cfg.clone(), seed);
    let (content, condition) = build_masks(task).unwrap();
    let np = task.prompts.len();
    let mut r = rng(seed);
    let mut report = FaithfulnessReport {
        task: task.name.clone(),
        trials,
        effective: 0,
        violations: 0,
    };
    for _ in 0..trials {
        let k = r.gen_range(1..=3);
        let counts = QueryCounts {
            entities: k,
            classes: k,
        };
        let prompt_rows: Vec<usize> = task
            .prompts
            .iter()
            .map(|_| r.gen_range(k..=k + 3))
            .collect();
        let prompt_groups: Vec<Option<Vec<Range<usize>>>> = prompt_rows
            .iter()
            .map(|&n| r.gen_bool(0.7).then(|| random_groups(&mut r, n, k)))
            .collect();
        let values: Vec<Tensor> = prompt_rows
            .iter()
            .map(|&n| uniform(&mut r, &[n, cfg.interface.d], -1.0, 1.0))
            .collect();

        let run = |values: &[Tensor]| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, false);
            let prompts = PromptSet {
                streams: task
                    .prompts
                    .iter()
                    .zip(values)
                    .zip(&prompt_groups)
                    .map(|((p, v), g)| PromptStreamData {
                        name: p.name.clone(),
                        kind: p.kind,
                        value: tape.constant(v.clone()),
                        groups: g.clone(),
                    })
                    .collect(),
            };
            let queries: QuerySet = sample_queries(&mut tape, &vars, task, counts).unwrap();
            let (_, q) =
                interface_forward(&mut tape, &prompts, &queries, task, &cfg.interface, &vars)
                    .unwrap();
            q.streams
                .iter()
                .map(|s| tape.value(s.value).clone())
                .collect()
        };
        let base = run(&values);

        let mut rows = prompt_rows.clone();
        rows.extend(base.iter().map(Tensor::rows));
        let mut groups = prompt_groups.clone();
        groups.extend(task.queries.iter().map(|_| None));
        let mut per_group = vec![false; np];
        per_group.extend(
            task.queries
                .iter()
                .map(|q| matches!(q.rows, QueryRows::Entities | QueryRows::Classes)),
        );
        let cont = token_mask(&content, &rows, &groups, &per_group);
        let cond = token_mask(&condition, &rows, &groups, &per_group);

        // deps[token] = prompt tokens whose input value can reach it
        let total: usize = rows.iter().sum();
        let n_prompt_tokens: usize = prompt_rows.iter().sum();
        let mut deps: Vec<BTreeSet<usize>> = (0..total)
            .map(|t| {
                if t < n_prompt_tokens {
                    BTreeSet::from([t])
                } else {
                    BTreeSet::new()
                }
            })
            .collect();
        let flat =
            |m: &Vec<Vec<Vec<usize>>>| -> Vec<Vec<usize>> { m.iter().flatten().cloned().collect() };
        let (cont, cond) = (flat(&cont), flat(&cond));
        for _ in 0..cfg.interface.layers {
            let prev = deps.clone();
            for t in n_prompt_tokens..total {
                for &j in &cont[t] {
                    let add = prev[j].clone();
                    deps[t].extend(add);
                }
            }
            let prev = deps.clone();
            for t in 0..total {
                for &j in &cond[t] {
                    let add = prev[j].clone();
                    deps[t].extend(add);
                }
            }
        }

        let mut effective = false;
        let mut at = n_prompt_tokens;
        for (qi, out) in base.iter().enumerate() {
            let reach: BTreeSet<usize> = (at..at + out.rows())
                .flat_map(|t| deps[t].iter().copied())
                .collect();
            at += out.rows();
            let unreachable: Vec<usize> = (0..n_prompt_tokens)
                .filter(|t| !reach.contains(t))
                .collect();
            if unreachable.is_empty() {
                continue;
            }
            effective = true;
            let mut perturbed = values.clone();
            let mut t0 = 0;
            for v in perturbed.iter_mut() {
                let (n, d) = (v.rows(), v.cols());
                for i in 0..n {
                    if unreachable.contains(&(t0 + i)) {
                        for c in 0..d {
                            v.data_mut()[i * d + c] += r.gen_range(-5.0..5.0);
                        }
                    }
                }
                t0 += n;
            }
            let again = run(&perturbed);
            let same = again[qi]
                .data()
                .iter()
                .zip(out.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                report.violations += 1;
            }
        }
        if effective {
            report.effective += 1;
        }
    }
    report
}

pub fn all_tasks() -> Vec<TaskSpec> {
    builtin_tasks()
}

fn naive_argmax(sim: &Tensor, exclusion: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    for i in 0..sim.rows() {
        let allowed: Vec<usize> = (0..sim.cols())
            .filter(|j| !exclusion.contains(&(i, *j)))
            .collect();
        let best = allowed
            .iter()
            .map(|&j| sim.at(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(*allowed.iter().find(|&&j| sim.at(i, j) == best)?);
    }
    Some(out)
}

fn permutations_of(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations_of(n, k - 1) {
        for j in 0..n {
            if !p.contains(&j) {
                let mut q = p.clone();
                q.push(j);
                out.push(q);
            }
        }
    }
    out
}

/// Minimum total cost of an injective assignment, by enumeration.
pub fn brute_force_assignment(cost: &Tensor) -> f64 {
    let (n, m) = (cost.rows(), cost.cols());
    if n <= m {
        permutations_of(m, n)
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(i, &j)| cost.at(i, j))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    } else {
        permutations_of(n, m)
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(j, &i)| cost.at(i, j))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn naive_iou(p: &BoolMatrix, g: &BoolMatrix) -> (f64, f64) {
    let mut i = 0.0;
    let mut u = 0.0;
    for r in 0..p.rows() {
        for c in 0..p.cols() {
            if p.get(r, c) && g.get(r, c) {
                i += 1.0;
            }
            if p.get(r, c) || g.get(r, c) {
                u += 1.0;
            }
        }
    }
    (i, u)
}

fn naive_pq(pred: &Partition, gt: &Partition) -> f64 {
    let seg = |p: &Partition, s: usize| -> Vec<usize> {
        (0..p.labels.len()).filter(|&c| p.labels[c] == s).collect()
    };
    let mut tp = Vec::new();
    let mut pm = vec![false; pred.categories.len()];
    let mut gm = vec![false; gt.categories.len()];
    for (a, &ca) in pred.categories.iter().enumerate() {
        for (b, &cb) in gt.categories.iter().enumerate() {
            if ca != cb {
                continue;
            }
            let (sa, sb) = (seg(pred, a), seg(gt, b));
            let inter = sa.iter().filter(|c| sb.contains(c)).count() as f64;
            let union = (sa.len() + sb.len()) as f64 - inter;
            if union > 0.0 && inter / union > 0.5 {
                tp.push(inter / union);
                pm[a] = true;
                gm[b] = true;
            }
        }
    }
    let fp = (0..pm.len())
        .filter(|&a| !pm[a] && !seg(pred, a).is_empty())
        .count() as f64;
    let fn_ = (0..gm.len())
        .filter(|&b| !gm[b] && !seg(gt, b).is_empty())
        .count() as f64;
    let denom = tp.len() as f64 + 0.5 * (fp + fn_);
    if denom == 0.0 {
        1.0
    } else {
        tp.iter().sum::<f64>() / denom
    }
}

fn random_partition(r: &mut impl Rng, cells: usize, cats: usize) -> Partition {
    let segs = r.gen_range(1..5);
    Partition {
        labels: (0..cells).map(|_| r.gen_range(0..segs)).collect(),
        categories: (0..segs).map(|_| r.gen_range(0..cats)).collect(),
    }
}

/// Disagreements between the library and the naive oracles, per routine.
pub fn oracle_disagreements(instances: usize, seed: u64) -> Vec<(&'static str, usize)> {
    let mut r = rng(seed);
    let mut unify = 0;
    let mut seg = 0;
    let mut hung = 0;
    let mut metrics = 0;
    for _ in 0..instances {
        // unify_match: small integer scores force ties
        let (n, m) = (r.gen_range(1..6), r.gen_range(1..6));
        let sim = Tensor::from_fn(&[n, m], |_| r.gen_range(0..4) as f64);
        let excl: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|_| r.gen_bool(0.3))
            .collect();
        match (unify_match(&sim, &excl), naive_argmax(&sim, &excl)) {
            (Ok(a), Some(b)) if a == b => {}
            (Err(Error::AllExcluded(_)), None) => {}
            _ => unify += 1,
        }

        // match_segment over an index with repeated owners
        let rows = r.gen_range(2..8);
        let owner: Vec<VisualRef> = (0..rows)
            .map(|i| VisualRef {
                scene_id: r.gen_range(0..3),
                ann_id: i as u64,
            })
            .collect();
        let index = SimilarityIndex {
            s: Tensor::from_fn(&[rows, 3], |_| r.gen_range(-2..3) as f64 * 0.5),
            owner: owner.clone(),
        };
        let i = r.gen_range(0..rows);
        let cands: Vec<usize> = (0..rows)
            .filter(|&j| owner[j].scene_id != owner[i].scene_id)
            .collect();
        let dot = |a: usize, b: usize| {
            (0..3)
                .map(|c| index.s.at(a, c) * index.s.at(b, c))
                .sum::<f64>()
        };
        let want = cands
            .iter()
            .map(|&j| dot(i, j))
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            })
            .and_then(|best| cands.iter().copied().find(|&j| dot(i, j) == best));
        match (match_segment(&index, i), want) {
            (Ok(a), Some(b)) if a == b => {}
            (Err(Error::AllExcluded(_)), None) => {}
            _ => seg += 1,
        }

        // hungarian_match against enumeration
        let (n, m) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let cost = Tensor::from_fn(&[n, m], |_| r.gen_range(-1.0..1.0));
        let a = hungarian_match(&cost);
        let cols: BTreeSet<usize> = a.pairs.iter().map(|p| p.1).collect();
        let rows_: BTreeSet<usize> = a.pairs.iter().map(|p| p.0).collect();
        let valid = a.pairs.len() == n.min(m)
            && cols.len() == a.pairs.len()
            && rows_.len() == a.pairs.len();
        if !valid || (a.total_cost(&cost) - brute_force_assignment(&cost)).abs() > ORACLE_TOL {
            hung += 1;
        }

        // metrics
        let k = r.gen_range(1..5);
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let preds: Vec<BoolMatrix> = (0..k).map(|_| random_mask(&mut r, h, w, 0.4)).collect();
        let gts: Vec<BoolMatrix> = (0..k).map(|_| random_mask(&mut r, h, w, 0.4)).collect();
        let pairs: Vec<(f64, f64)> = preds
            .iter()
            .zip(&gts)
            .map(|(p, g)| naive_iou(p, g))
            .collect();
        let (ti, tu) = pairs.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        let ciou = if tu == 0.0 { 1.0 } else { ti / tu };
        let miou = pairs
            .iter()
            .map(|&(i, u)| if u == 0.0 { 1.0 } else { i / u })
            .sum::<f64>()
            / k as f64;
        let single = if pairs[0].1 == 0.0 {
            1.0
        } else {
            pairs[0].0 / pairs[0].1
        };
        let items = r.gen_range(1..8);
        let rankings: Vec<Vec<usize>> = (0..k)
            .map(|_| {
                let mut v: Vec<usize> = (0..items).collect();
                v.shuffle(&mut r);
                v
            })
            .collect();
        let targets: Vec<usize> = (0..k).map(|_| r.gen_range(0..items)).collect();
        let kk = r.gen_range(1..10);
        let ir = rankings
            .iter()
            .zip(&targets)
            .filter(|(rk, t)| rk.iter().take(kk).any(|x| x == *t))
            .count() as f64
            / k as f64;
        let cells = h * w;
        let pa = random_partition(&mut r, cells, 3);
        let pb = if r.gen_bool(0.3) {
            pa.clone()
        } else {
            random_partition(&mut r, cells, 3)
        };
        let checks = [
            (metric_ciou(&preds, &gts).unwrap(), ciou),
            (metric_miou(&preds, &gts).unwrap(), miou),
            (iou(&preds[0], &gts[0]), single),
            (metric_ir_at_k(&rankings, &targets, kk).unwrap(), ir),
            (metric_pq(&pa, &pb).unwrap(), naive_pq(&pa, &pb)),
        ];
        if checks.iter().any(|(a, b)| (a - b).abs() > ORACLE_TOL) {
            metrics += 1;
        }
    }
    vec![
        ("unify_match", unify),
        ("match_segment", seg),
        ("hungarian_match", hung),
        ("metrics", metrics),
    ]
}

const TEXT_CHARS: &[char] = &[
    'a', 'b', 'z', ' ', '.', ',', ']', '<', '>', 'é', '0', '7', '-',
];
const PHRASE_CHARS: &[char] = &['a', 'q', ' ', '[', ']', '<', 'ü', '3', '.'];

fn random_string(r: &mut impl Rng, alphabet: &[char], len: Range<usize>) -> String {
    let n = r.gen_range(len);
    (0..n).map(|_| *alphabet.choose(r).unwrap()).collect()
}

pub fn random_caption(r: &mut impl Rng) -> InterleavedCaption {
    let mut c = InterleavedCaption::new();
    let n = r.gen_range(0..6);
    for _ in 0..n {
        if r.gen_bool(0.6) {
            c.push_text(&random_string(r, TEXT_CHARS, 1..8));
        }
        let id = if r.gen_bool(0.1) {
            u64::MAX
        } else {
            r.gen_range(0..100_000)
        };
        c.push_entity(id, &random_string(r, PHRASE_CHARS, 1..10));
    }
    if r.gen_bool(0.5) {
        c.push_text(&random_string(r, TEXT_CHARS, 1..8));
    }
    c
}

pub fn random_record(r: &mut impl Rng) -> BenchRecord {
    let scene_id = r.gen_range(0..1000);
    let mut caption = InterleavedCaption::new();
    let n = r.gen_range(1..5);
    let mut entities = Vec::new();
    for k in 0..n {
        if r.gen_bool(0.7) {
            caption.push_text(&random_string(r, TEXT_CHARS, 1..6));
        }
        let ann_id = scene_id * 100 + k as u64;
        let phrase = random_string(r, PHRASE_CHARS, 1..8);
        caption.push_entity(ann_id, &phrase);
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        entities.push(BenchEntity {
            ann_id,
            phrase,
            bbox: [r.gen_range(0..w), r.gen_range(0..h), 1, 1],
            mask: random_mask(r, h, w, 0.5),
            category: r.gen_range(0..5),
            visual_ref: r.gen_bool(0.5).then(|| VisualRef {
                scene_id: scene_id + 1 + r.gen_range(0..5),
                ann_id: r.gen_range(0..500),
            }),
        });
    }
    BenchRecord {
        scene_id,
        caption,
        entities,
    }
}

/// Round-trip failures over `n` random captions and `n` random records
/// (the latter both line by line and through a dataset file).
pub fn round_trip_failures(n: usize, seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let mut caption_fail = 0;
    for _ in 0..n {
        let c = random_caption(&mut r);
        let text = serialize_caption(&c).unwrap();
        match parse_caption(&text) {
            Ok(back) if back == c && serialize_caption(&back).unwrap() == text => {}
            _ => caption_fail += 1,
        }
    }
    let mut record_fail = 0;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let rec = random_record(&mut r);
        let line = record_to_line(&rec).unwrap();
        if record_from_line(&line).ok().as_ref() != Some(&rec) {
            record_fail += 1;
        }
        records.push(rec);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    write_dataset(&path, &records).unwrap();
    if read_dataset(&path).ok().as_ref() != Some(&records) {
        record_fail += 1;
    }
    (caption_fail, record_fail)
}

const MUTATION_CHARS: &[char] = &[
    '[', ']', '<', '>', '0', '9', 'x', ' ', '"', '{', '}', ':', ',', '\\',
];

pub fn mutate(r: &mut impl Rng, s: &str) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    for _ in 0..r.gen_range(1..4) {
        let at = r.gen_range(0..=chars.len());
        match r.gen_range(0..3) {
            0 => chars.insert(at, *MUTATION_CHARS.choose(r).unwrap()),
            1 if at < chars.len() => {
                chars.remove(at);
            }
            _ if at < chars.len() => chars[at] = *MUTATION_CHARS.choose(r).unwrap(),
            _ => chars.push(*MUTATION_CHARS.choose(r).unwrap()),
        }
    }
    chars.into_iter().collect()
}

/// Fuzz outcome: (inputs, panics, errors, errors without a valid position).
pub struct FuzzReport {
    pub inputs: usize,
    pub crashes: usize,
    pub errors: usize,
    pub unpositioned: usize,
}

/// Mutated captions and mutated dataset files. Caption errors must point
/// inside the input; dataset errors must name a line of the file.
pub fn fuzz(n: usize, seed: u64) -> FuzzReport {
    let mut r = rng(seed);
    let mut rep = FuzzReport {
        inputs: 0,
        crashes: 0,
        errors: 0,
        unpositioned: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    for i in 0..n {
        rep.inputs += 1;
        if i % 2 == 0 {
            let valid = serialize_caption(&random_caption(&mut r)).unwrap();
            let text = mutate(&mut r, &valid);
            let len = text.chars().count();
            match std::panic::catch_unwind(|| parse_caption(&text)) {
                Err(_) => rep.crashes += 1,
                Ok(Ok(_)) => {}
                Ok(Err(e)) => {
                    rep.errors += 1;
                    if e.position > len {
                        rep.unpositioned += 1;
                    }
                }
            }
        } else {
            let recs: Vec<BenchRecord> = (0..3).map(|_| random_record(&mut r)).collect();
            let lines: Vec<String> = recs.iter().map(|x| record_to_line(x).unwrap()).collect();
            let k = r.gen_range(0..lines.len());
            let mut lines = lines;
            lines[k] = mutate(&mut r, &lines[k]);
            let path = dir.path().join(format!("fuzz{i}.jsonl"));
            std::fs::write(&path, lines.join("\n") + "\n").unwrap();
            match std::panic::catch_unwind(|| read_dataset(&path)) {
                Err(_) => rep.crashes += 1,
                Ok(Ok(_)) => {}
                Ok(Err(e)) => {
                    rep.errors += 1;
                    match e {
                        Error::Format { line, .. } if (1..=lines.len()).contains(&line) => {}
                        _ => rep.unpositioned += 1,
                    }
                }
            }
        }
    }
    rep
}
