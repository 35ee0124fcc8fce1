//! Prompt/query interface: masked attention layers, projections and heads.

mod attention;
mod masks;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    condition_attention, content_attention, ConditionWeights, ContentWeights, HeadWeights, Norm,
};
pub use masks::{build_masks, AttentionMask};

use crate::encoders::{pool_param, PromptSet, QuerySet};
use crate::error::{Error, Result};
use crate::tasks::{Projection, QueryRows, StreamKind, TaskSpec};
use crate::tensor::{init_mlp, mlp_forward, MlpVars, ParamStore, ParamVars, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Cosine similarity times a learned temperature.
    Cosine,
    /// Plain inner product.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterfaceConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_obj: usize,
    pub score: ScoreMode,
    pub init_tau: f64,
}

impl Default for InterfaceConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 3,
            heads: 4,
            n_obj: 16,
            score: ScoreMode::Cosine,
            init_tau: 10.0,
        }
    }
}

fn layer_prefix(l: usize, block: &str) -> String {
    format!("layer{l}.{block}")
}

fn insert_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

fn insert_heads<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
    let std = (1.0 / d as f64).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert_normal(&format!("{prefix}.{w}"), &[d, d], std, rng);
    }
}

/// Registers the query pool, attention layers, projections and head
/// parameters.
pub fn init_interface<R: Rng>(cfg: &InterfaceConfig, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.d;
    let std = (1.0 / d as f64).sqrt();
    for kind in StreamKind::ALL {
        let rows = if kind == StreamKind::Object {
            cfg.n_obj
        } else {
            1
        };
        store.insert_normal(&pool_param(kind), &[rows, d], std, rng);
    }
    for l in 0..cfg.layers {
        let c = layer_prefix(l, "content");
        insert_norm(store, &format!("{c}.ln_q"), d);
        insert_norm(store, &format!("{c}.ln_kv"), d);
        insert_heads(store, &c, d, rng);
        let c = layer_prefix(l, "condition");
        insert_norm(store, &format!("{c}.ln"), d);
        insert_heads(store, &c, d, rng);
    }
    insert_norm(store, "proj.ln", d);
    init_mlp(store, "proj.semantic", d, d, d, rng);
    init_mlp(store, "proj.pixel", d, d, d, rng);
    store.insert("head.log_tau", Tensor::scalar(cfg.init_tau.ln()));
    store.insert("head.no_object", Tensor::zeros(&[1, 1]));
}

/// Runs the layer stack: content attention then condition attention, once
/// per layer.
pub fn interface_forward(
    tape: &mut Tape,
    prompts: &PromptSet,
    queries: &QuerySet,
    task: &TaskSpec,
    cfg: &InterfaceConfig,
    vars: &ParamVars,
) -> Result<(PromptSet, QuerySet)> {
    let (content, condition) = build_masks(task)?;
    let (mut p, mut q) = (prompts.clone(), queries.clone());
    for l in 0..cfg.layers {
        let cw = ContentWeights::bind(vars, &layer_prefix(l, "content"), cfg.heads)?;
        q = content_attention(tape, &p, &q, &content, &cw)?;
        let dw = ConditionWeights::bind(vars, &layer_prefix(l, "condition"), cfg.heads)?;
        (p, q) = condition_attention(tape, &p, &q, &condition, &dw)?;
    }
    Ok((p, q))
}

/// Query outputs after projection, per stream.
#[derive(Clone, Debug)]
pub struct ProjectedQueries {
    pub semantic: Vec<(String, Var)>,
    pub pixel: Vec<(String, Var)>,
}

impl ProjectedQueries {
    pub fn semantic(&self, stream: &str) -> Result<Var> {
        self.semantic
            .iter()
            .find(|(n, _)| n == stream)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownStream(stream.to_string()))
    }

    /// Fails when the task has no pixel projection or the stream is not an
    /// object stream.
    pub fn pixel(&self, stream: &str) -> Result<Var> {
        if self.pixel.is_empty() {
            return Err(Error::MissingOutput("pixel projection"));
        }
        self.pixel
            .iter()
            .find(|(n, _)| n == stream)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownStream(stream.to_string()))
    }
}

fn project_rows(
    tape: &mut Tape,
    parts: &[(String, Var)],
    mlp: &MlpVars,
    ln: &Norm,
) -> Result<Vec<(String, Var)>> {
    if parts.is_empty() {
        return Ok(Vec::new());
    }
    let vals: Vec<Var> = parts.iter().map(|(_, v)| *v).collect();
    let x = tape.concat_rows(&vals)?;
    let x = ln.apply(tape, x)?;
    let y = mlp_forward(tape, x, mlp)?;
    if parts.len() == 1 {
        return Ok(vec![(parts[0].0.clone(), y)]);
    }
    let mut out = Vec::with_capacity(parts.len());
    let mut at = 0;
    for (name, v) in parts {
        let n = tape.value(*v).rows();
        out.push((name.clone(), tape.slice_rows(y, at, at + n)?));
        at += n;
    }
    Ok(out)
}

/// Semantic projection of every query stream, plus pixel projection of
/// object streams when the task declares it.
pub fn project(
    tape: &mut Tape,
    queries: &QuerySet,
    task: &TaskSpec,
    vars: &ParamVars,
) -> Result<ProjectedQueries> {
    let ln = Norm::bind(vars, "proj.ln")?;
    let all: Vec<(String, Var)> = queries
        .streams
        .iter()
        .map(|s| (s.name.clone(), s.value))
        .collect();
    let semantic = if task.projections.contains(&Projection::Semantic) {
        project_rows(tape, &all, &MlpVars::bind(vars, "proj.semantic")?, &ln)?
    } else {
        Vec::new()
    };
    let pixel = if task.projections.contains(&Projection::Pixel) {
        let objects: Vec<(String, Var)> = queries
            .streams
            .iter()
            .filter(|s| s.rows == QueryRows::Objects)
            .map(|s| (s.name.clone(), s.value))
            .collect();
        project_rows(tape, &objects, &MlpVars::bind(vars, "proj.pixel")?, &ln)?
    } else {
        Vec::new()
    };
    Ok(ProjectedQueries { semantic, pixel })
}

/// Mask logits `Q_p · Fᵀ`, one row per query and one column per image token.
pub fn head_mask(tape: &mut Tape, pixel: Var, image: Var) -> Result<Var> {
    tape.matmul_t(pixel, image)
}

/// `τ = exp(head.log_tau)`.
pub fn temperature(tape: &mut Tape, vars: &ParamVars) -> Result<Var> {
    let log_tau = vars.get("head.log_tau")?;
    tape.exp(log_tau)
}

/// Similarity of every row of `a` with every row of `b`.
pub fn head_score(
    tape: &mut Tape,
    a: Var,
    b: Var,
    mode: ScoreMode,
    vars: &ParamVars,
) -> Result<Var> {
    match mode {
        ScoreMode::Raw => tape.matmul_t(a, b),
        ScoreMode::Cosine => {
            let an = tape.normalize_rows(a)?;
            let bn = tape.normalize_rows(b)?;
            let s = tape.matmul_t(an, bn)?;
            let tau = temperature(tape, vars)?;
            tape.mul_scalar(s, tau)
        }
    }
}
