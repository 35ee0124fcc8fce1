//! Deterministic synthetic encoders standing in for vision and language
//! backbones, the prompt/query sampler, and precomputed-embedding ingestion.
//!
//! Every cell of a [`Scene`] and every vocabulary token has a fixed base
//! embedding derived from a hash of its label. A learnable residual adapter
//! (`x + x·W + b`) sits on top of each modality; with zero adapter weights
//! the encoders return the raw table rows.

mod interleave;
mod sampler;
mod scene;
mod store;
mod text;

pub use interleave::{InterleaveEntry, InterleaveNode};
pub use sampler::{
    pool_param, sample_prompts, sample_queries, PromptInput, PromptSet, PromptStreamData,
    QueryCounts, QuerySet, QueryStreamData, Sampling,
};
pub use scene::{
    category_names, is_connected, tight_bbox, BBox, Cell, Color, Scene, SceneSource,
    SegmentAnnotation, ShapeKind, NUM_CATEGORIES,
};
pub use store::{read_embedding, write_embedding, EmbeddingStore};
pub use text::{token_id, vocab_size, words, TextSeq, UNK, VOCAB};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BoolMatrix, ParamStore, ParamVars, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Embedding width shared by every modality.
    pub d: usize,
    /// Amplitude of the sinusoidal positional encoding added to text tokens.
    pub position_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            position_scale: 0.15,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Gaussian vector with per-entry variance `1/d`, seeded by `label`.
fn hashed_vector(label: &str, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(label.as_bytes()));
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    (0..d).map(|_| normal.sample(&mut rng)).collect()
}

fn appearance_vector(shape: ShapeKind, color: Color, d: usize) -> Vec<f64> {
    let s = hashed_vector(&format!("shape:{}", shape.name()), d);
    let c = hashed_vector(&format!("color:{}", color.name()), d);
    let u = hashed_vector(&format!("appearance:{}:{}", color.name(), shape.name()), d);
    let v: Vec<f64> = (0..d)
        .map(|i| 0.5 * s[i] + 0.5 * c[i] + 0.7 * u[i])
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Fixed sinusoidal position code, scaled by `scale`.
pub fn positional_encoding(len: usize, d: usize, scale: f64) -> Tensor {
    Tensor::from_fn(&[len, d], |k| {
        let (pos, i) = ((k / d) as f64, k % d);
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos * freq;
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Token rows produced for an interleave entry, with the token range of
/// every node that produced tokens.
#[derive(Clone, Debug)]
pub struct EncodedInterleave {
    pub tokens: Var,
    pub spans: Vec<NodeSpan>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSpan {
    pub node: usize,
    pub range: Range<usize>,
    pub entity: bool,
}

impl EncodedInterleave {
    /// Token ranges of entity nodes, in node order.
    pub fn entity_spans(&self) -> Vec<Range<usize>> {
        self.spans
            .iter()
            .filter(|s| s.entity)
            .map(|s| s.range.clone())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoders {
    cfg: EncoderConfig,
    appearance: Tensor,
    tokens: Tensor,
    store: Option<EmbeddingStore>,
}

impl Encoders {
    pub fn new(cfg: EncoderConfig) -> Self {
        let d = cfg.d;
        let mut rows = Vec::new();
        for shape in ShapeKind::ALL {
            for color in Color::ALL {
                rows.push(appearance_vector(shape, color, d));
            }
        }
        let appearance = Tensor::from_rows(&rows).expect("appearance table");
        let rows: Vec<Vec<f64>> = VOCAB
            .iter()
            .map(|w| hashed_vector(&format!("token:{w}"), d))
            .collect();
        let tokens = Tensor::from_rows(&rows).expect("token table");
        Self {
            cfg,
            appearance,
            tokens,
            store: None,
        }
    }

    /// Uses dumped embeddings from `store` wherever a record exists.
    pub fn with_store(mut self, store: EmbeddingStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    pub fn init_params(&self, params: &mut ParamStore) {
        let d = self.cfg.d;
        for m in ["enc.image", "enc.text"] {
            params.insert(format!("{m}.w"), Tensor::zeros(&[d, d]));
            params.insert(format!("{m}.b"), Tensor::zeros(&[d]));
        }
    }

    pub fn appearance_row(&self, shape: ShapeKind, color: Color) -> &[f64] {
        self.appearance
            .row(shape.index() * Color::ALL.len() + color as usize)
    }

    /// Table rows for every cell, before the adapter.
    pub fn image_base(&self, scene: &Scene) -> Result<Tensor> {
        if let Some(t) = self.store.as_ref().and_then(|s| s.scene(scene.scene_id)) {
            let t = t?;
            if t.shape() != [scene.num_cells(), self.cfg.d] {
                return Err(Error::shape(
                    "precomputed image embedding",
                    t.shape(),
                    &[scene.num_cells(), self.cfg.d],
                ));
            }
            return Ok(t);
        }
        let d = self.cfg.d;
        let mut data = Vec::with_capacity(scene.num_cells() * d);
        for cell in &scene.cells {
            data.extend_from_slice(self.appearance_row(cell.shape, cell.color));
        }
        Tensor::new(vec![scene.num_cells(), d], data)
    }

    /// Table rows plus positional code for each token, before the adapter.
    pub fn text_base(&self, text: &TextSeq) -> Result<Tensor> {
        if text.is_empty() {
            return Err(Error::invalid("cannot encode empty text"));
        }
        if let Some(t) = self.store.as_ref().and_then(|s| s.text(&text.source_text)) {
            let t = t?;
            if t.cols() != self.cfg.d || t.shape().len() != 2 {
                return Err(Error::shape(
                    "precomputed text embedding",
                    t.shape(),
                    &[0, self.cfg.d],
                ));
            }
            return Ok(t);
        }
        let d = self.cfg.d;
        let pe = positional_encoding(text.len(), d, self.cfg.position_scale);
        let mut data = Vec::with_capacity(text.len() * d);
        for (p, &tok) in text.tokens.iter().enumerate() {
            let row = self.tokens.row(tok as usize);
            data.extend(row.iter().zip(pe.row(p)).map(|(a, b)| a + b));
        }
        Tensor::new(vec![text.len(), d], data)
    }

    fn adapt(&self, tape: &mut Tape, base: Tensor, vars: &ParamVars, prefix: &str) -> Result<Var> {
        let x = tape.constant(base);
        let w = vars.get(&format!("{prefix}.w"))?;
        let b = vars.get(&format!("{prefix}.b"))?;
        let xw = tape.matmul(x, w)?;
        let y = tape.add(x, xw)?;
        tape.add_row(y, b)
    }

    /// One embedding per cell, `[(H·W) × d]`.
    pub fn encode_image(&self, tape: &mut Tape, scene: &Scene, vars: &ParamVars) -> Result<Var> {
        let base = self.image_base(scene)?;
        self.adapt(tape, base, vars, "enc.image")
    }

    /// One embedding per token, `[len × d]`.
    pub fn encode_text(&self, tape: &mut Tape, text: &TextSeq, vars: &ParamVars) -> Result<Var> {
        let base = self.text_base(text)?;
        self.adapt(tape, base, vars, "enc.text")
    }

    /// Encodes nodes in order. Text nodes go through [`Self::encode_text`]
    /// with positions restarting at each node; a visual reference becomes a
    /// single token, the mean feature of the referenced segment.
    pub fn encode_interleave<S: SceneSource + ?Sized>(
        &self,
        tape: &mut Tape,
        entry: &InterleaveEntry,
        scenes: &S,
        vars: &ParamVars,
    ) -> Result<EncodedInterleave> {
        entry.check_refs(scenes)?;
        let mut parts = Vec::new();
        let mut spans = Vec::new();
        let mut offset = 0;
        for (i, node) in entry.nodes().iter().enumerate() {
            let part = match node {
                InterleaveNode::TextSpan(text) => {
                    let mut seq = TextSeq::tokenize(text);
                    if seq.is_empty() {
                        seq.tokens.push(UNK);
                    }
                    Some(self.encode_text(tape, &seq, vars)?)
                }
                InterleaveNode::Connection(text) => {
                    let seq = TextSeq::tokenize(text);
                    if seq.is_empty() {
                        None
                    } else {
                        Some(self.encode_text(tape, &seq, vars)?)
                    }
                }
                &InterleaveNode::VisualRef { scene_id, ann_id } => {
                    let scene = scenes
                        .get_scene(scene_id)
                        .ok_or(Error::DanglingReference { scene_id, ann_id })?;
                    let seg = scene
                        .segment_by_ann(ann_id)
                        .ok_or(Error::DanglingReference { scene_id, ann_id })?;
                    let feats = self.encode_image(tape, scene, vars)?;
                    Some(mask_pool(tape, feats, &seg.mask)?)
                }
            };
            if let Some(p) = part {
                let n = tape.value(p).rows();
                spans.push(NodeSpan {
                    node: i,
                    range: offset..offset + n,
                    entity: node.is_entity(),
                });
                offset += n;
                parts.push(p);
            }
        }
        if parts.is_empty() {
            return Err(Error::invalid("interleave entry produced no tokens"));
        }
        let tokens = tape.concat_rows(&parts)?;
        Ok(EncodedInterleave { tokens, spans })
    }
}

fn pool_with_weights(tape: &mut Tape, features: Var, keep: &[bool]) -> Result<Var> {
    let n = tape.value(features).rows();
    if keep.len() != n {
        return Err(Error::shape("pool", tape.shape(features), &[keep.len()]));
    }
    let k = keep.iter().filter(|&&b| b).count();
    if k == 0 {
        return Err(Error::invalid("pooling over an empty region"));
    }
    let w = Tensor::from_fn(&[1, n], |i| if keep[i] { 1.0 / k as f64 } else { 0.0 });
    let w = tape.constant(w);
    tape.matmul(w, features)
}

/// Mean of the cell embeddings inside `bbox` (`[x0, y0, w, h]`) on an
/// `h × w` grid. Returns `[1 × d]`.
pub fn roi_pool(tape: &mut Tape, features: Var, grid: (usize, usize), bbox: BBox) -> Result<Var> {
    let (gh, gw) = grid;
    let [x0, y0, w, h] = bbox;
    if w == 0 || h == 0 || x0 + w > gw || y0 + h > gh {
        return Err(Error::BadRegion(bbox));
    }
    if tape.value(features).rows() != gh * gw {
        return Err(Error::shape("roi_pool", tape.shape(features), &[gh * gw]));
    }
    let keep: Vec<bool> = (0..gh * gw)
        .map(|i| {
            let (r, c) = (i / gw, i % gw);
            r >= y0 && r < y0 + h && c >= x0 && c < x0 + w
        })
        .collect();
    pool_with_weights(tape, features, &keep)
}

/// Mean of the cell embeddings where `mask` is set. Returns `[1 × d]`.
pub fn mask_pool(tape: &mut Tape, features: Var, mask: &BoolMatrix) -> Result<Var> {
    pool_with_weights(tape, features, mask.data())
}
