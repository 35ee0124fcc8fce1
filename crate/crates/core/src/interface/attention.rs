use super::masks::{expand, prompt_extents, query_extents, AttentionMask};
use crate::encoders::{PromptSet, QuerySet};
use crate::error::{Error, Result};
use crate::tensor::{BoolMatrix, ParamVars, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl HeadWeights {
    fn bind(vars: &ParamVars, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: vars.get(&format!("{prefix}.wq"))?,
            wk: vars.get(&format!("{prefix}.wk"))?,
            wv: vars.get(&format!("{prefix}.wv"))?,
            wo: vars.get(&format!("{prefix}.wo"))?,
            heads,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub bias: Var,
}

impl Norm {
    pub(crate) fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: vars.get(&format!("{prefix}.g"))?,
            bias: vars.get(&format!("{prefix}.b"))?,
        })
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

/// Weights of one content-attention block: queries read prompts.
#[derive(Clone, Copy, Debug)]
pub struct ContentWeights {
    pub ln_q: Norm,
    pub ln_kv: Norm,
    pub attn: HeadWeights,
}

impl ContentWeights {
    pub fn bind(vars: &ParamVars, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q: Norm::bind(vars, &format!("{prefix}.ln_q"))?,
            ln_kv: Norm::bind(vars, &format!("{prefix}.ln_kv"))?,
            attn: HeadWeights::bind(vars, prefix, heads)?,
        })
    }
}

/// Weights of one condition-attention block over all tokens.
#[derive(Clone, Copy, Debug)]
pub struct ConditionWeights {
    pub ln: Norm,
    pub attn: HeadWeights,
}

impl ConditionWeights {
    pub fn bind(vars: &ParamVars, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln: Norm::bind(vars, &format!("{prefix}.ln"))?,
            attn: HeadWeights::bind(vars, prefix, heads)?,
        })
    }
}

fn multi_head(
    tape: &mut Tape,
    hq: Var,
    hkv: Var,
    mask: &BoolMatrix,
    w: &HeadWeights,
) -> Result<Var> {
    let q = tape.matmul(hq, w.wq)?;
    let k = tape.matmul(hkv, w.wk)?;
    let v = tape.matmul(hkv, w.wv)?;
    let d = tape.value(q).cols();
    if w.heads == 0 || !d.is_multiple_of(w.heads) {
        return Err(Error::invalid(format!(
            "width {d} is not divisible into {} heads",
            w.heads
        )));
    }
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if w.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, a, b)?,
                tape.slice_cols(k, a, b)?,
                tape.slice_cols(v, a, b)?,
            )
        };
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.masked_softmax(logits, mask)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let o = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(o, w.wo)
}

/// Rows with at least one allowed entry, and the columns any of them uses.
fn active(mask: &BoolMatrix) -> (Vec<usize>, Vec<usize>) {
    let rows: Vec<usize> = (0..mask.rows()).filter(|&r| mask.row_any(r)).collect();
    let cols: Vec<usize> = (0..mask.cols())
        .filter(|&c| rows.iter().any(|&r| mask.get(r, c)))
        .collect();
    (rows, cols)
}

fn gather(tape: &mut Tape, x: Var, idx: &[usize]) -> Result<Var> {
    if idx.len() == tape.value(x).rows() && idx.iter().enumerate().all(|(i, &j)| i == j) {
        Ok(x)
    } else {
        tape.gather_rows(x, idx)
    }
}

fn check_order(mask: &AttentionMask, prompts: &PromptSet, queries: &QuerySet) -> Result<()> {
    let names = prompts
        .streams
        .iter()
        .map(|s| &s.name)
        .chain(queries.streams.iter().map(|s| &s.name));
    if mask.n_prompts != prompts.streams.len() || !names.eq(mask.order.iter()) {
        return Err(Error::invalid(
            "streams do not match the mask's stream order",
        ));
    }
    Ok(())
}

fn split(tape: &mut Tape, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
    if sizes.len() == 1 {
        return Ok(vec![x]);
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        out.push(tape.slice_rows(x, at, at + n)?);
        at += n;
    }
    Ok(out)
}

fn stack(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    tape.concat_rows(parts)
}

/// One content-attention step. Each query token attends the prompt tokens
/// its mask allows and receives the attended value as a residual update.
/// Query tokens with nothing to attend pass through unchanged, and prompts
/// are never written.
pub fn content_attention(
    tape: &mut Tape,
    prompts: &PromptSet,
    queries: &QuerySet,
    mask: &AttentionMask,
    w: &ContentWeights,
) -> Result<QuerySet> {
    check_order(mask, prompts, queries)?;
    let mut extents = prompt_extents(tape, prompts);
    extents.extend(query_extents(tape, queries));
    let n_blocks = extents.len();
    let tokens = expand(mask, &extents, mask.n_prompts..n_blocks, 0..mask.n_prompts);
    let (rows, cols) = active(&tokens);
    if rows.is_empty() {
        return Ok(queries.clone());
    }
    let qv: Vec<Var> = queries.streams.iter().map(|s| s.value).collect();
    let pv: Vec<Var> = prompts.streams.iter().map(|s| s.value).collect();
    let xq = stack(tape, &qv)?;
    let xp = stack(tape, &pv)?;
    let hq = gather(tape, xq, &rows)?;
    let hq = w.ln_q.apply(tape, hq)?;
    let hkv = gather(tape, xp, &cols)?;
    let hkv = w.ln_kv.apply(tape, hkv)?;
    let sub = tokens.select_rows(&rows).select_cols(&cols);
    let update = multi_head(tape, hq, hkv, &sub, &w.attn)?;
    let xq = tape.index_add_rows(xq, update, &rows)?;
    let sizes: Vec<usize> = extents[mask.n_prompts..].iter().map(|e| e.rows).collect();
    let parts = split(tape, xq, &sizes)?;
    let mut out = queries.clone();
    for (s, v) in out.streams.iter_mut().zip(parts) {
        s.value = v;
    }
    Ok(out)
}

/// One condition-attention step over the concatenation of all prompt and
/// query tokens, with a residual update on every token that attends.
pub fn condition_attention(
    tape: &mut Tape,
    prompts: &PromptSet,
    queries: &QuerySet,
    mask: &AttentionMask,
    w: &ConditionWeights,
) -> Result<(PromptSet, QuerySet)> {
    check_order(mask, prompts, queries)?;
    let mut extents = prompt_extents(tape, prompts);
    extents.extend(query_extents(tape, queries));
    let n_blocks = extents.len();
    let tokens = expand(mask, &extents, 0..n_blocks, 0..n_blocks);
    let (rows, cols) = active(&tokens);
    if rows.is_empty() {
        return Ok((prompts.clone(), queries.clone()));
    }
    let all: Vec<Var> = prompts
        .streams
        .iter()
        .map(|s| s.value)
        .chain(queries.streams.iter().map(|s| s.value))
        .collect();
    let x = stack(tape, &all)?;
    let hq = gather(tape, x, &rows)?;
    let hq = w.ln.apply(tape, hq)?;
    let hkv = gather(tape, x, &cols)?;
    let hkv = w.ln.apply(tape, hkv)?;
    let sub = tokens.select_rows(&rows).select_cols(&cols);
    let update = multi_head(tape, hq, hkv, &sub, &w.attn)?;
    let x = tape.index_add_rows(x, update, &rows)?;
    let sizes: Vec<usize> = extents.iter().map(|e| e.rows).collect();
    let parts = split(tape, x, &sizes)?;
    let (mut p, mut q) = (prompts.clone(), queries.clone());
    let slots = p
        .streams
        .iter_mut()
        .map(|s| &mut s.value)
        .chain(q.streams.iter_mut().map(|s| &mut s.value));
    for (slot, v) in slots.zip(parts) {
        *slot = v;
    }
    Ok((p, q))
}
