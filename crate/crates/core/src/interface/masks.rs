use std::ops::Range;

use crate::encoders::{PromptSet, QuerySet};
use crate::error::{Error, Result};
use crate::tasks::{QueryRows, TaskSpec};
use crate::tensor::BoolMatrix;

/// Block-level attention mask over a task's streams.
///
/// `blocks[r][c]` is true iff stream `r` may attend stream `c`. Streams are
/// ordered prompts first, then queries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub order: Vec<String>,
    pub n_prompts: usize,
    pub blocks: BoolMatrix,
}

impl AttentionMask {
    fn empty(task: &TaskSpec) -> Self {
        let order: Vec<String> = task.stream_order().into_iter().map(String::from).collect();
        let n = order.len();
        Self {
            order,
            n_prompts: task.prompts.len(),
            blocks: BoolMatrix::filled(n, n, false),
        }
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.order
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UndeclaredStream(name.to_string()))
    }

    pub fn allows(&self, target: &str, source: &str) -> Result<bool> {
        Ok(self.blocks.get(self.index(target)?, self.index(source)?))
    }

    pub fn to_vecs(&self) -> Vec<Vec<bool>> {
        self.blocks.to_vecs()
    }

    fn set(&mut self, target: &str, source: &str) -> Result<()> {
        let (r, c) = (self.index(target)?, self.index(source)?);
        self.blocks.set(r, c, true);
        Ok(())
    }
}

/// Content and condition masks for a task.
///
/// The content mask is true exactly at the declared content edges. The
/// condition mask holds the self-block of every query stream and every
/// non-static prompt stream, plus the declared condition edges.
pub fn build_masks(task: &TaskSpec) -> Result<(AttentionMask, AttentionMask)> {
    let mut content = AttentionMask::empty(task);
    for e in &task.content_edges {
        if task.query(&e.target).is_none() {
            content.index(&e.target)?;
            return Err(Error::invalid(format!(
                "content edge target `{}` is not a query stream",
                e.target
            )));
        }
        content.set(&e.target, &e.source)?;
    }
    let mut condition = AttentionMask::empty(task);
    for p in task.prompts.iter().filter(|p| !p.is_static) {
        condition.set(&p.name, &p.name)?;
    }
    for q in &task.queries {
        condition.set(&q.name, &q.name)?;
    }
    for e in &task.condition_edges {
        condition.set(&e.target, &e.source)?;
    }
    Ok((content, condition))
}

/// Token extent of one stream as seen by the mask expander.
#[derive(Clone, Debug)]
pub(crate) struct StreamExtent {
    pub rows: usize,
    pub groups: Option<Vec<Range<usize>>>,
    pub per_group: bool,
}

pub(crate) fn prompt_extents(tape: &crate::tensor::Tape, p: &PromptSet) -> Vec<StreamExtent> {
    p.streams
        .iter()
        .map(|s| StreamExtent {
            rows: tape.value(s.value).rows(),
            groups: s.groups.clone(),
            per_group: false,
        })
        .collect()
}

pub(crate) fn query_extents(tape: &crate::tensor::Tape, q: &QuerySet) -> Vec<StreamExtent> {
    q.streams
        .iter()
        .map(|s| StreamExtent {
            rows: tape.value(s.value).rows(),
            groups: None,
            per_group: matches!(s.rows, QueryRows::Entities | QueryRows::Classes),
        })
        .collect()
}

/// Expands a block mask to tokens. `rows` and `cols` index into the block
/// order. Inside an allowed block, a per-entity or per-class query stream
/// whose row count equals the number of groups of the attended stream is
/// restricted to its own group; every other allowed block is fully open.
pub(crate) fn expand(
    mask: &AttentionMask,
    extents: &[StreamExtent],
    row_blocks: Range<usize>,
    col_blocks: Range<usize>,
) -> BoolMatrix {
    let offsets = |r: &Range<usize>| {
        let mut off = Vec::new();
        let mut acc = 0;
        for b in r.clone() {
            off.push(acc);
            acc += extents[b].rows;
        }
        (off, acc)
    };
    let (row_off, n_rows) = offsets(&row_blocks);
    let (col_off, n_cols) = offsets(&col_blocks);
    let mut out = BoolMatrix::filled(n_rows, n_cols, false);
    for (ri, rb) in row_blocks.clone().enumerate() {
        for (ci, cb) in col_blocks.clone().enumerate() {
            if !mask.blocks.get(rb, cb) {
                continue;
            }
            let (re, ce) = (&extents[rb], &extents[cb]);
            let aligned = match &ce.groups {
                Some(g) if re.per_group && g.len() == re.rows => Some(g),
                _ => None,
            };
            for i in 0..re.rows {
                let cols = match aligned {
                    Some(g) => g[i].clone(),
                    None => 0..ce.rows,
                };
                for j in cols {
                    out.set(row_off[ri] + i, col_off[ci] + j, true);
                }
            }
        }
    }
    out
}
