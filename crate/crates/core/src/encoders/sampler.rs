use std::ops::Range;

use super::scene::BBox;
use crate::error::{Error, Result};
use crate::tasks::{QueryRows, StreamKind, TaskSpec};
use crate::tensor::{BoolMatrix, ParamVars, Tape, Tensor, Var};

/// Per-stream sampling strategy. Every strategy selects or averages input
/// rows; none introduces learned values.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampling {
    Identity,
    /// Rows `0, stride, 2·stride, …`.
    Downsample {
        stride: usize,
    },
    /// Mean over a box on an `(h, w)` grid; one output row.
    Roi {
        grid: (usize, usize),
        bbox: BBox,
    },
    /// Mean over the set cells of a mask; one output row.
    MaskPool(BoolMatrix),
    /// One output row per range, the mean of the rows in it.
    GroupMean(Vec<Range<usize>>),
    /// Reorders rows.
    Rearrange(Vec<usize>),
}

pub struct PromptInput {
    pub stream: String,
    pub source: Var,
    pub sampling: Sampling,
    /// Row groups of the sampled output, e.g. the token span of each
    /// entity. A query stream with one row per group attends only its own
    /// group.
    pub groups: Option<Vec<Range<usize>>>,
}

impl PromptInput {
    pub fn new(stream: &str, source: Var, sampling: Sampling) -> Self {
        Self {
            stream: stream.to_string(),
            source,
            sampling,
            groups: None,
        }
    }

    pub fn with_groups(mut self, groups: Vec<Range<usize>>) -> Self {
        self.groups = Some(groups);
        self
    }
}

#[derive(Clone, Debug)]
pub struct PromptStreamData {
    pub name: String,
    pub kind: StreamKind,
    pub value: Var,
    pub groups: Option<Vec<Range<usize>>>,
}

/// Prompt streams in the task's canonical order.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub streams: Vec<PromptStreamData>,
}

impl PromptSet {
    pub fn get(&self, name: &str) -> Option<&PromptStreamData> {
        self.streams.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug)]
pub struct QueryStreamData {
    pub name: String,
    pub kind: StreamKind,
    pub rows: QueryRows,
    pub value: Var,
}

/// Query streams in the task's canonical order.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub streams: Vec<QueryStreamData>,
}

impl QuerySet {
    pub fn get(&self, name: &str) -> Option<&QueryStreamData> {
        self.streams.iter().find(|s| s.name == name)
    }
}

fn mean_rows(tape: &mut Tape, x: Var, keep: impl Fn(usize) -> bool) -> Result<Var> {
    let n = tape.value(x).rows();
    let k = (0..n).filter(|&i| keep(i)).count();
    if k == 0 {
        return Err(Error::invalid("sampling an empty region"));
    }
    let w = Tensor::from_fn(&[1, n], |i| if keep(i) { 1.0 / k as f64 } else { 0.0 });
    let w = tape.constant(w);
    tape.matmul(w, x)
}

fn apply(tape: &mut Tape, source: Var, sampling: &Sampling) -> Result<Var> {
    let n = tape.value(source).rows();
    match sampling {
        Sampling::Identity => Ok(source),
        Sampling::Downsample { stride } => {
            if *stride == 0 {
                return Err(Error::invalid("downsample stride must be positive"));
            }
            let idx: Vec<usize> = (0..n).step_by(*stride).collect();
            tape.gather_rows(source, &idx)
        }
        Sampling::Roi { grid, bbox } => super::roi_pool(tape, source, *grid, *bbox),
        Sampling::MaskPool(mask) => {
            if mask.rows() * mask.cols() != n {
                return Err(Error::shape("mask pool", tape.shape(source), &mask.shape()));
            }
            mean_rows(tape, source, |i| mask.data()[i])
        }
        Sampling::GroupMean(groups) => {
            let mut rows = Vec::with_capacity(groups.len());
            for g in groups {
                if g.start >= g.end || g.end > n {
                    return Err(Error::invalid(format!("group {g:?} out of {n} rows")));
                }
                let g = g.clone();
                rows.push(mean_rows(tape, source, move |i| g.contains(&i))?);
            }
            tape.concat_rows(&rows)
        }
        Sampling::Rearrange(order) => tape.gather_rows(source, order),
    }
}

/// Applies each input's strategy and orders the result by the task's prompt
/// declaration.
pub fn sample_prompts(
    tape: &mut Tape,
    inputs: Vec<PromptInput>,
    task: &TaskSpec,
) -> Result<PromptSet> {
    for inp in &inputs {
        if task.prompt(&inp.stream).is_none() {
            return Err(Error::UnknownStream(inp.stream.clone()));
        }
    }
    let mut streams = Vec::with_capacity(task.prompts.len());
    for p in &task.prompts {
        let inp = inputs
            .iter()
            .find(|i| i.stream == p.name)
            .ok_or_else(|| Error::UnknownStream(p.name.clone()))?;
        let value = apply(tape, inp.source, &inp.sampling)?;
        let groups = match (&inp.groups, &inp.sampling) {
            (Some(g), _) => Some(g.clone()),
            (None, Sampling::GroupMean(g)) => Some((0..g.len()).map(|i| i..i + 1).collect()),
            _ => None,
        };
        if let Some(g) = &groups {
            let rows = tape.value(value).rows();
            if g.iter().any(|r| r.start >= r.end || r.end > rows) {
                return Err(Error::invalid(format!(
                    "groups of `{}` exceed its {rows} rows",
                    p.name
                )));
            }
        }
        streams.push(PromptStreamData {
            name: p.name.clone(),
            kind: p.kind,
            value,
            groups,
        });
    }
    Ok(PromptSet { streams })
}

/// Per-input row counts for query streams that depend on the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryCounts {
    pub entities: usize,
    pub classes: usize,
}

/// Name of the learnable pool tensor for a query kind.
pub fn pool_param(kind: StreamKind) -> String {
    format!("queries.{}", kind.name())
}

/// Draws query streams from the learnable pool. Object streams take all
/// `n_obj` pool rows; other kinds repeat their single pool row as often as
/// the stream needs. Several streams may draw the same pool rows.
pub fn sample_queries(
    tape: &mut Tape,
    vars: &ParamVars,
    task: &TaskSpec,
    counts: QueryCounts,
) -> Result<QuerySet> {
    let mut streams = Vec::with_capacity(task.queries.len());
    for q in &task.queries {
        let pool = vars
            .get(&pool_param(q.kind))
            .map_err(|_| Error::invalid(format!("query pool has no `{}` kind", q.kind.name())))?;
        let pool_rows = tape.value(pool).rows();
        let value = match q.rows {
            QueryRows::Objects => pool,
            QueryRows::Single => {
                if pool_rows == 1 {
                    pool
                } else {
                    tape.gather_rows(pool, &[0])?
                }
            }
            QueryRows::Entities | QueryRows::Classes => {
                let n = if q.rows == QueryRows::Entities {
                    counts.entities
                } else {
                    counts.classes
                };
                if n == 0 {
                    return Err(Error::invalid(format!(
                        "query stream `{}` needs at least one row",
                        q.name
                    )));
                }
                tape.gather_rows(pool, &vec![0; n])?
            }
        };
        streams.push(QueryStreamData {
            name: q.name.clone(),
            kind: q.kind,
            rows: q.rows,
            value,
        });
    }
    Ok(QuerySet { streams })
}
