//! Declarative task descriptions and their text format.
//!
//! ```text
//! # comment
//! task interleave_grounding
//!   prompt p.image image static
//!   prompt p.interleave interleave
//!   query q.entity object objects
//!   query q.interleave interleave entities
//!   content q.entity <- p.image
//!   content q.interleave <- p.interleave
//!   condition q.entity <- p.image
//!   condition q.interleave <- p.interleave
//!   project pixel semantic
//! end
//! ```
//!
//! `prompt NAME KIND [static]`: a `static` prompt stream never updates in
//! condition attention (its self-block stays false).
//! `query NAME KIND ROWS` with ROWS one of `objects | single | entities |
//! classes`. Edges read `TARGET <- SOURCE`: TARGET may attend SOURCE.
//! Condition attention always adds the self-block of every query stream and
//! every non-static prompt stream.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StreamKind {
    Image,
    Text,
    Spatial,
    Interleave,
    Class,
    Caption,
    Object,
}

impl StreamKind {
    pub const ALL: [StreamKind; 7] = [
        StreamKind::Image,
        StreamKind::Text,
        StreamKind::Spatial,
        StreamKind::Interleave,
        StreamKind::Class,
        StreamKind::Caption,
        StreamKind::Object,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Image => "image",
            StreamKind::Text => "text",
            StreamKind::Spatial => "spatial",
            StreamKind::Interleave => "interleave",
            StreamKind::Class => "class",
            StreamKind::Caption => "caption",
            StreamKind::Object => "object",
        }
    }
}

impl FromStr for StreamKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        StreamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown stream kind `{s}`"))
    }
}

/// How many rows a query stream has.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryRows {
    /// `n_obj` rows copied from the object pool.
    Objects,
    Single,
    /// One row per entity of the interleave input.
    Entities,
    /// One row per category.
    Classes,
}

impl QueryRows {
    pub fn name(self) -> &'static str {
        match self {
            QueryRows::Objects => "objects",
            QueryRows::Single => "single",
            QueryRows::Entities => "entities",
            QueryRows::Classes => "classes",
        }
    }
}

impl FromStr for QueryRows {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            QueryRows::Objects,
            QueryRows::Single,
            QueryRows::Entities,
            QueryRows::Classes,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown row count `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    Pixel,
    Semantic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStream {
    pub name: String,
    pub kind: StreamKind,
    pub is_static: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStream {
    pub name: String,
    pub kind: StreamKind,
    pub rows: QueryRows,
}

/// `target` may attend `source`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub target: String,
    pub source: String,
}

impl Edge {
    pub fn new(target: &str, source: &str) -> Self {
        Self {
            target: target.to_string(),
            source: source.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub prompts: Vec<PromptStream>,
    pub queries: Vec<QueryStream>,
    pub content_edges: Vec<Edge>,
    pub condition_edges: Vec<Edge>,
    pub projections: BTreeSet<Projection>,
}

/// Built-in task names.
pub mod names {
    pub const GENERIC_SEGMENTATION: &str = "generic_segmentation";
    pub const GROUNDED_SEGMENTATION: &str = "grounded_segmentation";
    pub const IMAGE_TEXT_RETRIEVAL: &str = "image_text_retrieval";
    pub const INTERACTIVE_SEGMENTATION: &str = "interactive_segmentation";
    pub const INTERLEAVE_GROUNDING: &str = "interleave_grounding";
    pub const INTERLEAVE_RETRIEVAL: &str = "interleave_retrieval";
}

impl TaskSpec {
    /// Stream names in canonical order: prompts first, then queries.
    pub fn stream_order(&self) -> Vec<&str> {
        self.prompts
            .iter()
            .map(|p| p.name.as_str())
            .chain(self.queries.iter().map(|q| q.name.as_str()))
            .collect()
    }

    pub fn prompt(&self, name: &str) -> Option<&PromptStream> {
        self.prompts.iter().find(|p| p.name == name)
    }

    pub fn query(&self, name: &str) -> Option<&QueryStream> {
        self.queries.iter().find(|q| q.name == name)
    }

    pub fn has_pixel(&self) -> bool {
        self.projections.contains(&Projection::Pixel)
    }

    /// Checks names are unique, edges reference declared streams, and
    /// content edges run prompt → query.
    pub fn validate(&self) -> Result<()> {
        let order = self.stream_order();
        let unique: BTreeSet<&str> = order.iter().copied().collect();
        if unique.len() != order.len() {
            return Err(Error::invalid(format!(
                "task `{}` repeats a stream name",
                self.name
            )));
        }
        if self.queries.is_empty() {
            return Err(Error::invalid(format!(
                "task `{}` has no query streams",
                self.name
            )));
        }
        for e in self.content_edges.iter().chain(&self.condition_edges) {
            for s in [&e.target, &e.source] {
                if !unique.contains(s.as_str()) {
                    return Err(Error::UndeclaredStream(s.clone()));
                }
            }
        }
        for e in &self.content_edges {
            if self.query(&e.target).is_none() || self.prompt(&e.source).is_none() {
                return Err(Error::invalid(format!(
                    "content edge {} <- {} must run from a prompt to a query",
                    e.target, e.source
                )));
            }
        }
        if self.projections.is_empty() {
            return Err(Error::invalid(format!(
                "task `{}` has no projection",
                self.name
            )));
        }
        Ok(())
    }

    /// The sub-task holding `queries` and every stream they read from,
    /// directly or through other streams. Its outputs for `queries` equal
    /// the full task's.
    pub fn restrict(&self, queries: &[&str]) -> Result<TaskSpec> {
        let mut keep: BTreeSet<String> = BTreeSet::new();
        for q in queries {
            if self.query(q).is_none() {
                return Err(Error::UnknownStream(q.to_string()));
            }
            keep.insert(q.to_string());
        }
        loop {
            let before = keep.len();
            for e in self.content_edges.iter().chain(&self.condition_edges) {
                if keep.contains(&e.target) {
                    keep.insert(e.source.clone());
                }
            }
            if keep.len() == before {
                break;
            }
        }
        let inside = |e: &&Edge| keep.contains(&e.target) && keep.contains(&e.source);
        Ok(TaskSpec {
            name: self.name.clone(),
            prompts: self
                .prompts
                .iter()
                .filter(|p| keep.contains(&p.name))
                .cloned()
                .collect(),
            queries: self
                .queries
                .iter()
                .filter(|q| keep.contains(&q.name))
                .cloned()
                .collect(),
            content_edges: self.content_edges.iter().filter(inside).cloned().collect(),
            condition_edges: self
                .condition_edges
                .iter()
                .filter(inside)
                .cloned()
                .collect(),
            projections: self.projections.clone(),
        })
    }

    /// Renders the task in the declarative text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "task {}", self.name).unwrap();
        for p in &self.prompts {
            let st = if p.is_static { " static" } else { "" };
            writeln!(s, "  prompt {} {}{st}", p.name, p.kind.name()).unwrap();
        }
        for q in &self.queries {
            writeln!(s, "  query {} {} {}", q.name, q.kind.name(), q.rows.name()).unwrap();
        }
        for e in &self.content_edges {
            writeln!(s, "  content {} <- {}", e.target, e.source).unwrap();
        }
        for e in &self.condition_edges {
            writeln!(s, "  condition {} <- {}", e.target, e.source).unwrap();
        }
        let proj: Vec<&str> = self
            .projections
            .iter()
            .map(|p| match p {
                Projection::Pixel => "pixel",
                Projection::Semantic => "semantic",
            })
            .collect();
        writeln!(s, "  project {}", proj.join(" ")).unwrap();
        s.push_str("end\n");
        s
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Parses one or more task blocks.
pub fn parse_tasks(text: &str) -> Result<Vec<TaskSpec>> {
    let err = |line: usize, message: String| Error::Format {
        path: PathBuf::from("<task spec>"),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut cur: Option<TaskSpec> = None;
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match (toks[0], cur.as_mut()) {
            ("task", None) => {
                let [_, name] = toks[..] else {
                    return Err(err(ln, "expected `task NAME`".into()));
                };
                cur = Some(TaskSpec {
                    name: name.to_string(),
                    prompts: vec![],
                    queries: vec![],
                    content_edges: vec![],
                    condition_edges: vec![],
                    projections: BTreeSet::new(),
                });
            }
            ("task", Some(_)) => return Err(err(ln, "nested `task` (missing `end`)".into())),
            ("end", Some(_)) => {
                let t = cur.take().unwrap();
                t.validate().map_err(|e| err(ln, e.to_string()))?;
                out.push(t);
            }
            (_, None) => return Err(err(ln, format!("`{}` outside a task block", toks[0]))),
            ("prompt", Some(t)) => {
                let (name, kind, is_static) = match toks[..] {
                    [_, n, k] => (n, k, false),
                    [_, n, k, "static"] => (n, k, true),
                    _ => return Err(err(ln, "expected `prompt NAME KIND [static]`".into())),
                };
                t.prompts.push(PromptStream {
                    name: name.to_string(),
                    kind: kind.parse().map_err(|m| err(ln, m))?,
                    is_static,
                });
            }
            ("query", Some(t)) => {
                let [_, name, kind, rows] = toks[..] else {
                    return Err(err(ln, "expected `query NAME KIND ROWS`".into()));
                };
                t.queries.push(QueryStream {
                    name: name.to_string(),
                    kind: kind.parse().map_err(|m| err(ln, m))?,
                    rows: rows.parse().map_err(|m| err(ln, m))?,
                });
            }
            (which @ ("content" | "condition"), Some(t)) => {
                let [_, target, "<-", source] = toks[..] else {
                    return Err(err(ln, format!("expected `{which} TARGET <- SOURCE`")));
                };
                let e = Edge::new(target, source);
                if which == "content" {
                    t.content_edges.push(e);
                } else {
                    t.condition_edges.push(e);
                }
            }
            ("project", Some(t)) => {
                for p in &toks[1..] {
                    let proj = match *p {
                        "pixel" => Projection::Pixel,
                        "semantic" => Projection::Semantic,
                        other => return Err(err(ln, format!("unknown projection `{other}`"))),
                    };
                    t.projections.insert(proj);
                }
            }
            (other, Some(_)) => return Err(err(ln, format!("unknown directive `{other}`"))),
        }
    }
    if cur.is_some() {
        return Err(err(text.lines().count(), "unterminated task block".into()));
    }
    Ok(out)
}

const BUILTIN_TEXT: &str = r#"
task generic_segmentation
  prompt p.image image static
  prompt p.class class
  query q.object object objects
  query q.class class classes
  content q.object <- p.image
  content q.class <- p.class
  project pixel semantic
end

task grounded_segmentation
  prompt p.image image static
  prompt p.text text
  query q.grounding object objects
  query q.text text single
  content q.grounding <- p.image
  content q.text <- p.text
  condition q.grounding <- p.text
  project pixel semantic
end

task image_text_retrieval
  prompt p.image image static
  prompt p.caption caption
  query q.image image single
  query q.caption caption single
  content q.image <- p.image
  content q.caption <- p.caption
  project semantic
end

task interactive_segmentation
  prompt p.image image static
  prompt p.spatial spatial
  query q.segment object objects
  query q.spatial spatial single
  content q.segment <- p.image
  content q.spatial <- p.spatial
  condition q.segment <- p.spatial
  project pixel semantic
end

task interleave_grounding
  prompt p.image image static
  prompt p.interleave interleave
  query q.entity object objects
  query q.interleave interleave entities
  content q.entity <- p.image
  content q.interleave <- p.interleave
  condition q.entity <- p.image
  condition q.interleave <- p.interleave
  project pixel semantic
end

task interleave_retrieval
  prompt p.image image static
  prompt p.interleave interleave
  query q.image image single
  query q._interleave interleave entities
  content q.image <- p.image
  content q._interleave <- p.interleave
  project semantic
end
"#;

/// The six built-in tasks.
pub fn builtin_tasks() -> Vec<TaskSpec> {
    parse_tasks(BUILTIN_TEXT).expect("built-in task table parses")
}

pub fn builtin_task(name: &str) -> Result<TaskSpec> {
    builtin_tasks()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::invalid(format!("no built-in task `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_round_trip_through_text() {
        for t in builtin_tasks() {
            let again = parse_tasks(&t.to_text()).unwrap();
            assert_eq!(again, vec![t]);
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_tasks("task x\n  prompt p.a imagery\nend\n").unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        let err = parse_tasks("task x\n  query q.a object objects\n  content q.a <- p.none\n  project semantic\nend\n")
            .unwrap_err();
        assert!(err.to_string().contains("p.none"), "{err}");
        assert!(parse_tasks("task x\n").is_err());
    }

    #[test]
    fn content_edges_must_target_queries() {
        let text = "task x\n prompt p.a image\n query q.a object single\n content p.a <- p.a\n project semantic\nend\n";
        assert!(parse_tasks(text).is_err());
    }
}
