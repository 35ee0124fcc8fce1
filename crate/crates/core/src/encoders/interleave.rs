use serde::{Deserialize, Serialize};

use super::scene::SceneSource;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterleaveNode {
    /// Textual entity, e.g. "the red square".
    TextSpan(String),
    /// A segment of some scene standing in for an entity.
    VisualRef { scene_id: u64, ann_id: u64 },
    /// Connective text between entities. Not an entity.
    Connection(String),
}

impl InterleaveNode {
    pub fn is_entity(&self) -> bool {
        !matches!(self, InterleaveNode::Connection(_))
    }
}

/// Ordered mix of text entities, visual references and connective text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleaveEntry {
    nodes: Vec<InterleaveNode>,
    entity_count: usize,
}

impl InterleaveEntry {
    pub fn new(nodes: Vec<InterleaveNode>) -> Self {
        let entity_count = nodes.iter().filter(|n| n.is_entity()).count();
        Self {
            nodes,
            entity_count,
        }
    }

    pub fn nodes(&self) -> &[InterleaveNode] {
        &self.nodes
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    /// Scenes that contribute a visual reference, in first-seen order.
    pub fn referenced_scenes(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let InterleaveNode::VisualRef { scene_id, .. } = n {
                if !out.contains(scene_id) {
                    out.push(*scene_id);
                }
            }
        }
        out
    }

    /// Fails on the first visual reference that does not resolve.
    pub fn check_refs<S: SceneSource + ?Sized>(&self, scenes: &S) -> Result<()> {
        for n in &self.nodes {
            if let &InterleaveNode::VisualRef { scene_id, ann_id } = n {
                let ok = scenes
                    .get_scene(scene_id)
                    .is_some_and(|s| s.segment_by_ann(ann_id).is_some());
                if !ok {
                    return Err(Error::DanglingReference { scene_id, ann_id });
                }
            }
        }
        Ok(())
    }
}
