use serde::{Deserialize, Serialize};

use super::caption::{CaptionPart, InterleavedCaption};
use crate::encoders::{BBox, InterleaveEntry, InterleaveNode, Scene};
use crate::error::{Error, Result};
use crate::tensor::BoolMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisualRef {
    pub scene_id: u64,
    pub ann_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntity {
    pub ann_id: u64,
    pub phrase: String,
    pub bbox: BBox,
    pub mask: BoolMatrix,
    pub category: usize,
    pub visual_ref: Option<VisualRef>,
}

/// One annotated caption of one scene. Entities follow caption order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub scene_id: u64,
    pub caption: InterleavedCaption,
    pub entities: Vec<BenchEntity>,
}

impl BenchRecord {
    /// Attaches each caption entity to its segment of `scene`.
    pub fn from_caption(scene: &Scene, caption: InterleavedCaption) -> Result<Self> {
        let mut entities = Vec::new();
        for e in caption.entities() {
            let seg = scene
                .segment_by_ann(e.ann_id)
                .ok_or(Error::DanglingReference {
                    scene_id: scene.scene_id,
                    ann_id: e.ann_id,
                })?;
            entities.push(BenchEntity {
                ann_id: e.ann_id,
                phrase: e.phrase,
                bbox: seg.bbox,
                mask: seg.mask.clone(),
                category: seg.category,
                visual_ref: None,
            });
        }
        let r = Self {
            scene_id: scene.scene_id,
            caption,
            entities,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() {
            return Err(Error::invalid(format!(
                "record for scene {} has no entities",
                self.scene_id
            )));
        }
        let cap = self.caption.entities();
        if cap.len() != self.entities.len()
            || cap
                .iter()
                .zip(&self.entities)
                .any(|(c, e)| c.ann_id != e.ann_id)
        {
            return Err(Error::invalid(format!(
                "record for scene {}: entities disagree with caption",
                self.scene_id
            )));
        }
        for e in &self.entities {
            if e.visual_ref
                == Some(VisualRef {
                    scene_id: self.scene_id,
                    ann_id: e.ann_id,
                })
            {
                return Err(Error::invalid(format!(
                    "entity {} references itself",
                    e.ann_id
                )));
            }
        }
        Ok(())
    }

    /// Interleave entry of the caption: replaced entities become visual
    /// references, the rest stay text.
    pub fn to_entry(&self) -> InterleaveEntry {
        let mut k = 0;
        let nodes = self
            .caption
            .parts()
            .iter()
            .map(|p| match p {
                CaptionPart::Text(t) => InterleaveNode::Connection(t.clone()),
                CaptionPart::Entity { phrase, .. } => {
                    let e = &self.entities[k];
                    k += 1;
                    match e.visual_ref {
                        Some(v) => InterleaveNode::VisualRef {
                            scene_id: v.scene_id,
                            ann_id: v.ann_id,
                        },
                        None => InterleaveNode::TextSpan(phrase.clone()),
                    }
                }
            })
            .collect();
        InterleaveEntry::new(nodes)
    }

    pub fn gt_masks(&self) -> Vec<BoolMatrix> {
        self.entities.iter().map(|e| e.mask.clone()).collect()
    }

    pub fn replaced_count(&self) -> usize {
        self.entities
            .iter()
            .filter(|e| e.visual_ref.is_some())
            .count()
    }
}
