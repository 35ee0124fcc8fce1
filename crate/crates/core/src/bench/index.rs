use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::{BenchRecord, VisualRef};
use crate::encoders::{mask_pool, Encoders, Scene};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor};

/// Unit-norm embedding of every segment, with the segment that owns each
/// row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityIndex {
    pub s: Tensor,
    pub owner: Vec<VisualRef>,
}

impl SimilarityIndex {
    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn row_of(&self, scene_id: u64, ann_id: u64) -> Option<usize> {
        self.owner
            .iter()
            .position(|o| o.scene_id == scene_id && o.ann_id == ann_id)
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        self.s
            .row(i)
            .iter()
            .zip(self.s.row(j))
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Mask-pooled image features of every segment of every scene.
pub fn build_similarity_index(
    scenes: &[Scene],
    enc: &Encoders,
    params: &ParamStore,
) -> Result<SimilarityIndex> {
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    for scene in scenes {
        let feats = enc.encode_image(&mut tape, scene, &vars)?;
        for seg in &scene.segments {
            let v = mask_pool(&mut tape, feats, &seg.mask)?;
            let v = tape.normalize_rows(v)?;
            rows.push(tape.value(v).data().to_vec());
            owner.push(VisualRef {
                scene_id: scene.scene_id,
                ann_id: seg.ann_id,
            });
        }
    }
    if rows.len() < 2 {
        return Err(Error::invalid(
            "a similarity index needs at least two segments",
        ));
    }
    Ok(SimilarityIndex {
        s: Tensor::from_rows(&rows)?,
        owner,
    })
}

/// The most similar row to `i` owned by a different scene; ties go to the
/// lowest row.
pub fn match_segment(index: &SimilarityIndex, i: usize) -> Result<usize> {
    if i >= index.len() {
        return Err(Error::invalid(format!("row {i} out of {}", index.len())));
    }
    let own = index.owner[i].scene_id;
    let mut best: Option<(usize, f64)> = None;
    for j in 0..index.len() {
        if j == i || index.owner[j].scene_id == own {
            continue;
        }
        let c = index.cosine(i, j);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((j, c));
        }
    }
    best.map(|b| b.0).ok_or(Error::AllExcluded(i))
}

/// Gives each entity, with probability `p_replace`, a visual reference to
/// the closest segment of another scene. Phrases are kept.
pub fn replace_entities<R: Rng>(
    record: &BenchRecord,
    index: &SimilarityIndex,
    p_replace: f64,
    rng: &mut R,
) -> Result<BenchRecord> {
    if !(0.0..=1.0).contains(&p_replace) {
        return Err(Error::invalid(format!(
            "p_replace {p_replace} outside [0, 1]"
        )));
    }
    let mut out = record.clone();
    for e in &mut out.entities {
        if rng.gen::<f64>() < p_replace {
            let i = index
                .row_of(record.scene_id, e.ann_id)
                .ok_or(Error::DanglingReference {
                    scene_id: record.scene_id,
                    ann_id: e.ann_id,
                })?;
            e.visual_ref = Some(index.owner[match_segment(index, i)?]);
        }
    }
    Ok(out)
}
