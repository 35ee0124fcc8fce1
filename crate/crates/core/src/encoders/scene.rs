use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BoolMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
        ShapeKind::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Diamond => "diamond",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }
}

/// Number of segment categories. A segment's category is its shape kind.
pub const NUM_CATEGORIES: usize = ShapeKind::ALL.len();

/// Category names in label order, used to build class prompts.
pub fn category_names() -> Vec<&'static str> {
    ShapeKind::ALL.iter().map(|s| s.name()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub shape: ShapeKind,
    pub color: Color,
    pub segment: usize,
}

/// Axis-aligned box in cell units: `[x0, y0, w, h]` with x along columns.
pub type BBox = [usize; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub ann_id: u64,
    pub mask: BoolMatrix,
    pub category: usize,
    pub phrase: String,
    pub bbox: BBox,
}

/// Tight bounding box of the true cells of `mask`, or `None` when empty.
pub fn tight_bbox(mask: &BoolMatrix) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut any = false;
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if mask.get(r, c) {
                any = true;
                x0 = x0.min(c);
                y0 = y0.min(r);
                x1 = x1.max(c);
                y1 = y1.max(r);
            }
        }
    }
    any.then(|| [x0, y0, x1 - x0 + 1, y1 - y0 + 1])
}

/// A synthetic image: a grid of cells partitioned into connected segments.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Cell>,
    pub segments: Vec<SegmentAnnotation>,
}

impl fmt::Debug for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Scene#{} {}x{} ({} segments)",
            self.scene_id,
            self.height,
            self.width,
            self.segments.len()
        )
    }
}

impl Scene {
    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.width + col]
    }

    pub fn segment_by_ann(&self, ann_id: u64) -> Option<&SegmentAnnotation> {
        self.segments.iter().find(|s| s.ann_id == ann_id)
    }

    pub fn segment_index(&self, ann_id: u64) -> Option<usize> {
        self.segments.iter().position(|s| s.ann_id == ann_id)
    }

    /// Segment index owning each cell, row-major.
    pub fn labels(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.segment).collect()
    }

    /// Checks the panoptic and annotation invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_cells();
        if n == 0 || self.cells.len() != n {
            return Err(Error::invalid(format!(
                "scene {} has {} cells for a {}x{} grid",
                self.scene_id,
                self.cells.len(),
                self.height,
                self.width
            )));
        }
        if self.segments.is_empty() {
            return Err(Error::invalid(format!(
                "scene {} has no segments",
                self.scene_id
            )));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            if cell.segment >= self.segments.len() {
                return Err(Error::invalid(format!(
                    "cell {i} references missing segment {}",
                    cell.segment
                )));
            }
        }
        for (k, seg) in self.segments.iter().enumerate() {
            if seg.mask.shape() != [self.height, self.width] {
                return Err(Error::invalid(format!("segment {k} mask has wrong shape")));
            }
            for r in 0..self.height {
                for c in 0..self.width {
                    let owned = self.cell(r, c).segment == k;
                    if seg.mask.get(r, c) != owned {
                        return Err(Error::invalid(format!(
                            "segment {k} mask disagrees with cell ({r},{c})"
                        )));
                    }
                }
            }
            if tight_bbox(&seg.mask) != Some(seg.bbox) {
                return Err(Error::invalid(format!("segment {k} bbox is not tight")));
            }
            if !is_connected(&seg.mask) {
                return Err(Error::invalid(format!("segment {k} is not connected")));
            }
        }
        let mut seen = BTreeMap::new();
        for seg in &self.segments {
            if seen.insert(seg.ann_id, ()).is_some() {
                return Err(Error::invalid(format!("duplicate ann_id {}", seg.ann_id)));
            }
        }
        Ok(())
    }
}

/// 4-connectivity check. An empty mask is not connected.
pub fn is_connected(mask: &BoolMatrix) -> bool {
    let total = mask.count_true();
    let Some(start) = mask.data().iter().position(|&b| b) else {
        return false;
    };
    let (h, w) = (mask.rows(), mask.cols());
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 0;
    while let Some(i) = queue.pop_front() {
        count += 1;
        let (r, c) = (i / w, i % w);
        let mut visit = |rr: usize, cc: usize| {
            let j = rr * w + cc;
            if mask.get(rr, cc) && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < h {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < w {
            visit(r, c + 1);
        }
    }
    count == total
}

/// Lookup of scenes by id, used to resolve visual references.
pub trait SceneSource {
    fn get_scene(&self, scene_id: u64) -> Option<&Scene>;
}

impl SceneSource for BTreeMap<u64, Scene> {
    fn get_scene(&self, scene_id: u64) -> Option<&Scene> {
        self.get(&scene_id)
    }
}

impl SceneSource for [Scene] {
    fn get_scene(&self, scene_id: u64) -> Option<&Scene> {
        self.iter().find(|s| s.scene_id == scene_id)
    }
}

impl SceneSource for Vec<Scene> {
    fn get_scene(&self, scene_id: u64) -> Option<&Scene> {
        self.as_slice().get_scene(scene_id)
    }
}

impl SceneSource for Scene {
    fn get_scene(&self, scene_id: u64) -> Option<&Scene> {
        (self.scene_id == scene_id).then_some(self)
    }
}
