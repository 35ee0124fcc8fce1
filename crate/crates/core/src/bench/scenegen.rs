use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{tight_bbox, Cell, Color, Scene, SegmentAnnotation, ShapeKind};
use crate::error::{Error, Result};
use crate::tensor::BoolMatrix;

/// Annotation id of segment `k` in scene `scene_id`.
pub fn ann_id_for(scene_id: u64, k: usize) -> u64 {
    scene_id * 100 + k as u64 + 1
}

pub fn phrase_for(shape: ShapeKind, color: Color) -> String {
    format!("the {} {}", color.name(), shape.name())
}

/// Plain-text caption mentioning every phrase in order.
pub fn template_caption(phrases: &[String]) -> String {
    match phrases {
        [] => String::new(),
        [a] => format!("a picture of {a}."),
        [a, b] => format!("a picture of {a} next to {b}."),
        [init @ .., last] => format!("a picture of {} and {last}.", init.join(", ")),
    }
}

/// Deterministic scene with id `seed`. See [`generate_scene_with_id`].
pub fn generate_scene(seed: u64, h: usize, w: usize, n_segments: usize) -> Result<(Scene, String)> {
    generate_scene_with_id(seed, seed, h, w, n_segments)
}

/// Grows `n_segments` connected regions from random seed cells until they
/// cover the grid, and gives each region a distinct shape/color pair.
/// Returns the scene and its template caption.
pub fn generate_scene_with_id(
    scene_id: u64,
    seed: u64,
    h: usize,
    w: usize,
    n_segments: usize,
) -> Result<(Scene, String)> {
    let looks = ShapeKind::ALL.len() * Color::ALL.len();
    if n_segments == 0 || n_segments > h * w || n_segments > looks || n_segments > 99 {
        return Err(Error::invalid(format!(
            "cannot pack {n_segments} segments into a {h}x{w} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let mut owner = vec![usize::MAX; n];
    let mut cells: Vec<usize> = (0..n).collect();
    cells.shuffle(&mut rng);
    for (k, &c) in cells.iter().take(n_segments).enumerate() {
        owner[c] = k;
    }
    let neighbours = |i: usize| {
        let (r, c) = (i / w, i % w);
        let mut v = Vec::with_capacity(4);
        if r > 0 {
            v.push(i - w);
        }
        if r + 1 < h {
            v.push(i + w);
        }
        if c > 0 {
            v.push(i - 1);
        }
        if c + 1 < w {
            v.push(i + 1);
        }
        v
    };
    let mut remaining = n - n_segments;
    while remaining > 0 {
        let frontier: Vec<usize> = (0..n)
            .filter(|&i| {
                owner[i] == usize::MAX && neighbours(i).iter().any(|&j| owner[j] != usize::MAX)
            })
            .collect();
        let cell = frontier[rng.gen_range(0..frontier.len())];
        let owned: Vec<usize> = neighbours(cell)
            .into_iter()
            .filter(|&j| owner[j] != usize::MAX)
            .collect();
        owner[cell] = owner[owned[rng.gen_range(0..owned.len())]];
        remaining -= 1;
    }
    let mut pairs: Vec<(ShapeKind, Color)> = ShapeKind::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(n_segments);

    let cells_out: Vec<Cell> = owner
        .iter()
        .map(|&k| Cell {
            shape: pairs[k].0,
            color: pairs[k].1,
            segment: k,
        })
        .collect();
    let mut segments = Vec::with_capacity(n_segments);
    for (k, &(shape, color)) in pairs.iter().enumerate() {
        let mask = BoolMatrix::new(h, w, owner.iter().map(|&o| o == k).collect())?;
        let bbox = tight_bbox(&mask).expect("every segment owns its seed cell");
        segments.push(SegmentAnnotation {
            ann_id: ann_id_for(scene_id, k),
            mask,
            category: shape.index(),
            phrase: phrase_for(shape, color),
            bbox,
        });
    }
    let caption = template_caption(
        &segments
            .iter()
            .map(|s| s.phrase.clone())
            .collect::<Vec<_>>(),
    );
    let scene = Scene {
        scene_id,
        height: h,
        width: w,
        cells: cells_out,
        segments,
    };
    scene.validate()?;
    Ok((scene, caption))
}

/// A short generated description listing segment categories and where they
/// sit, standing in for a captioning model's output.
pub fn pseudo_description(scene: &Scene) -> String {
    let mut parts = Vec::new();
    for s in &scene.segments {
        let [x0, y0, bw, bh] = s.bbox;
        let cx = (x0 as f64 + bw as f64 / 2.0) / scene.width as f64;
        let cy = (y0 as f64 + bh as f64 / 2.0) / scene.height as f64;
        let horiz = if cx < 0.4 {
            "left"
        } else if cx > 0.6 {
            "right"
        } else {
            "middle"
        };
        let vert = if cy < 0.4 {
            "top"
        } else if cy > 0.6 {
            "bottom"
        } else {
            "center"
        };
        parts.push(format!("{} at the {vert} {horiz}", s.phrase));
    }
    format!("an image showing {}", parts.join(", "))
}
