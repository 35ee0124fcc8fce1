//! Line-delimited JSON dataset files.
//!
//! `records.jsonl` holds one record per line:
//!
//! ```text
//! {"scene_id":3,"caption_raw":"a picture of [301]<the red star>.",
//!  "entities":[{"ann_id":301,"span":[13,32],"phrase":"the red star",
//!               "bbox":[x0,y0,w,h],"mask_rle":{"size":[h,w],"counts":[...]},
//!               "category":3,"visual_ref":{"scene_id":9,"ann_id":902}}]}
//! ```
//!
//! `span` is the char range of the entity's `[index]<phrase>` token in
//! `caption_raw`. Masks are run-length encoded over the row-major cells as
//! alternating run lengths of false and true cells, starting with false
//! (so the first count is 0 when the first cell is set).
//!
//! `scenes.jsonl` holds one serialized scene per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::caption::{parse_caption, serialize_caption};
use super::record::{BenchEntity, BenchRecord, VisualRef};
use crate::encoders::{BBox, Scene};
use crate::error::{Error, Result};
use crate::tensor::BoolMatrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn encode_rle(mask: &BoolMatrix) -> Rle {
    let mut counts = Vec::new();
    let mut cur = false;
    let mut run = 0;
    for &b in mask.data() {
        if b == cur {
            run += 1;
        } else {
            counts.push(run);
            cur = b;
            run = 1;
        }
    }
    counts.push(run);
    Rle {
        size: [mask.rows(), mask.cols()],
        counts,
    }
}

pub fn decode_rle(rle: &Rle) -> Result<BoolMatrix> {
    let [h, w] = rle.size;
    let mut data = Vec::with_capacity(h * w);
    let mut cur = false;
    for &c in &rle.counts {
        data.extend(std::iter::repeat_n(cur, c));
        cur = !cur;
    }
    if data.len() != h * w {
        return Err(Error::invalid(format!(
            "run lengths cover {} cells of a {h}x{w} mask",
            data.len()
        )));
    }
    BoolMatrix::new(h, w, data)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityLine {
    ann_id: u64,
    span: [usize; 2],
    phrase: String,
    bbox: BBox,
    mask_rle: Rle,
    category: usize,
    visual_ref: Option<VisualRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    scene_id: u64,
    caption_raw: String,
    entities: Vec<EntityLine>,
}

pub fn record_to_line(r: &BenchRecord) -> Result<String> {
    let spans = r.caption.entities();
    if spans.len() != r.entities.len() {
        return Err(Error::invalid("record entities disagree with caption"));
    }
    let line = RecordLine {
        scene_id: r.scene_id,
        caption_raw: serialize_caption(&r.caption)?,
        entities: r
            .entities
            .iter()
            .zip(spans)
            .map(|(e, s)| EntityLine {
                ann_id: e.ann_id,
                span: s.span,
                phrase: e.phrase.clone(),
                bbox: e.bbox,
                mask_rle: encode_rle(&e.mask),
                category: e.category,
                visual_ref: e.visual_ref,
            })
            .collect(),
    };
    Ok(serde_json::to_string(&line)?)
}

/// Parses one line; errors are plain messages for the caller to position.
pub fn record_from_line(line: &str) -> std::result::Result<BenchRecord, String> {
    let l: RecordLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let caption = parse_caption(&l.caption_raw).map_err(|e| format!("caption_raw: {e}"))?;
    let spans = caption.entities();
    if spans.len() != l.entities.len() {
        return Err(format!(
            "caption has {} entities but the record lists {}",
            spans.len(),
            l.entities.len()
        ));
    }
    let mut entities = Vec::with_capacity(l.entities.len());
    for (e, s) in l.entities.into_iter().zip(spans) {
        if e.ann_id != s.ann_id || e.span != s.span || e.phrase != s.phrase {
            return Err(format!(
                "entity {} does not match its caption token",
                e.ann_id
            ));
        }
        entities.push(BenchEntity {
            ann_id: e.ann_id,
            phrase: e.phrase,
            bbox: e.bbox,
            mask: decode_rle(&e.mask_rle).map_err(|e| e.to_string())?,
            category: e.category,
            visual_ref: e.visual_ref,
        });
    }
    let r = BenchRecord {
        scene_id: l.scene_id,
        caption,
        entities,
    };
    r.validate().map_err(|e| e.to_string())?;
    Ok(r)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = Result<String>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for l in lines {
        out.write_all(l?.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_lines<T>(
    path: &Path,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[BenchRecord]) -> Result<()> {
    write_lines(path, records.iter().map(record_to_line))
}

pub fn read_dataset(path: &Path) -> Result<Vec<BenchRecord>> {
    read_lines(path, record_from_line)
}

fn json_line<T: DeserializeOwned>(line: &str) -> std::result::Result<T, String> {
    serde_json::from_str(line).map_err(|e| e.to_string())
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    write_lines(path, scenes.iter().map(|s| Ok(serde_json::to_string(s)?)))
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes: Vec<Scene> = read_lines(path, |l| {
        let s: Scene = json_line(l)?;
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    })?;
    Ok(scenes)
}
