//! Precomputed embedding records.
//!
//! One file per scene or text. Layout, all integers little-endian:
//!
//! ```text
//! magic   b"FEMB"
//! version u16 = 1
//! dtype   [u8; 4] = b"f64\0"
//! ndim    u32
//! dims    u64 × ndim
//! payload f64 × product(dims), row-major
//! ```
//!
//! Scene records are named `scene-<scene_id>.femb`; text records are named
//! `text-<fnv1a(text) as 16 hex digits>.femb`.

use std::fs;
use std::path::{Path, PathBuf};

use super::fnv1a;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FEMB";
const VERSION: u16 = 1;
const DTYPE: &[u8; 4] = b"f64\0";

pub fn write_embedding(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + t.numel() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(DTYPE);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &s in t.shape() {
        buf.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        message: msg.to_string(),
    };
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated embedding record"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    if take(4)? != DTYPE {
        return Err(bad("unsupported dtype (only f64)"));
    }
    let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(bad("bad rank"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let payload = take(n.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !cur.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

/// Directory of embedding records that override the synthetic encoders.
#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    dir: PathBuf,
}

impl EmbeddingStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn scene_path(&self, scene_id: u64) -> PathBuf {
        self.dir.join(format!("scene-{scene_id}.femb"))
    }

    pub fn text_path(&self, text: &str) -> PathBuf {
        self.dir
            .join(format!("text-{:016x}.femb", fnv1a(text.as_bytes())))
    }

    /// `None` when no record exists for the scene.
    pub fn scene(&self, scene_id: u64) -> Option<Result<Tensor>> {
        let p = self.scene_path(scene_id);
        p.exists().then(|| read_embedding(&p))
    }

    pub fn text(&self, text: &str) -> Option<Result<Tensor>> {
        let p = self.text_path(text);
        p.exists().then(|| read_embedding(&p))
    }

    pub fn put_scene(&self, scene_id: u64, t: &Tensor) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        write_embedding(&self.scene_path(scene_id), t)
    }

    pub fn put_text(&self, text: &str, t: &Tensor) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        write_embedding(&self.text_path(text), t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.femb");
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        write_embedding(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FEMB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], b"f64\0");
        assert_eq!(&bytes[10..14], &[2, 0, 0, 0]);
        assert_eq!(bytes.len(), 14 + 16 + 16);
        assert_eq!(&bytes[30..38], &1.5f64.to_le_bytes());
        assert_eq!(read_embedding(&p).unwrap(), t);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.femb");
        write_embedding(&p, &Tensor::ones(&[2, 2])).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_embedding(&p).is_err());
    }
}
