//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic "FINDCKPT" | version u32 | config hash [32] | step u64
//! config length u64 | config JSON
//! tensor count u32 | per tensor: name length u32, name, rank u32, dims u64…, data f64…
//! optimizer flag u8 | if 1: t u64, then per tensor (same order) m f64…, v f64…
//! SHA-256 of everything above [32]
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::tasks::ModelConfig;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"FINDCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

/// SHA-256 of the model architecture, hex encoded.
pub fn config_hash(cfg: &ModelConfig) -> String {
    hex(&hash_bytes(cfg))
}

fn hash_bytes(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(&json).into()
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&hash_bytes(&ck.config.model));
    out.extend_from_slice(&ck.step.to_le_bytes());
    let json = serde_json::to_vec(&ck.config)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t);
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.t.to_le_bytes());
            for (name, t) in ck.params.iter() {
                let zero = Tensor::zeros(t.shape());
                put_f64s(&mut out, st.m.get(name).unwrap_or(&zero));
                put_f64s(&mut out, st.v.get(name).unwrap_or(&zero));
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} too large")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses a checkpoint. With `expected`, the stored architecture hash must
/// match unless `force` is set.
pub fn checkpoint_from_bytes(
    buf: &[u8],
    expected: Option<&ModelConfig>,
    force: bool,
) -> Result<Checkpoint> {
    if buf.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint(
            "checksum mismatch (file is truncated or corrupt)".into(),
        ));
    }
    let mut r = Reader {
        buf: body,
        at: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let stored_hash = r.take(32)?.to_vec();
    let step = r.u64()?;
    let json_len = r.len()?;
    let config: TrainConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    if stored_hash != hash_bytes(&config.model) {
        return Err(Error::Checkpoint(
            "stored config does not match its hash".into(),
        ));
    }
    if let Some(exp) = expected {
        let want = hash_bytes(exp);
        if stored_hash != want && !force {
            return Err(Error::ConfigHash {
                found: hex(&stored_hash),
                expected: hex(&want),
            });
        }
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
        let t = Tensor::new(shape.clone(), r.f64s(numel)?)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        params.insert(name.clone(), t);
        shapes.push((name, shape, numel));
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut st = AdamState {
                t,
                ..Default::default()
            };
            for (name, shape, numel) in &shapes {
                let m = Tensor::new(shape.clone(), r.f64s(*numel)?)?;
                let v = Tensor::new(shape.clone(), r.f64s(*numel)?)?;
                st.m.insert(name.clone(), m);
                st.v.insert(name.clone(), v);
            }
            Some(st)
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.at != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            body.len() - r.at
        )));
    }
    Ok(Checkpoint {
        config,
        step,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
    force: bool,
) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?, expected, force)
}
