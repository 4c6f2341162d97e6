//! Binary checkpoint format.
//!
//! ```text
//! "PBDC"  u32 version  u32 float width (4 or 8)
//! u64 n   n bytes of UTF-8 JSON {"model": ModelConfig, "vocab": [..] | null}
//! u32 tensor count, then per tensor:
//!     u32 name length, name, u32 rank, rank × u64 dims, little-endian data
//! u8 has optimizer; if 1: u64 step, 3 × f64 (β1, β2, ε), then the first
//!     and second moments of every tensor in order
//! ```
//!
//! All integers are little-endian. Aliased parameters are stored once.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, OptimState};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PBDC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    vocab: Option<Vocab>,
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub model: TransformerModel<F>,
    pub optim: Option<OptimState<F>>,
    pub vocab: Option<Vocab>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_floats<F: Scalar>(out: &mut Vec<u8>, xs: &[F]) {
    for &x in xs {
        x.write_le(out);
    }
}

pub fn encode_checkpoint<F: Scalar>(
    model: &TransformerModel<F>,
    optim: Option<&OptimState<F>>,
    vocab: Option<&Vocab>,
) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        model: model.config().clone(),
        vocab: vocab.cloned(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, F::WIDTH as u32);
    put_u64(&mut out, meta.len() as u64);
    out.extend_from_slice(&meta);
    put_u32(&mut out, model.params().len() as u32);
    for (name, t) in model.named_params() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_floats(&mut out, t.data());
    }
    match optim {
        None => out.push(0),
        Some(st) => {
            if !st.matches(model.params()) {
                return Err(Error::Shape("optimizer state does not match the model".into()));
            }
            out.push(1);
            put_u64(&mut out, st.step);
            for x in [st.config.beta1, st.config.beta2, st.config.eps] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for (m, v) in st.m.iter().zip(&st.v) {
                put_floats(&mut out, m);
                put_floats(&mut out, v);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length field overflows".into()))
    }

    fn floats<F: Scalar>(&mut self, n: usize) -> Result<Vec<F>> {
        let bytes = self.take(n.checked_mul(F::WIDTH).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(F::WIDTH).map(F::read_le).collect())
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<(usize, Meta)> {
    if r.take(4).map_err(|_| Error::Format("file too short for a checkpoint".into()))? != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let width = r.u32()? as usize;
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unsupported float width {width}")));
    }
    let n = r.len()?;
    let meta: Meta = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    Ok((width, meta))
}

pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { bytes, pos: 0 };
    let (width, meta) = read_header(&mut r)?;
    if width != F::WIDTH {
        return Err(Error::Format(format!(
            "checkpoint stores {}-bit floats, expected {}-bit",
            width * 8,
            F::WIDTH * 8
        )));
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape of `{name}` overflows")))?;
        let data = r.floats::<F>(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        named.push((name, t));
    }
    let model = TransformerModel::from_named(meta.model, named)
        .map_err(|e| Error::Format(format!("checkpoint tensors do not match its config: {e}")))?;
    let optim = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut m = Vec::with_capacity(model.params().len());
            let mut v = Vec::with_capacity(model.params().len());
            for p in model.params() {
                m.push(r.floats::<F>(p.numel())?);
                v.push(r.floats::<F>(p.numel())?);
            }
            Some(OptimState { config, step, m, v })
        }
        flag => return Err(Error::Format(format!("bad optimizer flag {flag}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model,
        optim,
        vocab: meta.vocab,
    })
}

/// Writes a checkpoint, replacing `path` only once the file is complete.
pub fn save_checkpoint<F: Scalar>(
    path: impl AsRef<Path>,
    model: &TransformerModel<F>,
    optim: Option<&OptimState<F>>,
    vocab: Option<&Vocab>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, optim, vocab)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint that must have been written with `expected`.
pub fn load_checkpoint_for<F: Scalar>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint<F>> {
    let ck = load_checkpoint::<F>(path)?;
    let found = ck.model.config();
    if found.share_params != expected.share_params {
        return Err(Error::Config(format!(
            "config mismatch: checkpoint has share_params={}, config asks for share_params={}",
            found.share_params, expected.share_params
        )));
    }
    if found != expected {
        return Err(Error::Config(format!(
            "config mismatch: checkpoint was written with {}",
            serde_json::to_string(found)?
        )));
    }
    Ok(ck)
}

/// Float width in bytes and model config stored in a checkpoint, without
/// reading its tensors.
pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<(usize, ModelConfig)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let (width, meta) = read_header(&mut r)?;
    Ok((width, meta.model))
}
