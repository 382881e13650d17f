//! Binary container: `SWRM` magic, `u32` version, `u32` kind, a
//! length-prefixed config block, then named `f64` arrays. Integers and floats
//! are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{ModelConfig, ScorerModel};
use super::tokenizer::Tokenizer;
use super::ScorerError;
use crate::autodiff::Matrix;

pub const MAGIC: &[u8; 4] = b"SWRM";
pub const VERSION: u32 = 1;
pub(crate) const KIND_MODEL: u32 = 1;
pub(crate) const KIND_ADAPTER: u32 = 2;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) -> Result<(), ScorerError> {
        let v = u32::try_from(v).map_err(|_| ScorerError::Checkpoint(format!("{v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<(), ScorerError> {
        self.usize(b.len())?;
        self.buf.extend_from_slice(b);
        Ok(())
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ScorerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ScorerError::Checkpoint("truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, ScorerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize, ScorerError> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64, ScorerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], ScorerError> {
        let n = self.usize()?;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String, ScorerError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| ScorerError::Checkpoint(e.to_string()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn write_container(kind: u32, config: &[u8], arrays: &[(String, Matrix)]) -> Result<Vec<u8>, ScorerError> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(kind);
    w.bytes(config)?;
    w.usize(arrays.len())?;
    for (name, m) in arrays {
        w.bytes(name.as_bytes())?;
        w.usize(m.rows())?;
        w.usize(m.cols())?;
        for &v in m.data() {
            w.f64(v);
        }
    }
    Ok(w.into_inner())
}

pub(crate) struct Container<'a> {
    pub config: &'a [u8],
    pub arrays: Vec<(String, Matrix)>,
}

pub(crate) fn read_container(bytes: &[u8], kind: u32) -> Result<Container<'_>, ScorerError> {
    let mut r = Reader::new(bytes);
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(ScorerError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ScorerError::Checkpoint(format!("unsupported version {version}")));
    }
    let found = r.u32()?;
    if found != kind {
        return Err(ScorerError::Checkpoint(format!("expected kind {kind}, found {found}")));
    }
    let config = r.bytes()?;
    let count = r.usize()?;
    let mut arrays = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.usize()?;
        let cols = r.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| ScorerError::Checkpoint("array size overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| ScorerError::Checkpoint("array size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if !r.is_done() {
        return Err(ScorerError::Checkpoint("trailing bytes".into()));
    }
    Ok(Container { config, arrays })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_config(config: &ModelConfig, tokenizer: &Tokenizer) -> Result<Vec<u8>, ScorerError> {
    let mut w = Writer::default();
    for v in [
        config.vocab_size,
        config.max_len,
        config.layers,
        config.d_model,
        config.d_ff,
        config.heads,
    ] {
        w.usize(v)?;
    }
    w.bytes(tokenizer.alphabet().as_bytes())?;
    Ok(w.into_inner())
}

fn decode_config(bytes: &[u8]) -> Result<(ModelConfig, Tokenizer), ScorerError> {
    let mut r = Reader::new(bytes);
    let config = ModelConfig {
        vocab_size: r.usize()?,
        max_len: r.usize()?,
        layers: r.usize()?,
        d_model: r.usize()?,
        d_ff: r.usize()?,
        heads: r.usize()?,
    };
    let alphabet = r.string()?;
    if !r.is_done() {
        return Err(ScorerError::Checkpoint("trailing config bytes".into()));
    }
    Ok((config, Tokenizer::new(&alphabet)))
}

/// Serialises the full model. Attached adapters must be merged or saved
/// separately first.
pub fn model_to_bytes(model: &ScorerModel) -> Result<Vec<u8>, ScorerError> {
    if model.adapters().is_some() {
        return Err(ScorerError::Adapter("cannot save a model with attached adapters".into()));
    }
    let arrays: Vec<(String, Matrix)> = model
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    write_container(KIND_MODEL, &encode_config(model.config(), model.tokenizer())?, &arrays)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ScorerModel, ScorerError> {
    let container = read_container(bytes, KIND_MODEL)?;
    let (config, tokenizer) = decode_config(container.config)?;
    let mut model = ScorerModel::new(config, tokenizer, 0)?;
    if container.arrays.len() != model.params().len() {
        return Err(ScorerError::Checkpoint(format!(
            "{} arrays for {} parameters",
            container.arrays.len(),
            model.params().len()
        )));
    }
    for (name, value) in container.arrays {
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| ScorerError::Checkpoint(format!("unknown parameter {name}")))?;
        let p = model.params_mut().get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(ScorerError::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
    }
    Ok(model)
}

pub fn save_model(model: &ScorerModel, path: impl AsRef<Path>) -> Result<(), ScorerError> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ScorerModel, ScorerError> {
    model_from_bytes(&std::fs::read(path)?)
}
