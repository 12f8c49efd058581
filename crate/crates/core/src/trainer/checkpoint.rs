//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `DRCK`, `u32` version, `u32` record count,
//! then records of `u32` name length, UTF-8 name, `u8` dtype, `u32` rank,
//! `u64` dims and the raw values, closed by the end marker `KCRD`. Tensors
//! are stored as `f64`, so a round trip is bit-exact.

use std::collections::HashMap;
use std::path::Path;

use super::{TrainConfig, TrainState};
use crate::backbone::{Codebook, PointModel, Tokenizer};
use crate::error::{Error, Result};
use crate::losses::{EmbeddingBatch, Modality, MocoState};
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DRCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const END_MARKER: &[u8; 4] = b"KCRD";

const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;
const DTYPE_UTF8: u8 = 3;

enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Utf8(String),
}

struct Record {
    dims: Vec<usize>,
    payload: Payload,
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn header(&mut self, name: &str, dtype: u8, dims: &[usize]) {
        self.count += 1;
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(dtype);
        self.buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            self.buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }

    fn f64s(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        self.header(name, DTYPE_F64, dims);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn u64s(&mut self, name: &str, data: &[u64]) {
        self.header(name, DTYPE_U64, &[data.len()]);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn text(&mut self, name: &str, s: &str) {
        self.header(name, DTYPE_UTF8, &[s.len()]);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn store(&mut self, prefix: &str, ps: &ParamStore) {
        for id in ps.ids() {
            let t = ps.get(id);
            self.f64s(&format!("{prefix}/{}", ps.name(id)), t.shape(), t.data());
        }
    }
}

/// Serializes a state to checkpoint bytes.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::new(),
        count: 0,
    };
    let config = serde_json::to_string(&state.config).expect("config serializes");
    w.text("config", &config);
    w.u64s("dataset_size", &[state.dataset_size as u64]);
    w.u64s("step", &[state.step]);
    w.store("param", &state.params);
    w.store("key", &state.key_params);
    for (prefix, moments) in [("adam_m", &state.adam_m), ("adam_v", &state.adam_v)] {
        for (id, t) in state.params.ids().zip(moments) {
            w.f64s(&format!("{prefix}/{}", state.params.name(id)), t.shape(), t.data());
        }
    }
    let queue: Vec<f64> = state.moco.keys().flatten().copied().collect();
    w.f64s("moco/queue", &[state.moco.len(), state.moco.dim], &queue);
    w.store("tokenizer", &state.tokenizer.params);
    let cb = &state.tokenizer.codebook;
    w.f64s("codebook", &[cb.len(), cb.dim()], cb.data());

    let mut out = Vec::with_capacity(w.buf.len() + 16);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&w.count.to_le_bytes());
    out.extend_from_slice(&w.buf);
    out.extend_from_slice(END_MARKER);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
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

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_records(bytes: &[u8]) -> Result<HashMap<String, Record>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = c.u32()?;
    let mut records = HashMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let dtype = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("record {name} is too large")))?;
        let bytes_needed = |w: usize| n.checked_mul(w).ok_or_else(|| Error::Format(format!("record {name} is too large")));
        let payload = match dtype {
            DTYPE_F64 => Payload::F64(
                c.take(bytes_needed(8)?)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DTYPE_U64 => Payload::U64(
                c.take(bytes_needed(8)?)?
                    .chunks_exact(8)
                    .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DTYPE_UTF8 => Payload::Utf8(
                std::str::from_utf8(c.take(n)?)
                    .map_err(|_| Error::Format(format!("record {name} is not UTF-8")))?
                    .to_string(),
            ),
            other => return Err(Error::Format(format!("record {name} has unknown dtype {other}"))),
        };
        if records.insert(name.clone(), Record { dims, payload }).is_some() {
            return Err(Error::Format(format!("duplicate record {name}")));
        }
    }
    if c.take(4)? != END_MARKER || c.pos != bytes.len() {
        return Err(Error::Format("checkpoint does not end with its end marker".into()));
    }
    Ok(records)
}

struct Records(HashMap<String, Record>);

impl Records {
    fn get(&mut self, name: &str) -> Result<Record> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks record {name}")))
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let r = self.get(name)?;
        match r.payload {
            Payload::F64(v) if r.dims == shape => Tensor::from_vec(shape, v),
            Payload::F64(_) => Err(Error::Format(format!(
                "record {name} has shape {:?}, expected {shape:?}",
                r.dims
            ))),
            _ => Err(Error::Format(format!("record {name} is not a float tensor"))),
        }
    }

    fn matrix(&mut self, name: &str, cols: usize) -> Result<(usize, Vec<f64>)> {
        let r = self.get(name)?;
        match r.payload {
            Payload::F64(v) if r.dims.len() == 2 && r.dims[1] == cols => Ok((r.dims[0], v)),
            _ => Err(Error::Format(format!("record {name} is not an N x {cols} float matrix"))),
        }
    }

    fn scalar(&mut self, name: &str) -> Result<u64> {
        match self.get(name)?.payload {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Format(format!("record {name} is not a u64 scalar"))),
        }
    }

    fn text(&mut self, name: &str) -> Result<String> {
        match self.get(name)?.payload {
            Payload::Utf8(s) => Ok(s),
            _ => Err(Error::Format(format!("record {name} is not text"))),
        }
    }

    /// Fills every tensor of `layout` from `prefix/<name>` records.
    fn store(&mut self, prefix: &str, mut layout: ParamStore) -> Result<ParamStore> {
        for id in layout.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}/{}", layout.name(id));
            let shape = layout.get(id).shape().to_vec();
            *layout.get_mut(id) = self.tensor(&name, &shape)?;
        }
        Ok(layout)
    }
}

/// Restores a state from checkpoint bytes; any inconsistency is an error and
/// no partial state is returned.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Records(parse_records(bytes)?);
    let config: TrainConfig = serde_json::from_str(&r.text("config")?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let dataset_size = r.scalar("dataset_size")? as usize;
    let step = r.scalar("step")?;
    let (model, layout) = PointModel::new(config.model_config(), config.seed)?;
    let (tlayout, tembed) = Tokenizer::snapshot(&model, &layout);
    let params = r.store("param", layout.clone())?;
    let key_params = r.store("key", layout.clone())?;
    let mut moments = |prefix: &str| -> Result<Vec<Tensor>> {
        layout
            .ids()
            .map(|id| r.tensor(&format!("{prefix}/{}", layout.name(id)), layout.get(id).shape()))
            .collect()
    };
    let adam_m = moments("adam_m")?;
    let adam_v = moments("adam_v")?;
    let dim = model.dim();
    let mut moco = MocoState::new(config.moco.queue_size, dim, config.moco.momentum, config.moco.tau)?;
    let (queued, queue) = r.matrix("moco/queue", dim)?;
    if queued > config.moco.queue_size {
        return Err(Error::Format("MoCo queue exceeds its capacity".into()));
    }
    if queued > 0 {
        moco.enqueue(&EmbeddingBatch::new(Modality::Point, dim, queue)?)?;
    }
    let tparams = r.store("tokenizer", tlayout)?;
    let (vocab, codewords) = r.matrix("codebook", dim)?;
    if vocab != config.codebook_size {
        return Err(Error::Format("codebook size disagrees with the config".into()));
    }
    let codebook = Codebook::new(dim, codewords).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(extra) = r.0.keys().next() {
        return Err(Error::Format(format!("unexpected record {extra}")));
    }
    Ok(TrainState {
        config,
        dataset_size,
        step,
        model,
        params,
        key_params,
        adam_m,
        adam_v,
        moco,
        tokenizer: Tokenizer {
            params: tparams,
            embed: tembed,
            codebook,
        },
    })
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, encode_checkpoint(state))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?)
}
