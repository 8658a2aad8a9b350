//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ATHM" | version u8 = 1
//! config: input_size u32, in_channels u32, k u32, classes u32, r f64,
//!         base_channels u32, dense_side u32, seed u64, lr f64,
//!         momentum f64, batch u32, epochs u32, attention u8
//! params: count u32, then per tensor rank u8, dims u32 x rank, f64 x len
//! batchnorm: count u32, then per layer channels u32, mean f64 x c,
//!            var f64 x c, momentum f64
//! crc32 u32 of every preceding byte
//! ```
//!
//! Loading checks the checksum, rebuilds the architecture from the stored
//! config and rejects any shape disagreement, truncation or trailing bytes.

use std::fs;
use std::path::Path;

use crate::autodiff::RunningStats;
use crate::network::{AthConfig, AthModel, ModelError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ATHM";
const VERSION: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> ModelError {
        ModelError::Checkpoint {
            path: self.path.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated at byte {} (needed {n} more)", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn write_config(w: &mut Writer, c: &AthConfig) {
    w.u32(c.input_size);
    w.u32(c.in_channels);
    w.u32(c.k);
    w.u32(c.classes);
    w.f64(c.r);
    w.u32(c.base_channels);
    w.u32(c.dense_side);
    w.u64(c.seed);
    w.f64(c.lr);
    w.f64(c.momentum);
    w.u32(c.batch);
    w.u32(c.epochs);
    w.u8(c.attention as u8);
}

fn read_config(r: &mut Reader<'_>) -> Result<AthConfig, ModelError> {
    Ok(AthConfig {
        input_size: r.u32()?,
        in_channels: r.u32()?,
        k: r.u32()?,
        classes: r.u32()?,
        r: r.f64()?,
        base_channels: r.u32()?,
        dense_side: r.u32()?,
        seed: r.u64()?,
        lr: r.f64()?,
        momentum: r.f64()?,
        batch: r.u32()?,
        epochs: r.u32()?,
        attention: match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(r.err(format!("attention flag must be 0 or 1, found {v}"))),
        },
    })
}

pub fn to_bytes(model: &AthModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u8(VERSION);
    write_config(&mut w, model.config());
    let params = model.params().tensors();
    w.u32(params.len());
    for t in params {
        w.u8(t.shape().len() as u8);
        t.shape().iter().for_each(|&d| w.u32(d));
        w.f64s(t.data());
    }
    let bn = model.bn_stats();
    w.u32(bn.len());
    for s in bn {
        w.u32(s.mean.len());
        w.f64s(&s.mean);
        w.f64s(&s.var);
        w.f64(s.momentum);
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

pub fn from_bytes(bytes: &[u8], path: &str) -> Result<AthModel, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4).map_err(|_| r.err("file too short for header"))? != MAGIC {
        return Err(r.err("bad magic, not a model checkpoint"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    if bytes.len() < r.pos + 4 {
        return Err(r.err("truncated before checksum"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(r.err("checksum mismatch, file is truncated or corrupted"));
    }
    let bytes = body;
    r.buf = body;
    let config = read_config(&mut r)?;
    config.validate().map_err(|e| r.err(format!("stored config rejected: {e}")))?;
    let mut model = AthModel::new(config)?;

    let count = r.u32()?;
    if count != model.params().len() {
        return Err(r.err(format!("{count} parameter tensors, architecture has {}", model.params().len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (i, expected) in model.params().tensors().iter().enumerate() {
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if dims != expected.shape() {
            return Err(r.err(format!("parameter {i}: shape {dims:?}, expected {:?}", expected.shape())));
        }
        let data = r.f64s(expected.len())?;
        loaded.push(Tensor::new(dims, data)?);
    }

    let bn_count = r.u32()?;
    if bn_count != model.bn_stats().len() {
        return Err(r.err(format!("{bn_count} batchnorm layers, architecture has {}", model.bn_stats().len())));
    }
    let mut stats = Vec::with_capacity(bn_count);
    for (i, expected) in model.bn_stats().iter().enumerate() {
        let c = r.u32()?;
        if c != expected.mean.len() {
            return Err(r.err(format!("batchnorm {i}: {c} channels, expected {}", expected.mean.len())));
        }
        stats.push(RunningStats {
            mean: r.f64s(c)?,
            var: r.f64s(c)?,
            momentum: r.f64()?,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    for (dst, src) in model.params_mut().tensors_mut().iter_mut().zip(loaded) {
        dst.data_mut().copy_from_slice(src.data());
    }
    model.bn_stats_mut().clone_from_slice(&stats);
    Ok(model)
}

pub fn save(model: &AthModel, path: &Path) -> Result<(), ModelError> {
    fs::write(path, to_bytes(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<AthModel, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes, &path.display().to_string())
}
