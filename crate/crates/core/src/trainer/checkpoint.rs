//! `ALNC` checkpoint files.
//!
//! Layout (little endian): magic `ALNC`, `u16` version, `u32` CRC32 of the
//! payload, `u64` payload length, payload. The payload holds the config
//! snapshot (JSON), seed, global step, named parameter sections and the
//! optimizer moments. Every float is stored as `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{AdamSlot, ParamStore, Tensor2D};
use crate::speech::SpeechEncoderConfig;

pub const MAGIC: &[u8; 4] = b"ALNC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// JSON snapshot of the configuration that produced the parameters.
    /// Always carries a `speech` object with the encoder architecture.
    pub config: String,
    pub seed: u64,
    pub step: u64,
    pub params: BTreeMap<String, Tensor2D>,
    pub optimizer: BTreeMap<String, AdamSlot>,
}

impl Checkpoint {
    pub fn from_store(config: String, seed: u64, store: &ParamStore, optimizer: &BTreeMap<String, AdamSlot>) -> Self {
        Self {
            config,
            seed,
            step: store.step(),
            params: store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        put_bytes(&mut p, self.config.as_bytes());
        p.extend_from_slice(&self.seed.to_le_bytes());
        p.extend_from_slice(&self.step.to_le_bytes());
        p.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_bytes(&mut p, name.as_bytes());
            put_tensor(&mut p, t);
        }
        p.extend_from_slice(&(self.optimizer.len() as u32).to_le_bytes());
        for (name, slot) in &self.optimizer {
            put_bytes(&mut p, name.as_bytes());
            p.extend_from_slice(&slot.t.to_le_bytes());
            put_tensor(&mut p, &slot.m);
            put_tensor(&mut p, &slot.v);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + p.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Integrity("checkpoint shorter than its header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Integrity("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let crc = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != len {
            return Err(Error::Integrity(format!(
                "payload is {} bytes, header says {len}",
                payload.len()
            )));
        }
        if crc32fast::hash(payload) != crc {
            return Err(Error::Integrity("checkpoint CRC mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let config = r.string()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let mut params = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let t = r.tensor()?;
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::Integrity(format!("parameter `{name}` stored twice")));
            }
        }
        let mut optimizer = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let t = r.u64()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            optimizer.insert(name, AdamSlot { m, v, t });
        }
        if r.pos != payload.len() {
            return Err(Error::Integrity("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            config,
            seed,
            step,
            params,
            optimizer,
        })
    }

    /// The speech encoder architecture recorded in the config snapshot.
    pub fn speech_config(&self) -> Result<SpeechEncoderConfig> {
        let v: serde_json::Value = serde_json::from_str(&self.config)?;
        let speech = v
            .get("speech")
            .ok_or_else(|| Error::Integrity("config snapshot lacks a speech section".into()))?;
        Ok(serde_json::from_value(speech.clone())?)
    }

    /// Copies every checkpoint parameter starting with `prefix` into
    /// `store`, which must already hold a parameter of the same shape.
    pub fn load_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, value) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let slot = store
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if slot.shape() != value.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    found: value.shape(),
                    expected: slot.shape(),
                });
            }
            *slot = value.clone();
        }
        let missing = store
            .names()
            .filter(|n| n.starts_with(prefix))
            .find(|n| !self.params.contains_key(*n));
        if let Some(name) = missing {
            return Err(Error::MissingParam(name.to_string()));
        }
        Ok(())
    }

    /// A store holding the checkpoint parameters that start with `prefix`.
    pub fn store_with_prefix(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, value) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            store.insert(name.clone(), value.clone())?;
        }
        Ok(store)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor2D) {
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("checkpoint payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor2D> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Integrity("tensor size overflows".into()))?;
        let data = self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor2D::new(rows, cols, data).map_err(|_| Error::Integrity("non-finite value in checkpoint".into()))
    }
}
