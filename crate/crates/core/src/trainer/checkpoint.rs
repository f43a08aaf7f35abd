//! Binary checkpoint: `COCO`, u32 version, u64 payload length, payload,
//! sha256 of everything before it. All integers and floats little-endian.
//!
//! The payload is a u64-prefixed JSON header (config text, vocabulary,
//! titles, counters, RNG, tensor directory) followed by raw f64 data for
//! every registry entry, then the Adam moments of the entries that have
//! them.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CocoModel, TrainConfig, TrainState};
use crate::diffcore::{ParamId, Tensor};
use crate::error::{CocoError, Result};
use crate::optim::AdamW;
use crate::toylm::Tokenizer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"COCO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    tokenizer: String,
    titles: Vec<String>,
    n_users: usize,
    catalog_fingerprint: String,
    epoch: usize,
    step: u64,
    adam_t: u64,
    rng: ChaCha8Rng,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    moments: bool,
}

fn bad(m: impl Into<String>) -> CocoError {
    CocoError::Checkpoint(m.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| bad(e.to_string()))
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl TrainState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let reg = &m.registry;
        let params = reg
            .iter()
            .map(|(id, e)| ParamRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                frozen: e.frozen,
                moments: self.optimizer.moments(id).is_some(),
            })
            .collect();
        let header = Header {
            config: m.cfg.to_kv(),
            tokenizer: m.tokenizer.to_json()?,
            titles: m.titles.clone(),
            n_users: m.n_users,
            catalog_fingerprint: m.catalog_fingerprint.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.optimizer.t,
            rng: self.rng.clone(),
            params,
        };
        let json = serde_json::to_vec(&header)?;
        let mut payload = Vec::new();
        payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
        payload.extend_from_slice(&json);
        for (_, e) in reg.iter() {
            put_tensor(&mut payload, &e.value);
        }
        for (id, _) in reg.iter() {
            if let Some((mo, v)) = self.optimizer.moments(id) {
                put_tensor(&mut payload, mo);
                put_tensor(&mut payload, v);
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 48);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Validates the whole file before building any state.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing COCO header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CocoError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body_end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e.checked_add(32) == Some(bytes.len()))
            .ok_or_else(|| bad("payload length does not match file size"))?;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader {
            buf: &bytes[16..body_end],
            pos: 0,
        };
        let hlen = usize::try_from(r.u64()?).map_err(|_| bad("header too large"))?;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
        let cfg = TrainConfig::from_kv(&header.config)?;
        let tokenizer = Tokenizer::from_json(&header.tokenizer)?;
        let mut model = CocoModel::assemble(
            &cfg,
            header.titles,
            header.n_users,
            header.catalog_fingerprint,
            Some(tokenizer),
        )?;
        if model.registry.len() != header.params.len() {
            return Err(bad(format!(
                "{} stored tensors, model layout has {}",
                header.params.len(),
                model.registry.len()
            )));
        }
        for (i, rec) in header.params.iter().enumerate() {
            let e = model.registry.entry(ParamId(i));
            if e.name != rec.name || e.value.shape() != rec.shape.as_slice() || e.frozen != rec.frozen {
                return Err(bad(format!("tensor {i} `{}` does not match layout entry `{}`", rec.name, e.name)));
            }
        }
        for (i, rec) in header.params.iter().enumerate() {
            *model.registry.value_mut(ParamId(i)) = r.tensor(&rec.shape)?;
        }
        let mut optimizer = AdamW::default();
        optimizer.t = header.adam_t;
        for (i, rec) in header.params.iter().enumerate() {
            if rec.moments {
                let m = r.tensor(&rec.shape)?;
                let v = r.tensor(&rec.shape)?;
                optimizer.set_moments(ParamId(i), m, v);
            }
        }
        if r.pos != r.buf.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model,
            optimizer,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
        })
    }

    /// Writes to a temporary file in the target directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| CocoError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
