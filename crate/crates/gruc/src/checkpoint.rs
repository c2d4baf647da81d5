//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GRUCKPT\0" | u32 version
//! u32 json_len | config JSON (UTF-8)
//! u32 vocab_count | vocab_count x string
//! u32 param_count | param_count x (string name | u32 rank | rank x u32 dims | f64 x len)
//! u8 has_optimizer
//!   [ u64 step_count
//!     u32 count | count x named tensor   (first moments)
//!     u32 count | count x named tensor ] (second moments)
//! u64 completed_epochs | u64 train_seed
//! ```
//!
//! Strings are `u32 length | UTF-8 bytes`. Every length field is validated
//! against the bytes actually remaining before anything is allocated, so a
//! truncated or hostile file fails with a `Checkpoint` error instead of an
//! absurd allocation or a panic. Trailing bytes after the final field are
//! rejected: a checkpoint is exactly its contents.
//!
//! Saving goes through a sibling temporary file followed by a rename, so a
//! crash mid-write never leaves a half-written checkpoint at the target path.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, ParameterSet, Tensor};
use crate::retrieval::RelationVocab;

const MAGIC: &[u8; 8] = b"GRUCKPT\0";
const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: Option<RelationVocab>,
    pub params: ParameterSet,
    pub optimizer: Option<Adam>,
    /// Epochs fully completed before this snapshot; training resumes at the
    /// next one. Per-epoch randomness derives from `train_seed` and the epoch
    /// index, so no generator state needs to survive the roundtrip.
    pub completed_epochs: u64,
    pub train_seed: u64,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(corrupt(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| corrupt(format!("{what} is not valid UTF-8")))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let rank = self.u32(what)? as usize;
        // Rank is tiny in practice; 8 leaves headroom without allowing a
        // length bomb.
        if rank > 8 {
            return Err(corrupt(format!("{what}: rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let dim = self.u32(what)? as usize;
            len = len
                .checked_mul(dim)
                .ok_or_else(|| corrupt(format!("{what}: shape overflows")))?;
            shape.push(dim);
        }
        if len > self.remaining() / 8 {
            return Err(corrupt(format!(
                "{what}: {len} elements exceed the {} bytes left",
                self.remaining()
            )));
        }
        let bytes = self.take(len * 8, what)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("{what} contains a non-finite value")));
        }
        Tensor::from_shape(&shape, data)
    }

    fn named_tensors(&mut self, what: &str) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32(what)? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name = self.string(what)?;
            let tensor = self.tensor(&format!("{what} `{name}`"))?;
            if map.insert(name.clone(), tensor).is_some() {
                return Err(corrupt(format!("{what} `{name}` appears twice")));
            }
        }
        Ok(map)
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &dim in t.shape() {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_named_tensors(out: &mut Vec<u8>, map: &BTreeMap<String, Tensor>) {
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, tensor) in map {
        push_string(out, name);
        push_tensor(out, tensor);
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let json = serde_json::to_string(&self.config).map_err(|e| {
            corrupt(format!("config does not serialize: {e}"))
        })?;
        push_string(&mut out, &json);

        let relations: &[String] = match &self.vocab {
            Some(v) => v.relations(),
            None => &[],
        };
        out.extend_from_slice(&(relations.len() as u32).to_le_bytes());
        for relation in relations {
            push_string(&mut out, relation);
        }

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            push_string(&mut out, name);
            push_tensor(&mut out, tensor);
        }

        match &self.optimizer {
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step_count().to_le_bytes());
                let (first, second) = adam.moments();
                push_named_tensors(&mut out, first);
                push_named_tensors(&mut out, second);
            }
            None => out.push(0),
        }

        out.extend_from_slice(&self.completed_epochs.to_le_bytes());
        out.extend_from_slice(&self.train_seed.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes);
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(corrupt(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }

        let json = r.string("config")?;
        let config = Config::from_json(&json)?;

        let vocab_count = r.u32("vocabulary")? as usize;
        if vocab_count > r.remaining() {
            return Err(corrupt(format!(
                "vocabulary count {vocab_count} exceeds the bytes left"
            )));
        }
        let mut relations = Vec::with_capacity(vocab_count);
        for _ in 0..vocab_count {
            relations.push(r.string("relation")?);
        }
        let vocab = if relations.is_empty() {
            None
        } else {
            Some(RelationVocab::from_parts(relations))
        };

        let param_count = r.u32("parameter count")? as usize;
        if param_count > r.remaining() {
            return Err(corrupt(format!(
                "parameter count {param_count} exceeds the bytes left"
            )));
        }
        let mut params = ParameterSet::new();
        for _ in 0..param_count {
            let name = r.string("parameter name")?;
            let tensor = r.tensor(&format!("parameter `{name}`"))?;
            params.insert_restored(&name, tensor)?;
        }

        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let first = r.named_tensors("first moment")?;
                let second = r.named_tensors("second moment")?;
                for name in first.keys().chain(second.keys()) {
                    if !params.contains(name) {
                        return Err(corrupt(format!(
                            "optimizer moment `{name}` has no matching parameter"
                        )));
                    }
                }
                Some(Adam::restore(AdamConfig::default(), step, first, second))
            }
            other => return Err(corrupt(format!("optimizer flag {other} is not 0 or 1"))),
        };

        let completed_epochs = r.u64("completed epochs")?;
        let train_seed = r.u64("train seed")?;

        if r.remaining() != 0 {
            return Err(corrupt(format!(
                "{} trailing bytes after the checkpoint",
                r.remaining()
            )));
        }

        Ok(Checkpoint {
            config,
            vocab,
            params,
            optimizer,
            completed_epochs,
            train_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
