//! Binary checkpoints: `b"MOVE"`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header and a contiguous
//! little-endian `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MOVE";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in bytes.
    pub offset: usize,
}

/// Position of a ChaCha stream, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |msg: &str| Error::from(CheckpointError::Header(format!("rng state: {msg}")));
        if self.seed.len() != 64 {
            return Err(bad("seed must be 32 hex bytes"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// What the checkpoint holds, e.g. `mae` or `move`.
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub payload_sha256: String,
}

/// Named tensors plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            rng: None,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    /// Add every parameter and buffer of `module` under its own name.
    pub fn add_module(&mut self, module: &dyn Module) {
        module.visit(&mut |p| self.tensors.push((p.name.clone(), p.value.clone())));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Header(format!("missing integer field {key}")).into())
    }

    /// Copy stored values into `module`, matching parameters by name.
    pub fn load_module(&self, module: &mut dyn Module) -> Result<()> {
        let index: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        module.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match index.get(p.name.as_str()) {
                None => {
                    err = Some(CheckpointError::Parameter {
                        name: p.name.clone(),
                        msg: "missing from checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != p.value.shape() => {
                    err = Some(CheckpointError::Parameter {
                        name: p.name.clone(),
                        msg: format!("shape {:?} in checkpoint, {:?} in model", t.shape(), p.value.shape()),
                    })
                }
                Some(t) => p.value.data_mut().copy_from_slice(t.data()),
            }
        });
        match err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            kind: self.kind.clone(),
            tensors: entries,
            config: self.config.clone(),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            payload_sha256: format!("{:x}", Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated {
                expected: PREAMBLE,
                found: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = PREAMBLE.saturating_add(header_len);
        if bytes.len() < header_end {
            return Err(CheckpointError::Truncated {
                expected: header_end,
                found: bytes.len(),
            });
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut expected = header_end;
        for e in &header.tensors {
            let end = header_end + e.offset + 4 * e.shape.iter().product::<usize>();
            expected = expected.max(end);
        }
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let payload = &bytes[header_end..];
        if format!("{:x}", Sha256::digest(payload)) != header.payload_sha256 {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Parameter {
                name: e.name.clone(),
                msg: err.to_string(),
            })?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            rng: header.rng,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Load and require a given kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(CheckpointError::Header(format!(
                "{} holds a {} checkpoint, expected {kind}",
                path.display(),
                c.kind
            ))
            .into());
        }
        Ok(c)
    }
}
