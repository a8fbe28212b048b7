//! Binary checkpoints: spec, parameters, optimizer moments and the
//! training configuration.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SVRNNCK\0"
//! version    u32
//! manifest   u64 length + UTF-8 JSON
//! spec hash  u64      FNV-1a of the spec's JSON
//! arrays     u64 count, then per array:
//!            u32 name length + UTF-8 name, u64 rows, u64 cols,
//!            rows * cols f64 values
//! checksum   u64      FNV-1a of every preceding byte
//! ```
//!
//! Parameter arrays are named `param/<name>`; Adam moments are stored as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use svrnn_core::optim::{Optimizer, OptimizerKind};
use svrnn_core::rng::fnv1a;
use svrnn_core::trainer::TrainConfig;
use svrnn_core::{Array, Model, ModelSpec, ParamSet};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SVRNNCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub optimizer: Optimizer,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    optimizer: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    train_config: Option<TrainConfig>,
}

pub fn spec_hash(spec: &ModelSpec) -> u64 {
    fnv1a(serde_json::to_string(spec).expect("serializable").as_bytes())
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Ok(Model::bind(&self.spec, &self.params)?)
    }

    pub fn step(&self) -> u64 {
        self.optimizer.steps()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            spec: self.spec.clone(),
            optimizer: self.optimizer.kind,
            learning_rate: self.optimizer.learning_rate,
            steps: self.optimizer.steps(),
            train_config: self.train_config.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("serializable");
        let mut arrays: Vec<(String, &Array)> = Vec::new();
        for (name, a) in self.params.iter() {
            arrays.push((format!("param/{name}"), a));
        }
        let names = self.params.names();
        for (prefix, moments) in [("adam.m", self.optimizer.first_moments()), ("adam.v", self.optimizer.second_moments())] {
            for (name, a) in names.iter().zip(moments) {
                arrays.push((format!("{prefix}/{name}"), a));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&spec_hash(&self.spec).to_le_bytes());
        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, a) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.cols() as u64).to_le_bytes());
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
        }
        if bytes.len() < 20 {
            return Err(fail("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(fail("checksum mismatch (file is corrupt or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let truncated = || fail("truncated".into());
        let len = r.u64().ok_or_else(truncated)? as usize;
        let json = r.take(len).ok_or_else(truncated)?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| fail(format!("manifest: {e}")))?;
        let stored_hash = r.u64().ok_or_else(truncated)?;
        if stored_hash != spec_hash(&manifest.spec) {
            return Err(fail("spec hash does not match the stored spec".into()));
        }
        let count = r.u64().ok_or_else(truncated)?;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(truncated)? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(truncated)?)
                .map_err(|_| fail("array name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64().ok_or_else(truncated)? as usize;
            let cols = r.u64().ok_or_else(truncated)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(truncated)?;
            let raw = r.take(n.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let array = Array::from_vec(rows, cols, data)?;
            match name.split_once('/') {
                Some(("param", p)) => {
                    params.insert(p, array)?;
                }
                Some(("adam.m", _)) => m.push(array),
                Some(("adam.v", _)) => v.push(array),
                _ => return Err(fail(format!("unknown array `{name}`"))),
            }
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes after the arrays".into()));
        }
        let optimizer =
            Optimizer::from_state(manifest.optimizer, manifest.learning_rate, manifest.steps, m, v, &params)?;
        let ck = Checkpoint {
            spec: manifest.spec,
            params,
            optimizer,
            train_config: manifest.train_config,
        };
        ck.model().map_err(|e| fail(format!("parameters do not fit the spec: {e}")))?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads a checkpoint and requires its spec to hash to `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: u64) -> Result<Self> {
        let path = path.as_ref();
        let ck = Self::load(path)?;
        if spec_hash(&ck.spec) != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("spec hash {:016x} differs from the expected {expected:016x}", spec_hash(&ck.spec)),
            });
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
