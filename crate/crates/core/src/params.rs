//! Named parameter tensors, their binding onto a tape, and the checkpoint
//! container.
//!
//! Checkpoint layout: magic `WCKP`, u32 format version, u32 manifest length,
//! JSON manifest `{version, entries: [{name, shape, offset}]}`, then each
//! tensor as little-endian f32 in manifest order. `offset` counts f32 values
//! from the start of the data block.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{Tape, Tensor, Var};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"WCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` into this store.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Puts every tensor on `tape`; names accepted by `trainable` become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: CHECKPOINT_VERSION,
            entries,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + manifest.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let parse = |offset: usize, msg: &str| Error::Parse {
            offset,
            msg: msg.to_string(),
        };
        if buf.len() < 12 || &buf[..4] != MAGIC {
            return Err(parse(0, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let mlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        if buf.len() < 12 + mlen {
            return Err(parse(12, "manifest truncated"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&buf[12..12 + mlen]).map_err(|e| parse(12, &format!("bad manifest: {e}")))?;
        let data = &buf[12 + mlen..];
        let mut tensors = BTreeMap::new();
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset * 4, (e.offset + n) * 4);
            if end > data.len() {
                return Err(parse(12 + mlen + data.len(), &format!("tensor {:?} truncated", e.name)));
            }
            let vals = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, vals)?);
        }
        Ok(Self { tensors })
    }

    /// Rounds every value through f32, matching what a checkpoint stores.
    pub fn quantized(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x as f32 as f64)))
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Parameter names resolved to vars on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} not bound")))
    }

    /// Replaces the var bound under `name` (used to probe one group).
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Uniform Glorot initialization for a tensor with the given fans.
pub fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-a..a))
}

/// `[out, in]` weight plus zero `[out]` bias under `prefix.w` / `prefix.b`.
pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) {
    store.insert(format!("{prefix}.w"), glorot(rng, &[cout, cin], cin, cout));
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![cout]));
}

/// `[out, in, k, k]` kernel plus zero bias.
pub fn init_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k;
    // He-style scaling for ReLU stacks
    let a = (6.0 / fan_in as f64).sqrt();
    store.insert(
        format!("{prefix}.w"),
        Tensor::from_fn(vec![cout, cin, k, k], |_| rng.gen_range(-a..a)),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![cout]));
}

/// Per-pixel linear map of a `[c,h,w]` map with `prefix.w: [out,c]` and
/// `prefix.b: [out]`.
pub fn linear_map(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("linear_map", &s, &[0, 0, 0]));
    }
    let w = bound.get(&format!("{prefix}.w"))?;
    let b = bound.get(&format!("{prefix}.b"))?;
    let cout = tape.shape(w)[0];
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    let y = tape.matmul(w, flat)?;
    let b2 = tape.reshape(b, &[cout, 1])?;
    let y = tape.add(y, b2)?;
    tape.reshape(y, &[cout, s[1], s[2]])
}

/// Row-vector linear layer: `x: [n, in] → [n, out]`.
pub fn linear_rows(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.w"))?;
    let b = bound.get(&format!("{prefix}.b"))?;
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.add(y, b)
}
