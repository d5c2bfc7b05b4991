//! Parameter registry and its on-disk form.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::array::{Array, Float};
use super::tape::{ParamId, Tape, Var};
use crate::error::{Error, Result};

/// Optimizer group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Main,
    /// Factorized-density parameters, trained with their own learning rate.
    Aux,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Array<T>,
    pub group: Group,
    pub decay: bool,
    pub frozen: bool,
}

/// Named parameters with stable ids in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>, group: Group) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            decay: false,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0 as usize]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0 as usize]
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.entries[id.0 as usize].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Places a parameter on the tape; frozen parameters become constants.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        let e = &self.entries[id.0 as usize];
        tape.param(id, &e.value, !e.frozen)
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
        }
    }

    pub fn set_decay(&mut self, prefix: &str, decay: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.decay = decay;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    group: e.group,
                    decay: e.decay,
                    frozen: e.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies values for every name present in both stores.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(id) = other.id(&e.name) {
                let v = other.value(id);
                if v.shape() == e.value.shape() {
                    e.value = v.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Flat little-endian binary: per record `id u32, ndim u32, dims u32..., f32 values`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4 + 16 * self.len());
        for (i, e) in self.entries.iter().enumerate() {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.value.data() {
                out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        out
    }

    /// Overwrites values from [`Self::to_bytes`] output; names come from `self`.
    pub fn read_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = Reader { b: bytes, pos: 0 };
        let mut seen = 0;
        while r.pos < bytes.len() {
            let id = r.u32()? as usize;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f32().map(|v| T::of(v as f64))).collect::<Result<Vec<_>>>()?;
            let e = self
                .entries
                .get_mut(id)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter id {id}")))?;
            if e.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    e.name,
                    e.value.shape(),
                    shape
                )));
            }
            e.value = Array::new(&shape, data)?;
            seen += 1;
        }
        if seen != self.entries.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {seen}", self.entries.len())));
        }
        Ok(())
    }

    pub fn names(&self) -> BTreeMap<String, u32> {
        self.by_name.iter().map(|(k, v)| (k.clone(), v.0)).collect()
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .b
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Truncated(format!("parameter binary ends at byte {}", self.b.len())))?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// JSON side of a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub params: BTreeMap<String, u32>,
    pub sha256: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint<T: Float>(store: &ParamStore<T>, stem: &Path, extra: serde_json::Value) -> Result<()> {
    let bytes = store.to_bytes();
    let manifest = Manifest {
        params: store.names(),
        sha256: sha256_hex(&bytes),
        extra,
    };
    std::fs::write(stem.with_extension("bin"), &bytes)?;
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a checkpoint into `store`, whose names must match the manifest.
pub fn load_checkpoint<T: Float>(store: &mut ParamStore<T>, stem: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = std::fs::read(stem.with_extension("bin"))?;
    let found = sha256_hex(&bytes);
    if found != manifest.sha256 {
        return Err(Error::HashMismatch(format!("expected {}, binary hashes to {found}", manifest.sha256)));
    }
    if manifest.params != store.names() {
        return Err(Error::Checkpoint("parameter names differ from the model".into()));
    }
    store.read_bytes(&bytes)?;
    Ok(manifest)
}

/// Uniform in `[-bound, bound]` with `bound = 1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Float>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Array<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Array::new(shape, data).unwrap()
}
