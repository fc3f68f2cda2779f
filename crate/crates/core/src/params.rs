//! Named parameter storage, per-tape binding and checkpoint files.
//!
//! A checkpoint is a pair of files: `<stem>.bin` holding every tensor in
//! insertion order using the tensor encoding, and `<stem>.json` mapping
//! each name to its byte offset and shape, plus free-form metadata.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        let (k, v) = self.params.get_index(i).expect("param index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor {
        self.params.get_index_mut(i).expect("param index").1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }

    /// Dense layer `name.w: [fan_in, fan_out]` (scaled normal) and `name.b` (zeros).
    pub fn init_linear(&mut self, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(format!("{name}.w"), rng.normal_tensor(&[fan_in, fan_out], std));
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_normal(&mut self, rng: &mut Rng, name: &str, shape: &[usize], std: f64) {
        self.insert(name, rng.normal_tensor(shape, std));
    }

    pub fn save(&self, dir: &Path, stem: &str, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            entries.push(IndexEntry {
                name: name.clone(),
                offset: payload.len() as u64,
                shape: t.shape().to_vec(),
            });
            t.write_to(&mut payload)?;
        }
        let index = CheckpointIndex {
            format: "mainet-checkpoint-v1".into(),
            params: entries,
            meta,
        };
        fs::write(dir.join(format!("{stem}.bin")), payload)?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&index)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, serde_json::Value)> {
        let payload = fs::read(dir.join(format!("{stem}.bin")))?;
        let index: CheckpointIndex =
            serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        let mut store = ParamStore::new();
        for e in index.params {
            let start = e.offset as usize;
            if start > payload.len() {
                return Err(Error::Malformed(format!("offset of `{}` past end of payload", e.name)));
            }
            let t = Tensor::read_from(&mut Cursor::new(&payload[start..]))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Malformed(format!(
                    "`{}`: index shape {:?} but payload shape {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            store.insert(e.name, t);
        }
        Ok((store, index.meta))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    params: Vec<IndexEntry>,
    meta: serde_json::Value,
}

/// Parameters placed on one tape. Leaves are created on first use, so a
/// forward pass only pays for (and only produces gradients for) the
/// blocks it touches.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Binding whose parameters are recorded as constants.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = self.store.by_index(i).1.clone();
        let v = if self.trainable {
            tape.leaf(t)
        } else {
            tape.constant(t)
        };
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Uses `var` in place of the stored value of `name` (gradient checks
    /// route a probed tensor through the full model this way).
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        self.vars[i] = Some(var);
        Ok(())
    }

    /// Adds this tape's parameter gradients into `acc`.
    pub fn accumulate(&self, grads: &Grads, acc: &mut GradStore) {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.get(*v) {
                    acc.add(i, &g);
                }
            }
        }
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.store.index_of(name).and_then(|i| self.vars[i])
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn add(&mut self, i: usize, g: &Tensor) {
        match &mut self.grads[i] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.grads[i].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
