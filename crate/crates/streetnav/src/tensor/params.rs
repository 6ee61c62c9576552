//! Named parameter storage, the Adam optimizer, checkpoint files, and the
//! lock-free shared store used for asynchronous training.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{numel, Tape, Tensor, TensorError, TensorResult};

/// Adam hyperparameters. The learning rate is supplied per call because the
/// models wire different rates; the moment decays and epsilon default to
/// the optimizer's standard constants.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Insertion-ordered map of named parameter tensors with per-parameter Adam
/// moments and a shared step counter.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<f64>,
    ) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.into()));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::BadLength {
                op: "param",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        let n = data.len();
        self.index.insert(name.into(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(())
    }

    /// Inserts a parameter initialized uniformly on `[-bound, bound]`.
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<(), TensorError> {
        let data = (0..numel(shape))
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, shape, data)
    }

    /// Inserts an all-zero parameter.
    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<(), TensorError> {
        self.insert(name, shape, vec![0.0; numel(shape)])
    }

    pub fn shape(&self, name: &str) -> Result<&[usize], TensorError> {
        self.entry(name).map(|e| e.shape.as_slice())
    }

    pub fn values(&self, name: &str) -> Result<&[f64], TensorError> {
        self.entry(name).map(|e| e.data.as_slice())
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64], TensorError> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.into()))?;
        Ok(&mut self.entries[idx].data)
    }

    fn entry(&self, name: &str) -> Result<&ParamEntry, TensorError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| TensorError::UnknownParam(name.into()))
    }

    /// Binds the store's parameters onto a fresh tape for one
    /// forward/backward pass.
    pub fn bind(&self, tape: &Tape) -> Binding {
        Binding {
            tape: tape.clone(),
            bound: Vec::new(),
        }
    }

    /// Places every parameter on the tape as a constant: forwards built
    /// from these record no backward closures, which is what evaluation
    /// rollouts want.
    pub fn constants_on(&self, tape: &Tape) -> Result<ParamTensors, TensorError> {
        let mut map = HashMap::new();
        for e in &self.entries {
            map.insert(e.name.clone(), tape.constant(&e.shape, e.data.clone())?);
        }
        Ok(map)
    }

    /// All parameter values concatenated in insertion order (the flat
    /// vector consumed by `tensors_from_flat`).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_params());
        for e in &self.entries {
            out.extend_from_slice(&e.data);
        }
        out
    }

    /// Reconstructs every parameter as a view into one flat leaf tensor,
    /// preserving names and shapes. This is the bridge that lets a single
    /// finite-difference sweep cover a whole model's parameters.
    pub fn tensors_from_flat(&self, flat: &Tensor) -> Result<ParamTensors, TensorError> {
        if flat.len() != self.total_params() {
            return Err(TensorError::BadLength {
                op: "tensors_from_flat",
                len: flat.len(),
                shape: vec![self.total_params()],
            });
        }
        let mut map = HashMap::new();
        let mut at = 0usize;
        for e in &self.entries {
            let n = e.data.len();
            let t = flat.slice_range(at, n)?.reshape(&e.shape)?;
            map.insert(e.name.clone(), t);
            at += n;
        }
        Ok(map)
    }

    /// Standard Adam with bias correction over gradients aligned with the
    /// store's parameter order (as produced by [`Binding::collect_grads`]).
    pub fn adam_update(
        &mut self,
        grads: &HashMap<String, Vec<f64>>,
        lr: f64,
        config: AdamConfig,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for entry in &mut self.entries {
            let Some(g) = grads.get(&entry.name) else {
                continue;
            };
            if g.len() != entry.data.len() {
                return Err(TensorError::BadLength {
                    op: "adam_update",
                    len: g.len(),
                    shape: entry.shape.clone(),
                });
            }
            for i in 0..g.len() {
                entry.m[i] = config.beta1 * entry.m[i] + (1.0 - config.beta1) * g[i];
                entry.v[i] = config.beta2 * entry.v[i] + (1.0 - config.beta2) * g[i] * g[i];
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                entry.data[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }
}

/// Named tape tensors for one forward pass: each model forward is a pure
/// function of these.
pub type ParamTensors = HashMap<String, Tensor>;

/// Fetches a named tensor out of a [`ParamTensors`] map.
pub fn param<'a>(params: &'a ParamTensors, name: &str) -> Result<&'a Tensor, TensorError> {
    params
        .get(name)
        .ok_or_else(|| TensorError::UnknownParam(name.into()))
}

/// Tape-bound parameter leaves for one training step. Remembers which leaf
/// came from which parameter so gradients can be gathered back by name.
pub struct Binding {
    tape: Tape,
    bound: Vec<(String, Tensor)>,
}

impl Binding {
    /// A leaf tensor carrying the parameter's current values.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> TensorResult {
        let entry = store.entry(name)?;
        let t = self.tape.leaf(&entry.shape, entry.data.clone())?;
        self.bound.push((entry.name.clone(), t.clone()));
        Ok(t)
    }

    /// Binds every parameter in the store and returns them by name.
    pub fn all_params(&mut self, store: &ParamStore) -> Result<ParamTensors, TensorError> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut map = HashMap::new();
        for name in names {
            map.insert(name.clone(), self.param(store, &name)?);
        }
        Ok(map)
    }

    /// Gradients for every bound parameter, keyed by name. Parameters the
    /// loss never touched get zeros.
    pub fn collect_grads(&self, grads: &super::Gradients) -> HashMap<String, Vec<f64>> {
        self.bound
            .iter()
            .map(|(name, t)| (name.clone(), grads.get_or_zeros(t)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Lock-free shared store for asynchronous (Hogwild-style) training.
// ---------------------------------------------------------------------------

struct SharedEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<AtomicU64>,
    m: Vec<AtomicU64>,
    v: Vec<AtomicU64>,
}

fn to_atomic(values: &[f64]) -> Vec<AtomicU64> {
    values.iter().map(|&v| AtomicU64::new(v.to_bits())).collect()
}

/// Parameter store shared by multiple trainer threads without locks.
///
/// Every element is an atomic word read and written with relaxed ordering:
/// concurrent read-modify-write cycles may lose each other's updates, which
/// is the documented training contract, but each access is a whole-word
/// atomic so no torn or undefined values can be observed.
pub struct SharedParamStore {
    entries: Vec<SharedEntry>,
    step: AtomicU64,
}

impl SharedParamStore {
    pub fn from_store(store: &ParamStore) -> SharedParamStore {
        SharedParamStore {
            entries: store
                .entries
                .iter()
                .map(|e| SharedEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: to_atomic(&e.data),
                    m: to_atomic(&e.m),
                    v: to_atomic(&e.v),
                })
                .collect(),
            step: AtomicU64::new(store.step),
        }
    }

    /// Unsynchronized snapshot of the current parameter values.
    pub fn snapshot(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let data = e
                .data
                .iter()
                .map(|a| f64::from_bits(a.load(Ordering::Relaxed)))
                .collect();
            store.insert(&e.name, &e.shape, data).expect("unique names");
            let idx = store.entries.len() - 1;
            store.entries[idx].m = e
                .m
                .iter()
                .map(|a| f64::from_bits(a.load(Ordering::Relaxed)))
                .collect();
            store.entries[idx].v = e
                .v
                .iter()
                .map(|a| f64::from_bits(a.load(Ordering::Relaxed)))
                .collect();
        }
        store.step = self.step.load(Ordering::Relaxed);
        store
    }

    /// One Adam step applied directly to the shared values. Multiple
    /// workers may call this concurrently; updates interleave without
    /// synchronization.
    pub fn adam_update(
        &self,
        grads: &HashMap<String, Vec<f64>>,
        lr: f64,
        config: AdamConfig,
    ) -> Result<(), TensorError> {
        let t = self.step.fetch_add(1, Ordering::Relaxed) + 1;
        let bc1 = 1.0 - config.beta1.powi(t as i32);
        let bc2 = 1.0 - config.beta2.powi(t as i32);
        for entry in &self.entries {
            let Some(g) = grads.get(&entry.name) else {
                continue;
            };
            if g.len() != entry.data.len() {
                return Err(TensorError::BadLength {
                    op: "adam_update",
                    len: g.len(),
                    shape: entry.shape.clone(),
                });
            }
            for i in 0..g.len() {
                let m = config.beta1 * f64::from_bits(entry.m[i].load(Ordering::Relaxed))
                    + (1.0 - config.beta1) * g[i];
                let v = config.beta2 * f64::from_bits(entry.v[i].load(Ordering::Relaxed))
                    + (1.0 - config.beta2) * g[i] * g[i];
                entry.m[i].store(m.to_bits(), Ordering::Relaxed);
                entry.v[i].store(v.to_bits(), Ordering::Relaxed);
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + config.eps);
                let old = f64::from_bits(entry.data[i].load(Ordering::Relaxed));
                entry.data[i].store((old - update).to_bits(), Ordering::Relaxed);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file format.
// ---------------------------------------------------------------------------

/// Magic bytes opening a parameter checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDCK";

/// Writes the store as `TDCK` followed by one record per parameter:
/// u32 name length, name bytes, u32 rank, u32 dims, then the float64
/// little-endian payload.
pub fn save_checkpoint(store: &ParamStore, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for entry in &store.entries {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
        for &d in &entry.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &entry.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Optimizer moments
/// start fresh.
pub fn load_checkpoint(r: &mut impl Read) -> Result<ParamStore, TensorError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| TensorError::Checkpoint(format!("read failed: {e}")))?;
    if buf.len() < 4 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic (expected TDCK)".into()));
    }
    let mut pos = 4usize;
    let mut store = ParamStore::new();
    let take = |pos: &mut usize, n: usize, buf: &[u8]| -> Result<usize, TensorError> {
        let start = *pos;
        let end = start
            .checked_add(n)
            .ok_or_else(|| TensorError::Checkpoint("record overflows file".into()))?;
        if end > buf.len() {
            return Err(TensorError::Checkpoint("truncated record".into()));
        }
        *pos = end;
        Ok(start)
    };
    while pos < buf.len() {
        let at = take(&mut pos, 4, &buf)?;
        let name_len = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        let at = take(&mut pos, name_len, &buf)?;
        let name = std::str::from_utf8(&buf[at..at + name_len])
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let at = take(&mut pos, 4, &buf)?;
        let rank = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(TensorError::Checkpoint(format!(
                "implausible rank {rank} for `{name}`"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = take(&mut pos, 4, &buf)?;
            shape.push(u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize);
        }
        let n = numel(&shape);
        let at = take(&mut pos, n * 8, &buf)?;
        let data = buf[at..at + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(&name, &shape, data)
            .map_err(|e| TensorError::Checkpoint(format!("{e}")))?;
    }
    Ok(store)
}
