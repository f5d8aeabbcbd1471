//! Named trainable arrays, Adam, snapshots and checkpoint files.

use std::collections::HashMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array2;

/// Index of an entry inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Array2,
    grad: Array2,
    m: Array2,
    v: Array2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        AdamConfig { lr, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("adam lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} must be in [0,1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Flat, ordered collection of every trainable array in a model.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
    step_count: u64,
}

/// Frozen copy of values, optimizer moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    names: Vec<String>,
    values: Vec<Array2>,
    m: Vec<Array2>,
    v: Vec<Array2>,
    step_count: u64,
}

impl ParamSnapshot {
    /// Stable fingerprint of the snapshot's contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.step_count.hash(&mut h);
        for (i, name) in self.names.iter().enumerate() {
            name.hash(&mut h);
            for arr in [&self.values[i], &self.m[i], &self.v[i]] {
                arr.shape().hash(&mut h);
                for x in arr.data() {
                    x.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Layout(format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            grad: Array2::zeros(r, c),
            m: Array2::zeros(r, c),
            v: Array2::zeros(r, c),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array2 {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2 {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2 {
        &self.entries[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Total scalar count over all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Sum of scalar counts for entries whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Array2) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.grad.shape() != g.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{}: {:?} vs {:?}", e.name, e.grad.shape(), g.shape()),
            ));
        }
        e.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// One Adam step with bias correction. The L2 term `weight_decay * value` is
    /// added to the gradient before the moment updates. Gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(bad) = self.entries.iter().find(|e| !e.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let n = e.value.len();
            let (value, grad) = (e.value.data_mut(), e.grad.data_mut());
            let (m, v) = (e.m.data_mut(), e.v.data_mut());
            for i in 0..n {
                let g = grad[i] + cfg.weight_decay * value[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                grad[i] = 0.0;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            names: self.entries.iter().map(|e| e.name.clone()).collect(),
            values: self.entries.iter().map(|e| e.value.clone()).collect(),
            m: self.entries.iter().map(|e| e.m.clone()).collect(),
            v: self.entries.iter().map(|e| e.v.clone()).collect(),
            step_count: self.step_count,
        }
    }

    /// Restores values, optimizer moments and step count; clears gradients.
    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.names.len() != self.entries.len() {
            return Err(Error::Layout(format!(
                "snapshot has {} entries, store has {}",
                snap.names.len(),
                self.entries.len()
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.name != snap.names[i] || e.value.shape() != snap.values[i].shape() {
                return Err(Error::Layout(format!(
                    "entry {i}: `{}` {:?} vs snapshot `{}` {:?}",
                    e.name,
                    e.value.shape(),
                    snap.names[i],
                    snap.values[i].shape()
                )));
            }
        }
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.value.clone_from(&snap.values[i]);
            e.m.clone_from(&snap.m[i]);
            e.v.clone_from(&snap.v[i]);
            e.grad.fill(0.0);
        }
        self.step_count = snap.step_count;
        Ok(())
    }

    /// Fingerprint of the full optimization state (values, moments, step count).
    pub fn fingerprint(&self) -> u64 {
        self.snapshot().fingerprint()
    }

    /// Writes `manifest.json` and `params.bin` (little-endian f64 values) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut bytes = Vec::with_capacity(self.num_scalars() * 8);
        for e in &self.entries {
            entries.push(ManifestEntry {
                name: e.name.clone(),
                rows: e.value.rows(),
                cols: e.value.cols(),
                offset: bytes.len() / 8,
            });
            for x in e.value.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: "aread-checkpoint-v1".into(),
            dtype: "f64-le".into(),
            step_count: self.step_count,
            entries,
            extra,
        };
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join("params.bin");
        let mut f = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    /// Loads values saved by [`save_checkpoint`](Self::save_checkpoint) into a store
    /// with the same layout. Returns the manifest's `extra` payload.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<serde_json::Value> {
        let manifest = read_manifest(dir)?;
        let bpath = dir.join("params.bin");
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if manifest.entries.len() != self.entries.len() {
            return Err(Error::Layout(format!(
                "checkpoint has {} entries, model has {}",
                manifest.entries.len(),
                self.entries.len()
            )));
        }
        for (e, me) in self.entries.iter_mut().zip(&manifest.entries) {
            if e.name != me.name || e.value.shape() != (me.rows, me.cols) {
                return Err(Error::Layout(format!(
                    "`{}` {:?} vs checkpoint `{}` ({}, {})",
                    e.name,
                    e.value.shape(),
                    me.name,
                    me.rows,
                    me.cols
                )));
            }
            let start = me.offset * 8;
            let end = start + me.rows * me.cols * 8;
            let chunk = bytes
                .get(start..end)
                .ok_or_else(|| Error::Layout(format!("params.bin truncated at `{}`", me.name)))?;
            for (dst, src) in e.value.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
                *dst = f64::from_le_bytes(src.try_into().expect("8-byte chunk"));
            }
            e.grad.fill(0.0);
            e.m.fill(0.0);
            e.v.fill(0.0);
        }
        self.step_count = manifest.step_count;
        Ok(manifest.extra)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    step_count: u64,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Reads only the `extra` payload of a checkpoint manifest.
pub fn read_checkpoint_extra(dir: &Path) -> Result<serde_json::Value> {
    Ok(read_manifest(dir)?.extra)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParameterStore, ParamId) {
        let mut s = ParameterStore::new();
        let id = s.add("w", Array2::filled(1, 1, w)).unwrap();
        (s, id)
    }

    #[test]
    fn adam_first_step_hand_evaluated() {
        let (mut s, id) = scalar_store(1.0);
        s.accumulate_grad(id, &Array2::filled(1, 1, 1.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        s.adam_step(&cfg).unwrap();
        // m̂ = 1, v̂ = 1 at t = 1.
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((s.value(id).get(0, 0) - expected).abs() < 1e-15);
        assert_eq!(s.grad(id).get(0, 0), 0.0);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let (mut s, id) = scalar_store(0.37);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        s.adam_step(&cfg).unwrap();
        s.adam_step(&cfg).unwrap();
        assert_eq!(s.value(id).get(0, 0), 0.37);
    }

    /// Independent scalar Adam used as a reference trace.
    fn scalar_adam_oracle(mut w: f64, grads: &[f64], lr: f64, wd: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut trace = Vec::new();
        for (t, g0) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            let g = g0 + wd * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            w -= lr * mh / (vh.sqrt() + eps);
            trace.push(w);
        }
        trace
    }

    #[test]
    fn adam_matches_scalar_oracle_trace() {
        let grads = [0.5, 0.5, -0.2, 1.3];
        let oracle = scalar_adam_oracle(2.0, &grads, 0.05, 1e-3);
        let (mut s, id) = scalar_store(2.0);
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 1e-3,
            ..AdamConfig::default()
        };
        for (g, want) in grads.iter().zip(&oracle) {
            s.accumulate_grad(id, &Array2::filled(1, 1, *g)).unwrap();
            s.adam_step(&cfg).unwrap();
            assert!((s.value(id).get(0, 0) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let (mut s, id) = scalar_store(1.0);
        s.accumulate_grad(id, &Array2::filled(1, 1, f64::NAN)).unwrap();
        let err = s.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    }

    #[test]
    fn snapshot_restore_bitwise_and_idempotent() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Array2::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.4]])).unwrap();
        s.add("b", Array2::filled(1, 3, 0.5)).unwrap();
        s.accumulate_grad(a, &Array2::filled(2, 2, 0.7)).unwrap();
        s.adam_step(&AdamConfig::default()).unwrap();
        let snap = s.snapshot();
        let fp = s.fingerprint();
        for id in s.ids().collect::<Vec<_>>() {
            s.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 1.234);
            s.accumulate_grad(id, &Array2::filled(s.value(id).rows(), s.value(id).cols(), 1.0))
                .unwrap();
        }
        s.adam_step(&AdamConfig::default()).unwrap();
        s.restore(&snap).unwrap();
        assert_eq!(s.snapshot(), snap);
        assert_eq!(s.fingerprint(), fp);
        s.restore(&snap).unwrap();
        assert_eq!(s.snapshot(), snap);
    }

    #[test]
    fn restore_rejects_other_layout() {
        let (s1, _) = scalar_store(1.0);
        let mut s2 = ParameterStore::new();
        s2.add("x", Array2::zeros(2, 2)).unwrap();
        assert!(matches!(s2.restore(&s1.snapshot()), Err(Error::Layout(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParameterStore::new();
        s.add("emb", Array2::from_rows(&[vec![1.5, -2.25], vec![1e-300, 3.0]])).unwrap();
        s.add("bias", Array2::filled(1, 2, -0.125)).unwrap();
        s.save_checkpoint(dir.path(), serde_json::json!({"k": 1})).unwrap();

        let raw = std::fs::read(dir.path().join("params.bin")).unwrap();
        assert_eq!(raw.len(), 6 * 8);
        assert_eq!(&raw[..8], &1.5f64.to_le_bytes());

        let mut t = ParameterStore::new();
        t.add("emb", Array2::zeros(2, 2)).unwrap();
        t.add("bias", Array2::zeros(1, 2)).unwrap();
        let extra = t.load_checkpoint(dir.path()).unwrap();
        assert_eq!(extra["k"], 1);
        for id in s.ids() {
            assert_eq!(s.value(id), t.value(id));
        }
    }
}
