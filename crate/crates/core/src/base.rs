//! Shared bottom: per-field embeddings followed by a single-gate MMoE layer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::nn::{Linear, Mlp2};
use crate::params::{ParamId, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Array2;

const EMBED_INIT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    /// Embed the domain id as one more field.
    pub domain: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig { dim: 16, domain: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmoeConfig {
    pub experts: usize,
    pub hidden: (usize, usize),
}

impl Default for MmoeConfig {
    fn default() -> Self {
        MmoeConfig {
            experts: 4,
            hidden: (64, 32),
        }
    }
}

impl MmoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.hidden.0 == 0 || self.hidden.1 == 0 {
            return Err(Error::Config("mmoe experts and hidden dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    tables: Vec<ParamId>,
    vocab_sizes: Vec<usize>,
    domain_table: Option<(ParamId, usize)>,
    dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        field_names: &[String],
        vocab_sizes: &[usize],
        num_domains: usize,
        cfg: &EmbeddingConfig,
    ) -> Result<Embedding> {
        if cfg.dim == 0 {
            return Err(Error::Config("embedding dim must be >= 1".into()));
        }
        let mut table = |name: &str, v: usize| {
            let data = (0..v * cfg.dim).map(|_| rng.gen_range(-EMBED_INIT..EMBED_INIT)).collect();
            store.add(name, Array2::from_vec(v, cfg.dim, data)?)
        };
        let mut tables = Vec::with_capacity(vocab_sizes.len());
        for (name, &v) in field_names.iter().zip(vocab_sizes) {
            tables.push(table(&format!("embed.{name}"), v)?);
        }
        let domain_table = if cfg.domain {
            if num_domains == 0 {
                return Err(Error::Config("domain embedding needs at least one domain".into()));
            }
            Some((table("embed.@domain", num_domains)?, num_domains))
        } else {
            None
        };
        Ok(Embedding {
            tables,
            vocab_sizes: vocab_sizes.to_vec(),
            domain_table,
            dim: cfg.dim,
        })
    }

    pub fn output_width(&self) -> usize {
        (self.tables.len() + usize::from(self.domain_table.is_some())) * self.dim
    }

    /// Row `i` is the concatenation of the field embeddings of `batch[i]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, batch: &[&Sample]) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.tables.len());
        for (f, (&table, &vocab)) in self.tables.iter().zip(&self.vocab_sizes).enumerate() {
            let ids: Vec<usize> = batch.iter().map(|s| s.features[f]).collect();
            if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
                return Err(Error::shape(
                    "embed",
                    format!("field {f}: id {bad} >= vocab size {vocab}"),
                ));
            }
            let t = tape.param(store, table);
            parts.push(tape.gather(t, &ids)?);
        }
        if let Some((table, nd)) = self.domain_table {
            let ids: Vec<usize> = batch.iter().map(|s| s.domain).collect();
            if let Some(&bad) = ids.iter().find(|&&d| d >= nd) {
                return Err(Error::shape("embed", format!("domain {bad} >= {nd}")));
            }
            let t = tape.param(store, table);
            parts.push(tape.gather(t, &ids)?);
        }
        tape.concat_cols(&parts)
    }
}

#[derive(Debug, Clone)]
pub struct Mmoe {
    experts: Vec<Mlp2>,
    gate: Linear,
    input: usize,
}

impl Mmoe {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, input: usize, cfg: &MmoeConfig) -> Result<Mmoe> {
        cfg.validate()?;
        let experts = (0..cfg.experts)
            .map(|e| Mlp2::new(store, rng, &format!("mmoe.expert{e}"), input, cfg.hidden))
            .collect::<Result<Vec<_>>>()?;
        let gate = Linear::new(store, rng, "mmoe.gate", input, cfg.experts)?;
        Ok(Mmoe {
            experts,
            gate,
            input,
        })
    }

    pub fn output_width(&self) -> usize {
        self.experts[0].output()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Gate-weighted sum of expert outputs. Also returns the `E x B` gate node.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<(Var, Var)> {
        let (_, w) = tape.value(x).shape();
        if w != self.input {
            return Err(Error::shape("mmoe", format!("input width {w}, expected {}", self.input)));
        }
        let outs = self
            .experts
            .iter()
            .map(|e| e.forward(tape, store, x))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.gate.forward(tape, store, x)?;
        let logits_t = tape.transpose(logits);
        let gate = tape.softmax_columns(logits_t);
        Ok((tape.gate_mix(&outs, gate)?, gate))
    }

    pub fn num_params(&self) -> usize {
        self.experts.iter().map(Mlp2::num_params).sum::<usize>() + self.gate.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn samples() -> Vec<Sample> {
        vec![
            Sample { features: vec![1, 2], domain: 0, label: 1 },
            Sample { features: vec![3, 1], domain: 0, label: 0 },
            Sample { features: vec![1, 2], domain: 1, label: 0 },
        ]
    }

    #[test]
    fn embed_shape_and_identical_rows() {
        let mut store = ParameterStore::new();
        let mut rng = substream(1, "t");
        let names = vec!["user".to_string(), "item".to_string()];
        let cfg = EmbeddingConfig { dim: 3, domain: false };
        let emb = Embedding::new(&mut store, &mut rng, &names, &[4, 3], 1, &cfg).unwrap();
        let s = samples();
        let refs: Vec<&Sample> = s.iter().collect();
        let mut tape = Tape::new();
        let x = emb.forward(&mut tape, &store, &refs).unwrap();
        assert_eq!(tape.value(x).shape(), (3, 6));
        assert_eq!(tape.value(x).row(0), tape.value(x).row(2));

        let bad = Sample { features: vec![9, 0], domain: 0, label: 0 };
        assert!(emb.forward(&mut Tape::new(), &store, &[&bad]).is_err());
    }

    #[test]
    fn single_expert_gate_is_one() {
        let mut store = ParameterStore::new();
        let mut rng = substream(2, "t");
        let m = Mmoe::new(&mut store, &mut rng, 4, &MmoeConfig { experts: 1, hidden: (5, 3) }).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_rows(&[vec![0.1, -0.3, 0.5, 1.0], vec![0.0, 0.2, -0.1, 0.4]]));
        let (out, gate) = m.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(gate).data().iter().all(|&g| g == 1.0));
        let direct = m.experts[0].forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(out), tape.value(direct));
    }

    #[test]
    fn tied_experts_ignore_gate() {
        let mut store = ParameterStore::new();
        let mut rng = substream(3, "t");
        let m = Mmoe::new(&mut store, &mut rng, 4, &MmoeConfig { experts: 3, hidden: (5, 3) }).unwrap();
        for e in 1..3 {
            for (src, dst) in [
                (m.experts[0].first.weight, m.experts[e].first.weight),
                (m.experts[0].first.bias, m.experts[e].first.bias),
                (m.experts[0].second.weight, m.experts[e].second.weight),
                (m.experts[0].second.bias, m.experts[e].second.bias),
            ] {
                let v = store.value(src).clone();
                *store.value_mut(dst) = v;
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_rows(&[vec![0.3, -0.3, 0.8, 1.0], vec![1.0, 0.2, -0.9, 0.4]]));
        let (out, gate) = m.forward(&mut tape, &store, x).unwrap();
        for c in 0..2 {
            let col: f64 = (0..3).map(|r| tape.value(gate).get(r, c)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        let single = m.experts[0].forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(single)) < 1e-12);
    }
}
