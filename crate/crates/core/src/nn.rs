//! Dense layers and small MLPs built on the tape.

use rand::Rng as _;

use crate::error::Result;
use crate::graph::{Tape, Var};
use crate::params::{ParamId, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Array2;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Registers `{name}.w` (`input x output`, He-uniform) and `{name}.b` (zeros).
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Linear> {
        let bound = (6.0 / input as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let weight = store.add(format!("{name}.w"), Array2::from_vec(input, output, w)?)?;
        let bias = store.add(format!("{name}.b"), Array2::zeros(1, output))?;
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    pub fn num_params(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// Two dense layers, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        input: usize,
        hidden: (usize, usize),
    ) -> Result<Mlp2> {
        Ok(Mlp2 {
            first: Linear::new(store, rng, &format!("{name}.fc1"), input, hidden.0)?,
            second: Linear::new(store, rng, &format!("{name}.fc2"), hidden.0, hidden.1)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.second.forward(tape, store, h)?;
        Ok(tape.relu(h))
    }

    pub fn output(&self) -> usize {
        self.second.output
    }

    pub fn num_params(&self) -> usize {
        self.first.num_params() + self.second.num_params()
    }
}
