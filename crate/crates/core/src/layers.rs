//! Parameter bundles shared by the encoder, decoder and heads.

use rand::Rng;

use crate::numerics::{xavier, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

/// Fully-connected map `x · W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let y = t.matmul(x, t.param(s, self.weight))?;
        t.add_row(y, t.param(s, self.bias))
    }

    pub fn zero(&self, s: &mut ParamStore) {
        s.get_mut(self.weight).data_mut().fill(0.0);
        s.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled([width], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([width]));
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        t.layer_norm(x, t.param(s, self.gamma), t.param(s, self.beta), LN_EPS)
    }
}
