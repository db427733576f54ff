//! Building blocks shared by the policy and the encoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamSet, Real, Tensor, Var};

const INIT_STD: f64 = 0.02;

pub(crate) fn normal_tensor<S: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<S> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| S::of(normal.sample(rng))).collect()).expect("valid shape")
}

fn filled<S: Real>(len: usize, value: f64) -> Tensor<S> {
    Tensor::new(&[1, len], vec![S::of(value); len]).expect("valid shape")
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<S: Real>(set: &mut ParamSet<S>, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let w = set.push(format!("{name}.w"), normal_tensor(&[inputs, outputs], rng));
        let b = set.push(format!("{name}.b"), filled(outputs, 0.0));
        Self { w, b }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, set: &ParamSet<S>, x: Var) -> Result<Var> {
        let w = g.param(set, self.w)?;
        let b = g.param(set, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Real>(set: &mut ParamSet<S>, name: &str, width: usize) -> Self {
        let gain = set.push(format!("{name}.gain"), filled(width, 1.0));
        let bias = set.push(format!("{name}.bias"), filled(width, 0.0));
        Self { gain, bias }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, set: &ParamSet<S>, x: Var) -> Result<Var> {
        let gain = g.param(set, self.gain)?;
        let bias = g.param(set, self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-norm transformer block: attention then a relu MLP, both residual.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    ln_attn: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln_mlp: LayerNorm,
    fc: Linear,
    out: Linear,
    width: usize,
}

impl Block {
    pub fn new<S: Real>(set: &mut ParamSet<S>, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln_attn: LayerNorm::new(set, &format!("{name}.ln_attn"), width),
            qkv: Linear::new(set, &format!("{name}.qkv"), width, 3 * width, rng),
            proj: Linear::new(set, &format!("{name}.proj"), width, width, rng),
            ln_mlp: LayerNorm::new(set, &format!("{name}.ln_mlp"), width),
            fc: Linear::new(set, &format!("{name}.fc"), width, 4 * width, rng),
            out: Linear::new(set, &format!("{name}.out"), 4 * width, width, rng),
            width,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        set: &ParamSet<S>,
        x: Var,
        segments: &[(usize, usize)],
        heads: usize,
        causal: bool,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, set, x)?;
        let qkv = self.qkv.forward(g, set, h)?;
        let q = g.slice_cols(qkv, 0, self.width)?;
        let k = g.slice_cols(qkv, self.width, self.width)?;
        let v = g.slice_cols(qkv, 2 * self.width, self.width)?;
        let a = g.attention(q, k, v, segments, heads, causal)?;
        let a = self.proj.forward(g, set, a)?;
        let a = g.dropout(a, dropout)?;
        let x = g.add(x, a)?;
        let h = self.ln_mlp.forward(g, set, x)?;
        let h = self.fc.forward(g, set, h)?;
        let h = g.relu(h)?;
        let h = self.out.forward(g, set, h)?;
        let h = g.dropout(h, dropout)?;
        g.add(x, h)
    }
}
