//! Parameterized building blocks of a post-norm transformer encoder.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, SeqLayout, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Weights drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Weights drawn from `normal(0, std)`.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// `y = x W (+ b)` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[in_dim, out_dim], in_dim, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Lookup table initialized from `normal(0, 0.02)`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        size: usize,
        dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Ok(Self {
            table: store.add(format!("{name}.table"), normal_init(&[size, dim], 0.02, rng))?,
            size,
            dim,
        })
    }

    pub fn lookup<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        bags: Arc<crate::graph::Bags<T>>,
    ) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding_bag(t, bags)
    }
}

/// Dropout probability plus the generator that draws masks. `None` means
/// evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

fn maybe_dropout<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: f64,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    match rng {
        Some(r) => g.dropout(x, p, &mut **r),
        None => Ok(x),
    }
}

/// One post-norm encoder layer: self-attention block, then feed-forward block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(crate::error::shape_err(
                "encoder layer",
                format!("d_model {d_model} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.attn.query"), d_model, d_model, true, rng)?,
            key: Linear::new(store, &format!("{name}.attn.key"), d_model, d_model, true, rng)?,
            value: Linear::new(store, &format!("{name}.attn.value"), d_model, d_model, true, rng)?,
            output: Linear::new(store, &format!("{name}.attn.output"), d_model, d_model, true, rng)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn.norm"), d_model)?,
            ff_in: Linear::new(store, &format!("{name}.ffn.in"), d_model, ffn_dim, true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ffn.out"), ffn_dim, d_model, true, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ffn.norm"), d_model)?,
            heads,
            dropout,
        })
    }

    pub fn num_params(d_model: usize, ffn_dim: usize) -> usize {
        4 * Linear::num_params(d_model, d_model, true)
            + Linear::num_params(d_model, ffn_dim, true)
            + Linear::num_params(ffn_dim, d_model, true)
            + 2 * 2 * d_model
    }

    /// `LayerNorm(x + Dropout(MultiHeadAttention(x)))`.
    pub fn attention_block<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        layout: &Arc<SeqLayout>,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        Ok(self.attention_block_traced(g, x, layout, rng)?.0)
    }

    /// Like [`EncoderLayer::attention_block`], also returning the raw
    /// attention node so callers can inspect its weights.
    pub fn attention_block_traced<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        layout: &Arc<SeqLayout>,
        rng: &mut DropoutRng<'_>,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let attn = g.attention(q, k, v, layout, self.heads)?;
        let o = self.output.forward(g, attn)?;
        let o = maybe_dropout(g, o, self.dropout, rng)?;
        let sum = g.add(x, o)?;
        Ok((self.attn_norm.forward(g, sum)?, attn))
    }

    /// `LayerNorm(x + Dropout(W2 ReLU(W1 x)))`.
    pub fn ffn_block<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let h = self.ff_in.forward(g, x)?;
        let h = g.relu(h);
        let o = self.ff_out.forward(g, h)?;
        let o = maybe_dropout(g, o, self.dropout, rng)?;
        let sum = g.add(x, o)?;
        self.ff_norm.forward(g, sum)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        layout: &Arc<SeqLayout>,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let x = self.attention_block(g, x, layout, rng)?;
        self.ffn_block(g, x, rng)
    }
}
