use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Init, VarBuilder};

use crate::error::Result;

/// Affine layer that folds all leading axes into one GEMM.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    #[cfg(test)]
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = dims[dims.len() - 1];
        let rows = x.elem_count() / in_dim;
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().expect("rank >= 1") = self.weight.dim(0)?;
        y.reshape(out)
    }
}

pub(crate) fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    Ok(Linear {
        weight: vb.get_with_hints((out_dim, in_dim), "weight", Init::Const(0.0))?,
        bias: vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?,
    })
}

/// Layer norm built from primitive ops so it is differentiable end to end.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            gamma: vb.get_with_hints(dim, "gamma", Init::Const(1.0))?,
            beta: vb.get_with_hints(dim, "beta", Init::Const(0.0))?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            q: linear(dim, dim, vb.pp("q"))?,
            k: linear(dim, dim, vb.pp("k"))?,
            v: linear(dim, dim, vb.pp("v"))?,
            o: linear(dim, dim, vb.pp("o"))?,
            heads,
        })
    }

    /// `key_bias` is `[batch, 1, 1, keys]`, zero for real keys and a large
    /// negative value for padding.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (b, nq, dim) = queries.dims3()?;
        let nk = keys.dim(1)?;
        let dh = dim / self.heads;
        let split = |x: Tensor, n: usize| -> candle_core::Result<Tensor> {
            x.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(queries)?, nq)?;
        let k = split(self.k.forward(keys)?, nk)?;
        let v = split(self.v.forward(keys)?, nk)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?.broadcast_add(key_bias)?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, dim))?;
        Ok(self.o.forward(&out)?)
    }
}

/// Softmax over the last axis from primitive ops. The fused kernel in
/// `candle_nn::ops::softmax_last_dim` has no backward pass.
fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            up: linear(dim, hidden, vb.pp("up"))?,
            down: linear(hidden, dim, vb.pp("down"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.down.forward(&self.up.forward(x)?.relu()?)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(dim: usize, heads: usize, ffn: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(dim, vb.pp("norm_attn"))?,
            attn: MultiHeadAttention::new(dim, heads, vb.pp("attn"))?,
            norm_ff: LayerNorm::new(dim, vb.pp("norm_ff"))?,
            ff: FeedForward::new(dim, ffn, vb.pp("ff"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let h = self.norm_attn.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, bias)?)?;
        let h = self.norm_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(dim: usize, heads: usize, ffn: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(dim, vb.pp("norm_self"))?,
            self_attn: MultiHeadAttention::new(dim, heads, vb.pp("self_attn"))?,
            norm_cross: LayerNorm::new(dim, vb.pp("norm_cross"))?,
            cross_attn: MultiHeadAttention::new(dim, heads, vb.pp("cross_attn"))?,
            norm_ff: LayerNorm::new(dim, vb.pp("norm_ff"))?,
            ff: FeedForward::new(dim, ffn, vb.pp("ff"))?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        self_bias: &Tensor,
        memory: &Tensor,
        memory_bias: &Tensor,
    ) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, self_bias)?)?;
        let h = self.norm_cross.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory, memory_bias)?)?;
        let h = self.norm_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// `[batch, 1, 1, len]` additive attention bias from sequence lengths.
pub(crate) fn key_bias(lengths: &[usize], len: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(lengths.len() * len);
    for &l in lengths {
        data.extend((0..len).map(|i| if i < l { 0.0f32 } else { -1e9 }));
    }
    Ok(Tensor::from_vec(data, (lengths.len(), 1, 1, len), device)?.to_dtype(dtype)?)
}
