//! The denoising network: a transformer encoder over the clean condition and
//! a non-causal decoder over the noised target latents that predicts `y0`.
//!
//! Conditions are encoded once into a [`ConditionMemory`] that can be reused
//! for every solver step. The timestep enters the decoder as a sinusoidal
//! feature passed through a small MLP and added to every position.

mod layers;

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{VarBuilder, VarMap};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{EmbeddingTable, TokenId, MASK_ID};
use crate::error::{Error, Result};
use crate::schedule::sinusoidal_table;

use layers::{key_bias, linear, DecoderLayer, EncoderLayer, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub cond_dropout_p: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    /// Laptop-sized model used by the tests and toy tasks.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 128,
            embed_dim: 32,
            ffn_dim: 512,
            max_len: 32,
            cond_dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.max_len == 0 || self.embed_dim < 2 {
            return Err(Error::invalid(format!("degenerate denoiser config {self:?}")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::invalid("model_dim must be even for sinusoidal features"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(Error::invalid(format!(
                "cond_dropout_p must lie in [0, 1], got {}",
                self.cond_dropout_p
            )));
        }
        Ok(())
    }
}

/// Noised target latents `[batch, len, embed_dim]` with per-sequence
/// lengths and timesteps. Positions at or beyond a sequence's length are
/// padding.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub latents: Tensor,
    pub lengths: Vec<usize>,
    pub timesteps: Vec<usize>,
}

impl LatentBatch {
    pub fn new(latents: Tensor, lengths: Vec<usize>, timesteps: Vec<usize>) -> Result<Self> {
        let (b, n, _) = latents.dims3()?;
        if lengths.len() != b || timesteps.len() != b {
            return Err(Error::invalid(format!(
                "batch of {b} latents with {} lengths and {} timesteps",
                lengths.len(),
                timesteps.len()
            )));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l > n) {
            return Err(Error::invalid(format!("sequence length {l} outside [1, {n}]")));
        }
        Ok(Self {
            latents,
            lengths,
            timesteps,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// `[batch, len]` with 1 at real positions and 0 at padding.
    pub fn padding_mask(&self) -> Result<Tensor> {
        padding_mask(&self.lengths, self.latents.dim(1)?, self.latents.dtype(), self.latents.device())
    }
}

pub fn padding_mask(lengths: &[usize], len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(lengths.len() * len);
    for &l in lengths {
        data.extend((0..len).map(|i| if i < l { 1.0f32 } else { 0.0 }));
    }
    Ok(Tensor::from_vec(data, (lengths.len(), len), device)?.to_dtype(dtype)?)
}

/// Encoder output for a batch of conditions.
#[derive(Debug, Clone)]
pub struct ConditionMemory {
    pub hidden: Tensor,
    pub lengths: Vec<usize>,
    bias: Tensor,
}

impl ConditionMemory {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn len(&self) -> usize {
        self.hidden.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Denoiser {
    config: DenoiserConfig,
    cond_in: Linear,
    latent_in: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    latent_out: Linear,
    positions: Tensor,
    evaluations: AtomicU64,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(d, config.heads, config.ffn_dim, vb.pp(format!("encoder.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.layers)
            .map(|i| DecoderLayer::new(d, config.heads, config.ffn_dim, vb.pp(format!("decoder.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let positions: Vec<usize> = (0..config.max_len).collect();
        Ok(Self {
            config,
            cond_in: linear(config.embed_dim, d, vb.pp("cond_in"))?,
            latent_in: linear(config.embed_dim, d, vb.pp("latent_in"))?,
            time_fc1: linear(d, d, vb.pp("time_fc1"))?,
            time_fc2: linear(d, d, vb.pp("time_fc2"))?,
            encoder,
            encoder_norm: LayerNorm::new(d, vb.pp("encoder_norm"))?,
            decoder,
            decoder_norm: LayerNorm::new(d, vb.pp("decoder_norm"))?,
            latent_out: linear(d, config.embed_dim, vb.pp("latent_out"))?,
            positions: sinusoidal_table(&positions, d, vb.device())?.to_dtype(vb.dtype())?,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Number of `predict_y0` calls made so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// Encodes a batch of condition token sequences; shorter rows are padded.
    pub fn encode_condition(&self, table: &EmbeddingTable, conditions: &[Vec<TokenId>]) -> Result<ConditionMemory> {
        if conditions.is_empty() {
            return Err(Error::invalid("empty condition batch"));
        }
        let lengths: Vec<usize> = conditions.iter().map(Vec::len).collect();
        let width = *lengths.iter().max().unwrap_or(&0);
        if lengths.contains(&0) {
            return Err(Error::invalid("condition sequences must be non-empty"));
        }
        if width > self.config.max_len {
            return Err(Error::invalid(format!(
                "condition of length {width} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let mut grid = Vec::with_capacity(conditions.len() * width);
        for c in conditions {
            grid.extend_from_slice(c);
            grid.extend(std::iter::repeat(MASK_ID).take(width - c.len()));
        }
        let emb = table.embed_grid(&grid, conditions.len(), width)?;
        let mut h = self
            .cond_in
            .forward(&emb)?
            .broadcast_add(&self.positions.narrow(0, 0, width)?)?;
        let bias = key_bias(&lengths, width, h.dtype(), h.device())?;
        for layer in &self.encoder {
            h = layer.forward(&h, &bias)?;
        }
        Ok(ConditionMemory {
            hidden: self.encoder_norm.forward(&h)?,
            lengths,
            bias,
        })
    }

    /// Memory for the null condition (a single `[MASK]`) repeated `batch` times.
    pub fn encode_null(&self, table: &EmbeddingTable, batch: usize) -> Result<ConditionMemory> {
        self.encode_condition(table, &vec![vec![MASK_ID]; batch])
    }

    fn time_features(&self, timesteps: &[usize]) -> Result<Tensor> {
        let dev = self.positions.device();
        let sin = sinusoidal_table(timesteps, self.config.model_dim, dev)?.to_dtype(self.positions.dtype())?;
        let h = self.time_fc1.forward(&sin)?.silu()?;
        Ok(self.time_fc2.forward(&h)?)
    }

    /// Predicts clean latents `y0` from noised latents at the batch's
    /// timesteps, attending to `memory`.
    pub fn predict_y0(&self, batch: &LatentBatch, memory: &ConditionMemory) -> Result<Tensor> {
        let (b, n, d) = batch.latents.dims3()?;
        if d != self.config.embed_dim {
            return Err(Error::invalid(format!(
                "latent dimension {d} does not match embed_dim {}",
                self.config.embed_dim
            )));
        }
        if n > self.config.max_len {
            return Err(Error::invalid(format!(
                "target length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if memory.batch_size() != b {
            return Err(Error::invalid(format!(
                "memory batch {} does not match latent batch {b}",
                memory.batch_size()
            )));
        }
        if batch.timesteps.iter().any(|&t| t == 0) {
            return Err(Error::invalid("timesteps are 1-based"));
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let time = self.time_features(&batch.timesteps)?.unsqueeze(1)?;
        let mut h = self
            .latent_in
            .forward(&batch.latents)?
            .broadcast_add(&self.positions.narrow(0, 0, n)?)?
            .broadcast_add(&time)?;
        let bias = key_bias(&batch.lengths, n, h.dtype(), h.device())?;
        for layer in &self.decoder {
            h = layer.forward(&h, &bias, &memory.hidden, &memory.bias)?;
        }
        let h = self.decoder_norm.forward(&h)?;
        Ok(self.latent_out.forward(&h)?)
    }
}

/// Deterministically re-initialises every variable in `varmap` from `rng`:
/// linear weights uniform in `±1/sqrt(fan_in)`, biases and layer-norm shifts
/// zero, layer-norm gains one. Names are visited in sorted order.
pub fn init_parameters<R: Rng>(varmap: &VarMap, rng: &mut R) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let count: usize = dims.iter().product();
        let values: Vec<f32> = if name.ends_with(".gamma") {
            vec![1.0; count]
        } else if name.ends_with(".weight") && dims.len() == 2 {
            let bound = 1.0 / (dims[1] as f32).sqrt();
            (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
        } else {
            vec![0.0; count]
        };
        let t = Tensor::from_vec(values, dims.as_slice(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reconstructs `f(x)` from `f(0)` and the images of the basis vectors.
    fn assert_affine(f: &Linear, dim: usize) {
        let dev = Device::Cpu;
        let at = |v: Vec<f32>| f.forward(&Tensor::from_vec(v, (1, dim), &dev).unwrap()).unwrap().squeeze(0).unwrap();
        let zero = at(vec![0.0; dim]);
        let coeffs: Vec<f32> = (0..dim).map(|i| (i as f32 * 0.37).sin() * 2.0).collect();
        let mut rebuilt = zero.clone();
        for (i, &c) in coeffs.iter().enumerate() {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            rebuilt = (rebuilt + ((at(e) - &zero).unwrap() * c as f64).unwrap()).unwrap();
        }
        let direct = at(coeffs);
        let err = (direct - rebuilt).unwrap().abs().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(err < 1e-4, "projection is not affine (err {err})");
    }

    #[test]
    fn latent_projections_are_affine() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let config = DenoiserConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            embed_dim: 6,
            ffn_dim: 32,
            max_len: 4,
            cond_dropout_p: 0.1,
        };
        let d = Denoiser::new(config, vb).unwrap();
        let mut rng = rand::rngs::mock::StepRng::new(3, 0x9e37_79b9_7f4a_7c15);
        init_parameters(&varmap, &mut rng).unwrap();
        // non-zero biases so the affine (not merely linear) case is exercised
        for (name, var) in varmap.data().lock().unwrap().iter() {
            if name.starts_with("latent_") && name.ends_with(".bias") {
                let n = var.dims()[0];
                let b: Vec<f32> = (0..n).map(|i| i as f32 * 0.1 - 0.3).collect();
                var.set(&Tensor::from_vec(b, n, &Device::Cpu).unwrap()).unwrap();
            }
        }
        assert_affine(&d.latent_in, 6);
        assert_affine(&d.latent_out, 16);
    }
}
