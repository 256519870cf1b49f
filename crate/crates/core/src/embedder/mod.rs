//! Token embeddings and the projections between continuous latents and
//! discrete tokens.
//!
//! Clamping ranks tokens by the negated Euclidean distance between a latent
//! row and each embedding, so the nearest token carries the largest logit.
//! Hard clamping takes the argmax (lowest id on ties); stochastic clamping
//! samples from `softmax(logits / tau)` and reduces to hard clamping at
//! `tau = 0`.

mod vocab;

pub use vocab::{
    TokenId, Tokenizer, Vocab, WhitespaceTokenizer, MASK_ID, MASK_TOKEN, UNK_ID, UNK_TOKEN,
};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// When clamping happens during sampling. The final clamp always runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// Final clamp only, always the deterministic nearest token (tau ignored).
    None,
    /// Final clamp only, stochastic at temperature `tau`.
    FinalOnly,
    /// Clamp the `y0` prediction at every model evaluation as well.
    EveryStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampSpec {
    pub mode: ClampMode,
    pub tau: f64,
    /// Seeds a dedicated stream for clamp draws; `None` shares the sampler's RNG.
    pub rng_seed: Option<u64>,
}

impl ClampSpec {
    pub fn new(mode: ClampMode, tau: f64) -> Result<Self> {
        if !(tau >= 0.0) {
            return Err(Error::invalid(format!("clamp temperature must be >= 0, got {tau}")));
        }
        Ok(Self {
            mode,
            tau,
            rng_seed: None,
        })
    }

    pub fn hard_final() -> Self {
        Self {
            mode: ClampMode::FinalOnly,
            tau: 0.0,
            rng_seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = Some(seed);
        self
    }

    /// Temperature used for the final clamp.
    pub fn final_tau(&self) -> f64 {
        match self.mode {
            ClampMode::None => 0.0,
            _ => self.tau,
        }
    }
}

/// Learned `[vocab_size, dim]` embedding matrix.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    weights: Var,
}

impl EmbeddingTable {
    /// Gaussian initialisation followed by row normalisation.
    pub fn random<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R, device: &Device) -> Result<Self> {
        if vocab_size == 0 || dim < 2 {
            return Err(Error::invalid(format!(
                "embedding table needs vocab_size > 0 and dim >= 2, got {vocab_size}x{dim}"
            )));
        }
        let data: Vec<f32> = (0..vocab_size * dim).map(|_| rng.sample(StandardNormal)).collect();
        let table = Self::from_tensor(Tensor::from_vec(data, (vocab_size, dim), device)?)?;
        table.normalize_rows()?;
        Ok(table)
    }

    pub fn from_tensor(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::invalid(format!(
                "embedding weights must be rank 2, got shape {:?}",
                weights.dims()
            )));
        }
        Ok(Self {
            weights: Var::from_tensor(&weights)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn dtype(&self) -> DType {
        self.weights.dtype()
    }

    pub fn device(&self) -> &Device {
        self.weights.device()
    }

    pub fn weights(&self) -> &Tensor {
        self.weights.as_tensor()
    }

    pub fn var(&self) -> &Var {
        &self.weights
    }

    pub fn set_weights(&self, weights: &Tensor) -> Result<()> {
        Ok(self.weights.set(weights)?)
    }

    fn check_ids(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// `[n, dim]` rows of the table, one per token.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Tensor> {
        self.check_ids(tokens)?;
        if tokens.is_empty() {
            return Ok(Tensor::zeros((0, self.dim()), self.dtype(), self.device())?);
        }
        let ids = Tensor::new(tokens, self.device())?;
        Ok(self.weights.as_tensor().index_select(&ids, 0)?)
    }

    /// Embeds a `[batch, len]` id grid (padding ids included) into
    /// `[batch, len, dim]`.
    pub fn embed_grid(&self, ids: &[TokenId], batch: usize, len: usize) -> Result<Tensor> {
        if ids.len() != batch * len {
            return Err(Error::invalid(format!(
                "{} ids for a {batch}x{len} grid",
                ids.len()
            )));
        }
        Ok(self.embed(ids)?.reshape((batch, len, self.dim()))?)
    }

    /// Negated Euclidean distance from every latent row to every embedding:
    /// input `[.., dim]`, output `[.., vocab_size]`.
    pub fn distance_logits(&self, latents: &Tensor) -> Result<Tensor> {
        self.neg_distances(latents, 0.0)
    }

    /// `eps` is added under the square root to keep gradients finite when a
    /// latent coincides with an embedding.
    pub(crate) fn neg_distances(&self, latents: &Tensor, eps: f64) -> Result<Tensor> {
        self.check_latent_dim(latents)?;
        let diff = latents.unsqueeze(latents.rank() - 1)?.broadcast_sub(self.weights.as_tensor())?;
        let sq = diff.sqr()?.sum(D::Minus1)?;
        let sq = if eps > 0.0 { (sq + eps)? } else { sq };
        Ok(sq.sqrt()?.neg()?)
    }

    /// Same logits as [`distance_logits`](Self::distance_logits) computed via
    /// `|x|^2 + |e|^2 - 2 x.e`, one matrix product instead of a
    /// `[.., vocab, dim]` difference tensor. Used by the training loss.
    pub(crate) fn neg_distances_fast(&self, latents: &Tensor, eps: f64) -> Result<Tensor> {
        let dim = self.check_latent_dim(latents)?;
        let lead: Vec<usize> = latents.dims()[..latents.rank() - 1].to_vec();
        let rows = latents.elem_count() / dim;
        let x = latents.reshape((rows, dim))?;
        let w = self.weights.as_tensor();
        let x_sq = x.sqr()?.sum_keepdim(1)?;
        let w_sq = w.sqr()?.sum(1)?.unsqueeze(0)?;
        let cross = x.matmul(&w.t()?)?;
        let sq = x_sq.broadcast_add(&w_sq)?.sub(&(cross * 2.0)?)?.relu()?;
        let dist = (sq + eps)?.sqrt()?.neg()?;
        let mut shape = lead;
        shape.push(self.vocab_size());
        Ok(dist.reshape(shape)?)
    }

    fn check_latent_dim(&self, latents: &Tensor) -> Result<usize> {
        let dim = latents.dim(D::Minus1)?;
        if dim != self.dim() {
            return Err(Error::invalid(format!(
                "latent dimension {dim} does not match embedding dimension {}",
                self.dim()
            )));
        }
        Ok(dim)
    }

    fn host_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.weights.as_tensor().to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    fn latent_rows(&self, latents: &Tensor) -> Result<Vec<Vec<f64>>> {
        if latents.rank() != 2 || latents.dim(1)? != self.dim() {
            return Err(Error::invalid(format!(
                "expected latents of shape [n, {}], got {:?}",
                self.dim(),
                latents.dims()
            )));
        }
        Ok(latents.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    /// Nearest token and its distance for every row of `[n, dim]` latents.
    pub fn nearest(&self, latents: &Tensor) -> Result<Vec<(TokenId, f64)>> {
        let table = self.host_rows()?;
        Ok(self
            .latent_rows(latents)?
            .iter()
            .map(|row| nearest_row(&table, row))
            .collect())
    }

    /// Maps every row to its nearest embedding (lowest id on ties).
    pub fn hard_clamp(&self, latents: &Tensor) -> Result<(Vec<TokenId>, Tensor)> {
        let ids: Vec<TokenId> = self.nearest(latents)?.into_iter().map(|(id, _)| id).collect();
        let rows = self.embed(&ids)?;
        Ok((ids, rows))
    }

    /// Samples each row's token from `softmax(-distance / tau)`. `tau = 0`
    /// delegates to [`hard_clamp`](Self::hard_clamp) and consumes no randomness.
    pub fn stochastic_clamp<R: Rng + ?Sized>(
        &self,
        latents: &Tensor,
        tau: f64,
        rng: &mut R,
    ) -> Result<(Vec<TokenId>, Tensor)> {
        if !(tau >= 0.0) {
            return Err(Error::invalid(format!("clamp temperature must be >= 0, got {tau}")));
        }
        if tau == 0.0 {
            return self.hard_clamp(latents);
        }
        let table = self.host_rows()?;
        let mut ids = Vec::new();
        let mut logits = vec![0.0; table.len()];
        for row in self.latent_rows(latents)? {
            for (logit, emb) in logits.iter_mut().zip(&table) {
                *logit = -euclidean(emb, &row) / tau;
            }
            ids.push(sample_softmax(&logits, rng));
        }
        let rows = self.embed(&ids)?;
        Ok((ids, rows))
    }

    /// Clamps one sequence per leading-axis item of `[batch, n, dim]` latents.
    pub fn clamp_batch<R: Rng + ?Sized>(
        &self,
        latents: &Tensor,
        tau: f64,
        rngs: &mut [&mut R],
    ) -> Result<Tensor> {
        let batch = latents.dim(0)?;
        let mut out = Vec::with_capacity(batch);
        for (b, rng) in rngs.iter_mut().enumerate().take(batch) {
            let (_, rows) = self.stochastic_clamp(&latents.get(b)?, tau, &mut **rng)?;
            out.push(rows);
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    /// Recentres every row to mean 0 and rescales it to population standard
    /// deviation 1 across its components.
    pub fn normalize_rows(&self) -> Result<()> {
        let dtype = self.dtype();
        let rows = self.host_rows()?;
        let dim = self.dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            let (mean, std) = mean_std(row);
            let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
            data.extend(row.iter().map(|x| (x - mean) * scale));
        }
        let t = Tensor::from_vec(data, (rows.len(), dim), self.device())?.to_dtype(dtype)?;
        Ok(self.weights.set(&t)?)
    }

    /// Largest `|mean|` and `|std - 1|` over all rows.
    pub fn normalization_error(&self) -> Result<(f64, f64)> {
        let mut worst = (0.0f64, 0.0f64);
        for row in self.host_rows()? {
            let (mean, std) = mean_std(&row);
            worst.0 = worst.0.max(mean.abs());
            worst.1 = worst.1.max((std - 1.0).abs());
        }
        Ok(worst)
    }

    pub fn rows_distinct(&self) -> Result<bool> {
        let rows = self.host_rows()?;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                if rows[i] == rows[j] {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest_row(table: &[Vec<f64>], row: &[f64]) -> (TokenId, f64) {
    let mut best = (0, f64::INFINITY);
    for (id, emb) in table.iter().enumerate() {
        let d = euclidean(emb, row);
        if d < best.1 {
            best = (id as TokenId, d);
        }
    }
    best
}

fn mean_std(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sample_softmax<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> TokenId {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as TokenId;
        }
        u -= w;
    }
    // rounding can leave u marginally above the last weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as TokenId
}
