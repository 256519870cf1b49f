use candle_core::{Tensor, D};

use crate::embedder::{EmbeddingTable, TokenId};
use crate::error::{Error, Result};

/// Keeps anchor-loss gradients finite if a prediction lands exactly on an
/// embedding.
const DISTANCE_EPS: f64 = 1e-12;

fn check_mask(mask: &Tensor, batch: usize, len: usize) -> Result<f64> {
    if mask.dims() != [batch, len] {
        return Err(Error::invalid(format!(
            "padding mask shape {:?} does not match [{batch}, {len}]",
            mask.dims()
        )));
    }
    let real = mask.to_dtype(candle_core::DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if real <= 0.0 {
        return Err(Error::invalid("batch contains only padding"));
    }
    Ok(real)
}

/// Per-sequence mean squared error over real positions and all latent
/// dimensions: `[batch]`.
pub fn loss_simple_per_sequence(y0: &Tensor, y0_hat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if y0.dims() != y0_hat.dims() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} does not match target {:?}",
            y0_hat.dims(),
            y0.dims()
        )));
    }
    let (b, n, d) = y0.dims3()?;
    check_mask(mask, b, n)?;
    let sq = (y0_hat - y0)?.sqr()?.sum(D::Minus1)?;
    let per_seq = (sq * mask)?.sum(D::Minus1)?;
    let counts = (mask.sum(D::Minus1)? * d as f64)?;
    Ok(per_seq.broadcast_div(&counts)?)
}

/// Mean squared error over every real position and dimension in the batch.
pub fn loss_simple(y0: &Tensor, y0_hat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if y0.dims() != y0_hat.dims() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} does not match target {:?}",
            y0_hat.dims(),
            y0.dims()
        )));
    }
    let (b, n, d) = y0.dims3()?;
    let real = check_mask(mask, b, n)?;
    let sq = (y0_hat - y0)?.sqr()?.sum(D::Minus1)?;
    Ok(((sq * mask)?.sum_all()? / (real * d as f64))?)
}

/// `-log p(w_i | y0_hat_i)` at every position, `[batch, len]`, where the
/// distribution is a softmax over negated embedding distances.
fn anchor_nll(y0_hat: &Tensor, tokens: &[TokenId], table: &EmbeddingTable) -> Result<Tensor> {
    let (b, n, _) = y0_hat.dims3()?;
    if tokens.len() != b * n {
        return Err(Error::invalid(format!(
            "{} target tokens for a {b}x{n} prediction",
            tokens.len()
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= table.vocab_size()) {
        return Err(Error::invalid(format!("token id {bad} out of range")));
    }
    let logits = table.neg_distances_fast(y0_hat, DISTANCE_EPS)?;
    let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let ids = Tensor::from_slice(tokens, (b, n, 1), y0_hat.device())?;
    Ok(log_probs.gather(&ids, D::Minus1)?.squeeze(D::Minus1)?.neg()?)
}

pub fn loss_anchor_per_sequence(
    y0_hat: &Tensor,
    tokens: &[TokenId],
    table: &EmbeddingTable,
    mask: &Tensor,
) -> Result<Tensor> {
    let (b, n, _) = y0_hat.dims3()?;
    check_mask(mask, b, n)?;
    let nll = anchor_nll(y0_hat, tokens, table)?;
    Ok((nll * mask)?.sum(D::Minus1)?.broadcast_div(&mask.sum(D::Minus1)?)?)
}

/// Mean anchor negative log-likelihood over every real position.
/// `tokens` is the row-major `[batch, len]` grid of target ids.
pub fn loss_anchor(y0_hat: &Tensor, tokens: &[TokenId], table: &EmbeddingTable, mask: &Tensor) -> Result<Tensor> {
    let (b, n, _) = y0_hat.dims3()?;
    let real = check_mask(mask, b, n)?;
    let nll = anchor_nll(y0_hat, tokens, table)?;
    Ok(((nll * mask)?.sum_all()? / real)?)
}
