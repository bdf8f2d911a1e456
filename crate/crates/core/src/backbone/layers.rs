//! Stateless building blocks of the backbone.

use numkit::Tensor;

use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Splits `[M, L]` into non-overlapping patches and projects each with the shared
/// `[P, D]` map: output `[M, L/P, D]`.
pub fn patch_embed(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, l) = match x.shape() {
        [m, l] => (*m, *l),
        s => return Err(Error::Input(format!("patch_embed expects [M, L], got {s:?}"))),
    };
    let p = weight.shape()[0];
    if l % p != 0 {
        return Err(Error::Input(format!("length {l} is not divisible by patch size {p}")));
    }
    Ok(x.reshape(&[m, l / p, p])?.matmul(weight)?.add(bias)?)
}

/// `x / sqrt(mean(x²) + eps) · gain` over the last axis.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let inv = x.square().mean_last()?.add_scalar(RMS_EPS).powf(-0.5)?;
    Ok(x.mul_rows(&inv)?.mul(gain)?)
}

/// `W_down(silu(W_gate x) ⊙ W_up x)`.
pub fn swiglu_ffn(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor> {
    let gate = x.matmul(w_gate)?.silu();
    let up = x.matmul(w_up)?;
    Ok(gate.mul(&up)?.matmul(w_down)?)
}

/// cos/sin tables `[T, d]` with each frequency repeated for its pair.
fn rope_tables(positions: &[usize], d: usize) -> Result<(Tensor, Tensor)> {
    let mut cos = Vec::with_capacity(positions.len() * d);
    let mut sin = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for i in 0..d / 2 {
            let theta = ROPE_BASE.powf(-((2 * i) as f64) / d as f64);
            let angle = pos as f64 * theta;
            cos.extend([angle.cos(); 2]);
            sin.extend([angle.sin(); 2]);
        }
    }
    Ok((Tensor::new(cos, &[positions.len(), d])?, Tensor::new(sin, &[positions.len(), d])?))
}

/// Maps each pair `(x0, x1)` to `(-x1, x0)` when right-multiplied.
fn rotate_half_matrix(d: usize) -> Result<Tensor> {
    let mut r = vec![0.0; d * d];
    for i in 0..d / 2 {
        r[(2 * i + 1) * d + 2 * i] = -1.0;
        r[(2 * i) * d + 2 * i + 1] = 1.0;
    }
    Ok(Tensor::new(r, &[d, d])?)
}

fn rotate(x: &Tensor, cos: &Tensor, sin: &Tensor, half: &Tensor) -> Result<Tensor> {
    Ok(x.mul(cos)?.add(&x.matmul(half)?.mul(sin)?)?)
}

/// Rotary position encoding of `q, k: [..., T, d]` at the given positions.
pub fn rope_apply(q: &Tensor, k: &Tensor, positions: &[usize]) -> Result<(Tensor, Tensor)> {
    let d = *q.shape().last().unwrap_or(&0);
    if d % 2 != 0 {
        return Err(Error::Input(format!("rotary embedding needs an even width, got {d}")));
    }
    let t = q.shape()[q.ndim() - 2];
    if positions.len() != t {
        return Err(Error::Input(format!("{} positions for sequence length {t}", positions.len())));
    }
    let (cos, sin) = rope_tables(positions, d)?;
    let half = rotate_half_matrix(d)?;
    Ok((rotate(q, &cos, &sin, &half)?, rotate(k, &cos, &sin, &half)?))
}

/// Weights of one multi-head attention layer.
pub struct AttentionWeights<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
}

/// Multi-head scaled dot-product attention over `x: [B, S, D]`.
///
/// `bias` is an additive `[S, S]` mask shared across the batch. Returns the output
/// and the number of multiply-accumulates spent on attention scores.
pub fn multi_head_attention(
    x: &Tensor,
    w: &AttentionWeights<'_>,
    num_heads: usize,
    positions: Option<&[usize]>,
    bias: &Tensor,
) -> Result<(Tensor, u64)> {
    let (b, s, d) = match x.shape() {
        [b, s, d] => (*b, *s, *d),
        sh => return Err(Error::Input(format!("attention expects [B, S, D], got {sh:?}"))),
    };
    let dh = d / num_heads;
    let split = |t: Tensor| -> Result<Tensor> {
        Ok(t.reshape(&[b, s, num_heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * num_heads, s, dh])?)
    };
    let mut q = split(x.matmul(w.wq)?)?;
    let mut k = split(x.matmul(w.wk)?)?;
    let v = split(x.matmul(w.wv)?)?;
    if let Some(pos) = positions {
        (q, k) = rope_apply(&q, &k, pos)?;
    }
    let scores = q
        .matmul(&k.transpose()?)?
        .mul_scalar(1.0 / (dh as f64).sqrt())
        .add(bias)?;
    let macs = (b * num_heads * s * s * dh) as u64;
    let attn = scores.softmax_last()?;
    let out = attn
        .matmul(&v)?
        .reshape(&[b, num_heads, s, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, s, d])?
        .matmul(w.wo)?;
    Ok((out, macs))
}
