//! Windowed multi-head self-attention and temporal cross-segment attention.
//!
//! Token inputs are `[n_windows · N, C]` with `N = M²` tokens per window.

use std::sync::Arc;

use super::window::WindowGeometry;
use crate::numerics::{Graph, NumericsError, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct MsaWeights {
    /// `[C, 3C]` and `[3C]`
    pub qkv_w: Var,
    pub qkv_b: Var,
    /// `[C, C]` and `[C]`
    pub proj_w: Var,
    pub proj_b: Var,
    /// `[(2M−1)², heads]`
    pub rel_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TsaWeights {
    /// `[C, C]` projections of the left, middle and right tokens.
    pub p_l: Var,
    pub p_m: Var,
    pub p_r: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

/// Indices splitting `[B·N, 3C]` into per-head `[B·heads, N, hd]` for one of q, k, v.
fn head_split_indices(b: usize, n: usize, c: usize, heads: usize, which: usize) -> Arc<Vec<usize>> {
    let hd = c / heads;
    let mut idx = Vec::with_capacity(b * n * c);
    for w in 0..b {
        for h in 0..heads {
            for t in 0..n {
                let base = (w * n + t) * 3 * c + which * c + h * hd;
                idx.extend(base..base + hd);
            }
        }
    }
    Arc::new(idx)
}

/// Indices merging `[B·heads, N, hd]` back into `[B·N, C]`.
fn head_merge_indices(b: usize, n: usize, c: usize, heads: usize) -> Arc<Vec<usize>> {
    let hd = c / heads;
    let mut idx = Vec::with_capacity(b * n * c);
    for w in 0..b {
        for t in 0..n {
            for h in 0..heads {
                let base = ((w * heads + h) * n + t) * hd;
                idx.extend(base..base + hd);
            }
        }
    }
    Arc::new(idx)
}

fn expand_heads(mask: &Tensor, heads: usize) -> Tensor {
    let s = mask.shape();
    let (nw, n) = (s[0], s[1]);
    let mut data = Vec::with_capacity(nw * heads * n * n);
    for w in 0..nw {
        let block = &mask.data()[w * n * n..(w + 1) * n * n];
        for _ in 0..heads {
            data.extend_from_slice(block);
        }
    }
    Tensor::new(&[nw * heads, n, n], data).expect("mask shape")
}

/// Shifted-window multi-head self-attention over normalized tokens.
///
/// Returns the projected output `[n_windows · N, C]` and the attention
/// weights `[n_windows · heads, N, N]`.
pub fn sw_msa(
    g: &mut Graph,
    x: Var,
    geo: &WindowGeometry,
    w: &MsaWeights,
    heads: usize,
) -> Result<(Var, Var), NumericsError> {
    let s = g.shape(x).to_vec();
    let (nw, n) = (geo.n_windows(), geo.n_tokens());
    if s.len() != 2 || s[0] != nw * n {
        return Err(NumericsError::Dimension(format!(
            "sw_msa expects [{}, C] tokens, got {s:?}",
            nw * n
        )));
    }
    let c = s[1];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(NumericsError::Contract(format!(
            "{c} channels do not split into {heads} heads"
        )));
    }
    let hd = c / heads;
    let qkv = g.linear(x, w.qkv_w, Some(w.qkv_b))?;
    let shape = [nw * heads, n, hd];
    let q = g.gather(qkv, head_split_indices(nw, n, c, heads, 0), &shape)?;
    let k = g.gather(qkv, head_split_indices(nw, n, c, heads, 1), &shape)?;
    let v = g.gather(qkv, head_split_indices(nw, n, c, heads, 2), &shape)?;
    let q = g.scale(q, 1.0 / (hd as f64).sqrt());
    let scores = g.matmul_nt(q, k)?;
    let bias = g.gather(w.rel_bias, geo.rel_bias_indices(heads), &[nw * heads, n, n])?;
    let mut scores = g.add(scores, bias)?;
    if let Some(mask) = geo.mask() {
        let m = g.constant(expand_heads(&mask, heads));
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax_rows(scores);
    let out = g.matmul(attn, v)?;
    let merged = g.gather(out, head_merge_indices(nw, n, c, heads), &[nw * n, c])?;
    let y = g.linear(merged, w.proj_w, Some(w.proj_b))?;
    Ok((y, attn))
}

/// Single-head temporal attention: queries from the left segment, keys from
/// the right, values from the middle, all of the same spatial window.
///
/// Returns the projected output `[n_windows · N, C]` and the attention
/// weights `[n_windows, N, N]`.
pub fn tsa(
    g: &mut Graph,
    x_l: Var,
    x_m: Var,
    x_r: Var,
    geo: &WindowGeometry,
    w: &TsaWeights,
) -> Result<(Var, Var), NumericsError> {
    let s = g.shape(x_m).to_vec();
    let (nw, n) = (geo.n_windows(), geo.n_tokens());
    if s.len() != 2 || s[0] != nw * n || g.shape(x_l) != s.as_slice() || g.shape(x_r) != s.as_slice() {
        return Err(NumericsError::Dimension(format!(
            "tsa expects three [{}, C] token sets, got {:?} {:?} {:?}",
            nw * n,
            g.shape(x_l),
            s,
            g.shape(x_r)
        )));
    }
    let c = s[1];
    let q = g.matmul(x_l, w.p_l)?;
    let k = g.matmul(x_r, w.p_r)?;
    let v = g.matmul(x_m, w.p_m)?;
    let q = g.reshape(q, &[nw, n, c])?;
    let k = g.reshape(k, &[nw, n, c])?;
    let v = g.reshape(v, &[nw, n, c])?;
    let q = g.scale(q, 1.0 / (c as f64).sqrt());
    let mut scores = g.matmul_nt(q, k)?;
    if let Some(mask) = geo.mask() {
        let m = g.constant(mask);
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax_rows(scores);
    let out = g.matmul(attn, v)?;
    let out = g.reshape(out, &[nw * n, c])?;
    let y = g.linear(out, w.proj_w, Some(w.proj_b))?;
    Ok((y, attn))
}
