//! Window partitioning of `[C, H, W]` feature maps into token batches.
//!
//! The map is reflect-padded to a multiple of the window side `M`, rolled by
//! `-shift` on both axes, and cut into non-overlapping `M×M` windows. Tokens
//! are laid out as `[n_windows · M², C]`, window-major, row-major inside a
//! window. Both directions are plain index gathers, so they differentiate
//! through [`Graph::gather`](crate::numerics::Graph::gather).

use std::sync::Arc;

use crate::numerics::{NumericsError, Tensor};

/// Large negative logit added between tokens of different shifted regions.
pub const MASK_NEG: f64 = -1e9;

/// Reflection of `i` into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Index maps for one `(H, W, M, shift)` combination.
#[derive(Debug, Clone)]
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub shift: usize,
    pub hp: usize,
    pub wp: usize,
    /// Source pixel `i·W + j` of every token.
    token_src: Vec<usize>,
    /// Token holding each real pixel after the roll.
    home: Vec<usize>,
    /// Region label of every token on the rolled grid; empty when unshifted.
    region: Vec<u8>,
}

impl WindowGeometry {
    pub fn new(h: usize, w: usize, m: usize, shift: usize) -> Self {
        assert!(h > 0 && w > 0 && m > 0 && shift < m, "bad window geometry");
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        let (nwh, nww) = (hp / m, wp / m);
        let n_tok = m * m;
        let mut token_src = vec![0; hp * wp];
        let mut region = Vec::new();
        if shift > 0 {
            region = vec![0; hp * wp];
        }
        let band = |a: usize, len: usize| -> u8 {
            if a < len - m {
                0
            } else if a < len - shift {
                1
            } else {
                2
            }
        };
        for a in 0..hp {
            for b in 0..wp {
                let win = (a / m) * nww + b / m;
                let tok = win * n_tok + (a % m) * m + b % m;
                let si = reflect((a + shift) % hp, h);
                let sj = reflect((b + shift) % wp, w);
                token_src[tok] = si * w + sj;
                if shift > 0 {
                    region[tok] = band(a, hp) * 3 + band(b, wp);
                }
            }
        }
        let mut home = vec![0; h * w];
        for i in 0..h {
            for j in 0..w {
                let a = (i + hp - shift) % hp;
                let b = (j + wp - shift) % wp;
                let win = (a / m) * nww + b / m;
                home[i * w + j] = win * n_tok + (a % m) * m + b % m;
            }
        }
        debug_assert_eq!(nwh * nww * n_tok, token_src.len());
        WindowGeometry {
            h,
            w,
            m,
            shift,
            hp,
            wp,
            token_src,
            home,
            region,
        }
    }

    pub fn n_windows(&self) -> usize {
        (self.hp / self.m) * (self.wp / self.m)
    }

    pub fn n_tokens(&self) -> usize {
        self.m * self.m
    }

    pub fn token_src(&self) -> &[usize] {
        &self.token_src
    }

    pub fn home(&self) -> &[usize] {
        &self.home
    }

    /// Gather indices taking `[C, H, W]` to `[n_windows · M², C]`.
    pub fn partition_indices(&self, c: usize) -> Arc<Vec<usize>> {
        let hw = self.h * self.w;
        let mut idx = Vec::with_capacity(self.token_src.len() * c);
        for &src in &self.token_src {
            idx.extend((0..c).map(|ch| ch * hw + src));
        }
        Arc::new(idx)
    }

    /// Gather indices taking `[n_windows · M², C]` back to `[C, H, W]`.
    pub fn reverse_indices(&self, c: usize) -> Arc<Vec<usize>> {
        let mut idx = Vec::with_capacity(self.home.len() * c);
        for ch in 0..c {
            idx.extend(self.home.iter().map(|&t| t * c + ch));
        }
        Arc::new(idx)
    }

    /// Additive mask `[n_windows, M², M²]`, or `None` without a shift.
    pub fn mask(&self) -> Option<Tensor> {
        if self.shift == 0 {
            return None;
        }
        let n = self.n_tokens();
        let nw = self.n_windows();
        let mut data = vec![0.0; nw * n * n];
        for win in 0..nw {
            let r = &self.region[win * n..(win + 1) * n];
            for a in 0..n {
                for b in 0..n {
                    if r[a] != r[b] {
                        data[(win * n + a) * n + b] = MASK_NEG;
                    }
                }
            }
        }
        Some(Tensor::new(&[nw, n, n], data).expect("mask shape"))
    }

    /// Index into a `[(2M−1)², heads]` bias table for every
    /// `[n_windows, heads, M², M²]` entry.
    pub fn rel_bias_indices(&self, heads: usize) -> Arc<Vec<usize>> {
        let m = self.m;
        let n = m * m;
        let side = 2 * m - 1;
        let mut one = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            for a in 0..n {
                for b in 0..n {
                    let di = (a / m) + m - 1 - b / m;
                    let dj = (a % m) + m - 1 - b % m;
                    one.push((di * side + dj) * heads + h);
                }
            }
        }
        let nw = self.n_windows();
        let mut idx = Vec::with_capacity(nw * one.len());
        for _ in 0..nw {
            idx.extend_from_slice(&one);
        }
        Arc::new(idx)
    }
}

/// Tokens of a partitioned feature map with the geometry needed to undo it.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `[n_windows, M², C]`
    pub tokens: Tensor,
    pub geometry: WindowGeometry,
}

pub fn window_partition(x: &Tensor, m: usize, shift: usize) -> Result<WindowBatch, NumericsError> {
    if x.ndim() != 3 {
        return Err(NumericsError::Dimension(format!(
            "window_partition expects [C, H, W], got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if m == 0 || shift >= m {
        return Err(NumericsError::Contract(format!("window {m} with shift {shift}")));
    }
    let geometry = WindowGeometry::new(h, w, m, shift);
    let idx = geometry.partition_indices(c);
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    let tokens = Tensor::new(&[geometry.n_windows(), geometry.n_tokens(), c], data)?;
    Ok(WindowBatch { tokens, geometry })
}

pub fn window_reverse(b: &WindowBatch) -> Result<Tensor, NumericsError> {
    let c = *b.tokens.shape().last().unwrap();
    let g = &b.geometry;
    let idx = g.reverse_indices(c);
    Tensor::new(&[c, g.h, g.w], idx.iter().map(|&i| b.tokens.data()[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_window() {
        let x = Tensor::from_fn(&[1, 5, 5], |k| k as f64);
        let b = window_partition(&x, 5, 0).unwrap();
        assert_eq!(b.tokens.shape(), &[1, 25, 1]);
        assert_eq!(b.tokens.data(), x.data());
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(
            (0..8).map(|i| reflect(i, 4)).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 2, 1, 0, 1]
        );
        let x = Tensor::from_fn(&[1, 3, 3], |k| k as f64);
        let b = window_partition(&x, 2, 0).unwrap();
        assert_eq!(b.tokens.shape(), &[4, 4, 1]);
        // bottom-right window covers padded rows/cols 2..4: pixel 8, reflected 7, 5, 4
        assert_eq!(&b.tokens.data()[12..16], &[8.0, 7.0, 5.0, 4.0]);
    }

    #[test]
    fn roll_matches_direct_oracle() {
        let (h, w, m, s) = (6, 4, 2, 1);
        let g = WindowGeometry::new(h, w, m, s);
        // rolled[a][b] = x[(a + s) % H][(b + s) % W] when no padding is needed
        for a in 0..h {
            for b in 0..w {
                let win = (a / m) * (w / m) + b / m;
                let tok = win * m * m + (a % m) * m + b % m;
                assert_eq!(g.token_src()[tok], ((a + s) % h) * w + (b + s) % w);
            }
        }
    }

    #[test]
    fn mask_regions() {
        let g = WindowGeometry::new(4, 4, 2, 1);
        let mask = g.mask().unwrap();
        // window 0 lies entirely in region (0, 0)
        assert!(mask.data()[..16].iter().all(|&v| v == 0.0));
        // last window straddles all four corner regions: only the diagonal is open
        let last = &mask.data()[3 * 16..];
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(last[a * 4 + b] == 0.0, a == b, "({a}, {b})");
            }
        }
        assert!(WindowGeometry::new(4, 4, 2, 0).mask().is_none());
    }

    #[test]
    fn rel_bias_index_range() {
        let g = WindowGeometry::new(3, 3, 3, 0);
        let idx = g.rel_bias_indices(2);
        assert_eq!(idx.len(), 2 * 81);
        assert!(idx.iter().all(|&i| i < 25 * 2));
        // a token and itself share the zero-offset entry
        assert_eq!(idx[0], (2 * 5 + 2) * 2);
    }

    proptest! {
        #[test]
        fn reverse_inverts_partition(c in 1usize..4, h in 1usize..12, w in 1usize..12, m in 1usize..6, s in 0usize..6, seed in any::<u64>()) {
            let s = s % m;
            let x = Tensor::from_fn(&[c, h, w], |k| (k as u64 ^ seed) as f64);
            let b = window_partition(&x, m, s).unwrap();
            prop_assert_eq!(b.tokens.shape()[0], h.div_ceil(m) * w.div_ceil(m));
            let back = window_reverse(&b).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }
}
