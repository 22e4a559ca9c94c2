//! Raw loops behind the graph ops. Every output row is produced by exactly one
//! chunk with a fixed summation order, so results do not depend on the
//! execution strategy.

use crate::par::{self, Exec};

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn mm_nn(exec: Exec, a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk(exec, out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn mm_nt(exec: Exec, a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk(exec, out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    });
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn mm_tn(exec: Exec, a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk(exec, out, n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }

    /// Output indices `o` with `0 <= o*stride + tap - padding < len`.
    fn valid_range(len: usize, out_len: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
        let lo = if tap >= padding {
            0
        } else {
            (padding - tap).div_ceil(stride)
        };
        // o*stride + tap - padding <= len - 1
        let hi = if len + padding > tap {
            ((len + padding - tap - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub fn conv2d_forward(exec: Exec, g: ConvGeom, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let kk = g.k * g.k;
    par::for_each_chunk(exec, out, ho * wo, |co, plane| {
        plane.fill(b[co]);
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let wk = &w[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
            for ky in 0..g.k {
                let (oy0, oy1) = ConvGeom::valid_range(g.h, ho, ky, g.stride, g.padding);
                for kx in 0..g.k {
                    let wv = wk[ky * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = ConvGeom::valid_range(g.w, wo, kx, g.stride, g.padding);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let base = ox0 + kx - g.padding;
                            for (o, &xv) in orow[ox0..ox1].iter_mut().zip(&xrow[base..base + (ox1 - ox0)]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates the input gradient into `dx`.
pub fn conv2d_backward_input(exec: Exec, g: ConvGeom, w: &[f64], dout: &[f64], dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let kk = g.k * g.k;
    par::for_each_chunk(exec, dx, g.h * g.w, |ci, plane| {
        for co in 0..g.c_out {
            let dplane = &dout[co * ho * wo..(co + 1) * ho * wo];
            let wk = &w[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
            for ky in 0..g.k {
                let (oy0, oy1) = ConvGeom::valid_range(g.h, ho, ky, g.stride, g.padding);
                for kx in 0..g.k {
                    let wv = wk[ky * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = ConvGeom::valid_range(g.w, wo, kx, g.stride, g.padding);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let drow = &dplane[oy * wo..(oy + 1) * wo];
                        let xrow = &mut plane[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            xrow[ox * g.stride + kx - g.padding] += wv * drow[ox];
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates the weight gradient into `dw` and the bias gradient into `db`.
pub fn conv2d_backward_params(exec: Exec, g: ConvGeom, x: &[f64], dout: &[f64], dw: &mut [f64], db: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let kk = g.k * g.k;
    for (co, d) in db.iter_mut().enumerate() {
        *d += dout[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
    }
    par::for_each_chunk(exec, dw, g.c_in * kk, |co, wslab| {
        let dplane = &dout[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = ConvGeom::valid_range(g.h, ho, ky, g.stride, g.padding);
                for kx in 0..g.k {
                    let (ox0, ox1) = ConvGeom::valid_range(g.w, wo, kx, g.stride, g.padding);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let drow = &dplane[oy * wo..(oy + 1) * wo];
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            acc += drow[ox] * xrow[ox * g.stride + kx - g.padding];
                        }
                    }
                    wslab[(ci * g.k + ky) * g.k + kx] += acc;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for len in 1..9 {
            for k in [1usize, 3, 5] {
                for stride in 1..4 {
                    let padding = k / 2;
                    if len + 2 * padding < k {
                        continue;
                    }
                    let out = (len + 2 * padding - k) / stride + 1;
                    for tap in 0..k {
                        let (lo, hi) = ConvGeom::valid_range(len, out, tap, stride, padding);
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let p = (o * stride + tap) as isize - padding as isize;
                                p >= 0 && (p as usize) < len
                            })
                            .collect();
                        assert_eq!(
                            (lo..hi).collect::<Vec<_>>(),
                            brute,
                            "len={len} k={k} s={stride} tap={tap}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let mut c1 = vec![0.0; m * n];
        mm_nn(Exec::Sequential, &a, &b, &mut c1, m, k, n);
        // bᵀ stored n×k
        let bt: Vec<f64> = (0..n * k).map(|q| b[(q % k) * n + q / k]).collect();
        let mut c2 = vec![0.0; m * n];
        mm_nt(Exec::Sequential, &a, &bt, &mut c2, m, k, n);
        let at: Vec<f64> = (0..k * m).map(|q| a[(q % m) * k + q / m]).collect();
        let mut c3 = vec![0.0; m * n];
        mm_tn(Exec::Sequential, &at, &b, &mut c3, m, k, n);
        for i in 0..m * n {
            assert!((c1[i] - c2[i]).abs() < 1e-12);
            assert!((c1[i] - c3[i]).abs() < 1e-12);
        }
    }
}
