//! Dynamically recorded compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order, which is already a topological
//! order; `backward` walks them once in reverse.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::{strides, Tensor};
use super::NumericsError;
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + y` where `y.shape` is a suffix of `x.shape`.
    AddBroadcast(Var, Var),
    /// Batched product; `trans_b` multiplies by `bᵀ`.
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    L1Mean(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Gather(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>),
    Slice0 {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Persistent gradient, kept only for leaves that require it.
    grad: Option<Tensor>,
}

/// A single-threaded recording of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite() || !self.inputs_finite(&op),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        let mut ok = true;
        for_each_input(op, |v| ok &= self.nodes[v.0].value.all_finite());
        ok
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: Op,
    ) -> Result<Var, NumericsError> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, mk, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::from_fn(va.shape(), |k| va.data()[k] * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var, NumericsError> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(NumericsError::shape("add_broadcast", sx, sy));
        }
        let vx = self.value(x);
        let vy = self.value(y).data();
        let inner = vy.len();
        let t = Tensor::from_fn(vx.shape(), |k| vx.data()[k] + vy[k % inner]);
        let rg = self.rg(&[x, y]);
        Ok(self.push(t, Op::AddBroadcast(x, y), rg))
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || NumericsError::shape(if trans_b { "bmm_nt" } else { "matmul" }, &sa, &sb);
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(err());
        }
        let (batch, m, k, kb, n) = if sa.len() == 2 {
            if trans_b {
                (1, sa[0], sa[1], sb[1], sb[0])
            } else {
                (1, sa[0], sa[1], sb[0], sb[1])
            }
        } else {
            if sa[0] != sb[0] {
                return Err(err());
            }
            if trans_b {
                (sa[0], sa[1], sa[2], sb[2], sb[1])
            } else {
                (sa[0], sa[1], sa[2], sb[1], sb[2])
            }
        };
        if k != kb {
            return Err(err());
        }
        let exec = par::exec();
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        let (outer, inner) = split_exec(exec, batch);
        par::for_each_chunk(outer, &mut out, m * n, |bi, oo| {
            let ao = &va[bi * m * k..(bi + 1) * m * k];
            let bo = &vb[bi * k * n..(bi + 1) * k * n];
            if trans_b {
                kernels::mm_nt(inner, ao, bo, oo, m, k, n);
            } else {
                kernels::mm_nn(inner, ao, bo, oo, m, k, n);
            }
        });
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            t,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `a[m×k] · b[k×n]`, or the batched form on rank-3 inputs.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.bmm_impl(a, b, false)
    }

    /// `a[..×m×k] · b[..×n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.bmm_impl(a, b, true)
    }

    /// `x[n×d_in] · w[d_in×d_out] + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let (sb, sy) = (self.shape(b), self.shape(y));
                if sb.len() != 1 || sb[0] != sy[1] {
                    return Err(NumericsError::shape("linear bias", sy, sb));
                }
                self.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }

    /// Cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×k×k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var, NumericsError> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(NumericsError::shape("conv2d", &sx, &sw));
        }
        if sw[1] != sx[0] {
            return Err(NumericsError::Dimension(format!(
                "conv2d channel mismatch: input {:?} vs weight {:?}",
                sx, sw
            )));
        }
        if sb != [sw[0]] {
            return Err(NumericsError::shape("conv2d bias", &sw, &sb));
        }
        if stride == 0 || sx[1] + 2 * padding < sw[2] || sx[2] + 2 * padding < sw[2] {
            return Err(NumericsError::Contract(format!(
                "conv2d: kernel {} with padding {padding} and stride {stride} does not fit input {:?}",
                sw[2], sx
            )));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            c_out: sw[0],
            h: sx[1],
            w: sx[2],
            k: sw[2],
            stride,
            padding,
        };
        let mut out = vec![0.0; geom.c_out * geom.out_h() * geom.out_w()];
        kernels::conv2d_forward(
            par::exec(),
            geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
        );
        let t = Tensor::new(&[geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumericsError::shape("layer_norm", &sx, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(NumericsError::Contract("layer_norm: eps must be positive".into()));
        }
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + bt[c];
            }
        }
        let t = Tensor::new(&sx, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(vx.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::from_fn(vx.shape(), |k| gelu_scalar(vx.data()[k]));
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, NumericsError> {
        self.same_shape("l1_loss", pred, target)?;
        let (p, q) = (self.value(pred).data(), self.value(target).data());
        let s: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
        let t = Tensor::scalar(s / p.len() as f64);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(t, Op::L1Mean(pred, target), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len()
            || axes
                .iter()
                .any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(NumericsError::Contract(format!(
                "permute: {axes:?} is not a permutation of rank {}",
                sx.len()
            )));
        }
        let idx = permute_indices(&sx, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let vx = self.value(x).data();
        let t = Tensor::new(&out_shape, idx.iter().map(|&i| vx[i]).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Permute(x, axes.to_vec()), rg))
    }

    /// `out.flat[i] = x.flat[indices[i]]`; indices may repeat.
    pub fn gather(&mut self, x: Var, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var, NumericsError> {
        let vx = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= vx.len()) {
            return Err(NumericsError::Index(format!(
                "gather index {bad} out of range {}",
                vx.len()
            )));
        }
        let t = Tensor::new(shape, indices.iter().map(|&i| vx[i]).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather(x, indices), rg))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(NumericsError::shape("concat0", &first, s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let sx = self.shape(x).to_vec();
        if len == 0 || start + len > sx[0] {
            return Err(NumericsError::Index(format!(
                "slice0 {start}..{} of {:?}",
                start + len,
                sx
            )));
        }
        let inner: usize = sx[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = sx;
        shape[0] = len;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Slice0 { x, start }, rg))
    }

    /// Propagates d`loss`/d(node) to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let exec = par::exec();
        for id in (0..n).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                let g = node.grad.get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                add_into(g.data_mut(), &gout);
                continue;
            }
            let node = &self.nodes[id];
            let nodes = &self.nodes;
            let val = |v: Var| nodes[v.0].value.data();
            let wants = |v: Var| nodes[v.0].requires_grad;
            // acc(v, len) returns the accumulation buffer for input v.
            macro_rules! acc {
                ($v:expr) => {{
                    let v: Var = $v;
                    let len = nodes[v.0].value.numel();
                    grads[v.0].get_or_insert_with(|| vec![0.0; len])
                }};
            }
            match &node.op {
                Op::Leaf => unreachable!("handled above"),
                Op::Add(a, b) => {
                    for &v in [a, b].iter() {
                        if wants(*v) {
                            add_into(acc!(*v), &gout);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        add_into(acc!(*a), &gout);
                    }
                    if wants(*b) {
                        for (x, g) in acc!(*b).iter_mut().zip(&gout) {
                            *x -= g;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if wants(a) {
                        let vb = val(b).to_vec();
                        for ((x, g), y) in acc!(a).iter_mut().zip(&gout).zip(&vb) {
                            *x += g * y;
                        }
                    }
                    if wants(b) {
                        let va = val(a).to_vec();
                        for ((x, g), y) in acc!(b).iter_mut().zip(&gout).zip(&va) {
                            *x += g * y;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    for (x, g) in acc!(*a).iter_mut().zip(&gout) {
                        *x += g * s;
                    }
                }
                Op::AddBroadcast(x, y) => {
                    let (x, y) = (*x, *y);
                    if wants(x) {
                        add_into(acc!(x), &gout);
                    }
                    if wants(y) {
                        let buf = acc!(y);
                        let inner = buf.len();
                        for chunk in gout.chunks(inner) {
                            add_into(buf, chunk);
                        }
                    }
                }
                Op::Bmm {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                } => {
                    let (a, b, batch, m, k, n, trans_b) = (*a, *b, *batch, *m, *k, *n, *trans_b);
                    let (outer, inner) = split_exec(exec, batch);
                    if wants(a) {
                        let vb = val(b);
                        let da = acc!(a);
                        par::for_each_chunk(outer, da, m * k, |bi, d| {
                            let g = &gout[bi * m * n..(bi + 1) * m * n];
                            let bb = &vb[bi * k * n..(bi + 1) * k * n];
                            if trans_b {
                                kernels::mm_nn(inner, g, bb, d, m, n, k);
                            } else {
                                kernels::mm_nt(inner, g, bb, d, m, n, k);
                            }
                        });
                    }
                    if wants(b) {
                        let va = val(a);
                        let db = acc!(b);
                        par::for_each_chunk(outer, db, k * n, |bi, d| {
                            let g = &gout[bi * m * n..(bi + 1) * m * n];
                            let aa = &va[bi * m * k..(bi + 1) * m * k];
                            if trans_b {
                                // dB[n×k] = dCᵀ · A
                                kernels::mm_tn(inner, g, aa, d, n, m, k);
                            } else {
                                // dB[k×n] = Aᵀ · dC
                                kernels::mm_tn(inner, aa, g, d, k, m, n);
                            }
                        });
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (x, w, b, geom) = (*x, *w, *b, *geom);
                    if wants(x) {
                        let vw = val(w).to_vec();
                        kernels::conv2d_backward_input(exec, geom, &vw, &gout, acc!(x));
                    }
                    if wants(w) || wants(b) {
                        let vx = val(x).to_vec();
                        let mut dw = vec![0.0; nodes[w.0].value.numel()];
                        let mut db = vec![0.0; geom.c_out];
                        kernels::conv2d_backward_params(exec, geom, &vx, &gout, &mut dw, &mut db);
                        if wants(w) {
                            add_into(acc!(w), &dw);
                        }
                        if wants(b) {
                            add_into(acc!(b), &db);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let d = nodes[gamma.0].value.numel();
                    let gm = val(gamma).to_vec();
                    if wants(gamma) {
                        let dg = acc!(gamma);
                        for (row_g, row_x) in gout.chunks(d).zip(xhat.chunks(d)) {
                            for c in 0..d {
                                dg[c] += row_g[c] * row_x[c];
                            }
                        }
                    }
                    if wants(beta) {
                        let dbt = acc!(beta);
                        for row_g in gout.chunks(d) {
                            add_into(dbt, row_g);
                        }
                    }
                    if wants(x) {
                        let xhat = xhat.clone();
                        let rstd = rstd.clone();
                        let dx = acc!(x);
                        let mut gh = vec![0.0; d];
                        for (r, (row_g, row_x)) in gout.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let mut mean_gh = 0.0;
                            let mut mean_ghx = 0.0;
                            for c in 0..d {
                                gh[c] = row_g[c] * gm[c];
                                mean_gh += gh[c];
                                mean_ghx += gh[c] * row_x[c];
                            }
                            mean_gh /= d as f64;
                            mean_ghx /= d as f64;
                            for c in 0..d {
                                dx[r * d + c] += rstd[r] * (gh[c] - mean_gh - row_x[c] * mean_ghx);
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let x = *x;
                    let y = node.value.data().to_vec();
                    let d = *node.value.shape().last().unwrap();
                    let dx = acc!(x);
                    for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dxr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let vx = val(x).to_vec();
                    for ((d, g), xv) in acc!(x).iter_mut().zip(&gout).zip(&vx) {
                        *d += g * gelu_deriv(*xv);
                    }
                }
                Op::L1Mean(p, q) => {
                    let (p, q) = (*p, *q);
                    let (vp, vq) = (val(p).to_vec(), val(q).to_vec());
                    let scale = gout[0] / vp.len() as f64;
                    let sign: Vec<f64> = vp
                        .iter()
                        .zip(&vq)
                        .map(|(a, b)| {
                            let d = a - b;
                            if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    if wants(p) {
                        add_into(acc!(p), &sign);
                    }
                    if wants(q) {
                        for (d, s) in acc!(q).iter_mut().zip(&sign) {
                            *d -= s;
                        }
                    }
                }
                Op::Sum(x) => {
                    let g = gout[0];
                    acc!(*x).iter_mut().for_each(|d| *d += g);
                }
                Op::Mean(x) => {
                    let x = *x;
                    let g = gout[0] / nodes[x.0].value.numel() as f64;
                    acc!(x).iter_mut().for_each(|d| *d += g);
                }
                Op::Reshape(x) => add_into(acc!(*x), &gout),
                Op::Permute(x, axes) => {
                    let x = *x;
                    let idx = permute_indices(nodes[x.0].value.shape(), axes);
                    let dx = acc!(x);
                    for (g, &i) in gout.iter().zip(&idx) {
                        dx[i] += g;
                    }
                }
                Op::Gather(x, indices) => {
                    let x = *x;
                    let indices = Arc::clone(indices);
                    let dx = acc!(x);
                    for (g, &i) in gout.iter().zip(indices.iter()) {
                        dx[i] += g;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts.clone().iter() {
                        let len = nodes[p.0].value.numel();
                        if wants(p) {
                            add_into(acc!(p), &gout[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::Slice0 { x, start } => {
                    let x = *x;
                    let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                    let off = *start * inner;
                    let dx = acc!(x);
                    add_into(&mut dx[off..off + gout.len()], &gout);
                }
            }
        }
        Ok(())
    }
}

/// Batched products parallelize over the batch, single products over rows.
fn split_exec(exec: par::Exec, batch: usize) -> (par::Exec, par::Exec) {
    if batch > 1 {
        (exec, par::Exec::Sequential)
    } else {
        (par::Exec::Sequential, exec)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn for_each_input(op: &Op, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBroadcast(a, b) | Op::L1Mean(a, b) => {
            f(*a);
            f(*b);
        }
        Op::Bmm { a, b, .. } => {
            f(*a);
            f(*b);
        }
        Op::Conv2d { x, w, b, .. } => {
            f(*x);
            f(*w);
            f(*b);
        }
        Op::LayerNorm { x, gamma, beta, .. } => {
            f(*x);
            f(*gamma);
            f(*beta);
        }
        Op::Scale(x, _)
        | Op::Softmax(x)
        | Op::Gelu(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::Gather(x, _)
        | Op::Slice0 { x, .. } => f(*x),
        Op::Concat(parts) => parts.iter().for_each(|p| f(*p)),
    }
}

/// For each output flat index of a permutation, the source flat index.
fn permute_indices(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        idx.push(src);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            src += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::eye(3));
        let b = g.constant(Tensor::from_fn(&[3, 2], |k| k as f64 - 2.5));
        let c = g.matmul(i3, b).unwrap();
        assert_eq!(g.value(c), g.value(b));

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.constant(t(&[2, 2], &[0., 1., 1., 0.]));
        let c = g.matmul(a, p).unwrap();
        assert_eq!(g.value(c).data(), &[2., 1., 4., 3.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 4], |k| k as f64));
        let w = g.constant(Tensor::eye(4));
        let b0 = g.constant(Tensor::zeros(&[4]));
        let y = g.linear(x, w, Some(b0)).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let z = g.constant(Tensor::zeros(&[3, 4]));
        let w = g.constant(Tensor::from_fn(&[4, 2], |k| k as f64));
        let b = g.constant(t(&[2], &[0.5, -1.0]));
        let y = g.linear(z, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let gm = g.constant(Tensor::full(&[2], 1.0));
        let bt = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gm, bt, 1e-12).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-9 && (v[3] + 1.0).abs() < 1e-9);
        assert!(g.layer_norm(x, gm, bt, 0.0).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.3, 0.3, 0.0, 1000.0]));
        let y = g.softmax_rows(x);
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!(v[2] < 1e-300 && (v[3] - 1.0).abs() < 1e-15);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn l1_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3], |k| k as f64 * 0.25));
        let b = g.constant(Tensor::from_fn(&[2, 3], |k| k as f64 * 0.25 + 0.5));
        let l = g.l1_loss(a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = g.l1_loss(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.l1_loss(a, c).is_err());
    }

    #[test]
    fn backward_sum_and_independent_param() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |k| k as f64));
        let p = g.param(Tensor::zeros(&[4]));
        let _unused = g.scale(p, 2.0);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
        assert!(g.grad(p).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3], 2.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);
        assert!(matches!(g.backward(x), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn two_consumers_sum_contributions() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[4], |k| k as f64 - 1.0));
        let ax = g.scale(x, 1.5);
        let bx = g.scale(x, -0.25);
        let y = g.add(ax, bx).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.25; 4]);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |k| k as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        let (vx, vy) = (g.value(x), g.value(y));
        assert_eq!(vy.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(vy.get(&[c, a, b]), vx.get(&[a, b, c]));
                }
            }
        }
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5, 5]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(NumericsError::Dimension(_))));
    }
}
