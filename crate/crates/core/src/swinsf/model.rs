//! Full reconstruction network: per-segment feature extraction, residual
//! attention groups, and three reconstruction heads.

use std::sync::Arc;

use super::block::{rssb_forward, Geometries};
use super::params::{feature_kernel, Bound, ParamStore, SEGMENTS};
use super::{ModelConfig, SwinError};
use crate::frame::{Frame, ReconFrame};
use crate::numerics::{Graph, Tensor, Var};
use crate::spike_codec::SpikeStream;

/// Spike frames of each segment as `[T_s, H, W]` tensors.
pub fn segment_tensors(stream: &SpikeStream, cfg: &ModelConfig) -> Result<[Tensor; 3], SwinError> {
    let total = cfg.windows.total();
    if stream.t_len() != total {
        return Err(SwinError::StreamLength {
            expected: total,
            found: stream.t_len(),
        });
    }
    let (h, w) = (stream.height(), stream.width());
    let mk = |(start, len): (usize, usize)| {
        let mut data = Vec::with_capacity(len * h * w);
        for t in start..start + len {
            data.extend(stream.frame_as_f64(t));
        }
        Tensor::new(&[len, h, w], data).expect("segment shape")
    };
    let [a, b, c] = cfg.windows.segments();
    Ok([mk(a), mk(b), mk(c)])
}

/// Shallow features `[3C, H/p, W/p]`: conv (stride p) → GELU → 3×3 conv per segment.
pub fn extract_spike_features(
    g: &mut Graph,
    segments: &[Tensor; 3],
    p: &Bound,
    cfg: &ModelConfig,
) -> Result<Var, SwinError> {
    let k1 = feature_kernel(cfg.patch_size);
    let mut parts = Vec::with_capacity(3);
    for (seg, t) in SEGMENTS.iter().zip(segments) {
        let x = g.constant(t.clone());
        let pre = format!("fe.{seg}");
        let h = g.conv2d(
            x,
            p.var(&format!("{pre}.conv1.w"))?,
            p.var(&format!("{pre}.conv1.b"))?,
            cfg.patch_size,
            k1 / 2,
        )?;
        let h = g.gelu(h);
        let h = g.conv2d(
            h,
            p.var(&format!("{pre}.conv2.w"))?,
            p.var(&format!("{pre}.conv2.b"))?,
            1,
            1,
        )?;
        parts.push(h);
    }
    Ok(g.concat0(&parts)?)
}

/// Indices rearranging `[p², h', w']` into `[1, h, w]`, cropping overhang.
fn pixel_shuffle_indices(p: usize, hs: usize, ws: usize, h: usize, w: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            idx.push((((i % p) * p + j % p) * hs + i / p) * ws + j / p);
        }
    }
    Arc::new(idx)
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub params: Bound,
    /// Shallow features `[3C, h', w']`.
    pub features: Var,
    /// Unclamped left, middle and right reconstructions, each `[1, H, W]`.
    pub outputs: [Var; 3],
}

pub fn model_forward(
    g: &mut Graph,
    stream: &SpikeStream,
    cfg: &ModelConfig,
    params: &ParamStore,
) -> Result<Forward, SwinError> {
    let segs = segment_tensors(stream, cfg)?;
    let p = params.bind(g);
    let f_s = extract_spike_features(g, &segs, &p, cfg)?;
    let (hs, ws) = (g.shape(f_s)[1], g.shape(f_s)[2]);
    let geos = Geometries::new(hs, ws, cfg);
    let mut h = f_s;
    for r in 0..cfg.n_rssb {
        h = rssb_forward(g, h, &p, r, cfg, &geos)?;
    }
    let fused = g.add(f_s, h)?;
    let c = cfg.channels;
    let pz = cfg.patch_size;
    let shuffle = pixel_shuffle_indices(pz, hs, ws, stream.height(), stream.width());
    let mut outs = Vec::with_capacity(3);
    for (k, seg) in SEGMENTS.iter().enumerate() {
        let x = g.slice0(fused, k * c, c)?;
        let pre = format!("head.{seg}");
        let y = g.conv2d(
            x,
            p.var(&format!("{pre}.conv1.w"))?,
            p.var(&format!("{pre}.conv1.b"))?,
            1,
            1,
        )?;
        let y = g.gelu(y);
        let y = g.conv2d(
            y,
            p.var(&format!("{pre}.conv2.w"))?,
            p.var(&format!("{pre}.conv2.b"))?,
            1,
            1,
        )?;
        outs.push(g.gather(y, shuffle.clone(), &[1, stream.height(), stream.width()])?);
    }
    Ok(Forward {
        params: p,
        features: f_s,
        outputs: [outs[0], outs[1], outs[2]],
    })
}

/// `λ·(L1_l + L1_r) + L1_m` with mean-reduced L1 terms.
pub fn reconstruction_loss(
    g: &mut Graph,
    outputs: &[Var; 3],
    targets: &[Var; 3],
    lambda: f64,
) -> Result<Var, SwinError> {
    let l = g.l1_loss(outputs[0], targets[0])?;
    let m = g.l1_loss(outputs[1], targets[1])?;
    let r = g.l1_loss(outputs[2], targets[2])?;
    let side = g.add(l, r)?;
    let side = g.scale(side, lambda);
    Ok(g.add(side, m)?)
}

fn frame_tensor(f: &Frame) -> Tensor {
    Tensor::new(&[1, f.height(), f.width()], f.values().to_vec()).expect("frame shape")
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinSf {
    cfg: ModelConfig,
    params: ParamStore,
}

impl SwinSf {
    pub fn new(cfg: ModelConfig) -> Result<Self, SwinError> {
        cfg.validate()?;
        let params = ParamStore::init(&cfg);
        Ok(SwinSf { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self, SwinError> {
        cfg.validate()?;
        params.check_layout(&cfg)?;
        Ok(SwinSf { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, stream: &SpikeStream) -> Result<Forward, SwinError> {
        model_forward(g, stream, &self.cfg, &self.params)
    }

    /// Reconstructions clamped to `[0, 1]`.
    pub fn infer(&self, stream: &SpikeStream) -> Result<[ReconFrame; 3], SwinError> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, stream)?;
        let (h, w) = (stream.height(), stream.width());
        let mk = |v: Var| {
            let vals = g.value(v).data().to_vec();
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(SwinError::NonFinite("reconstruction".into()));
            }
            Ok(ReconFrame::new(w, h, vals).expect("output shape").clamped())
        };
        Ok([mk(fw.outputs[0])?, mk(fw.outputs[1])?, mk(fw.outputs[2])?])
    }

    fn loss_graph(&self, g: &mut Graph, stream: &SpikeStream, gt: &[Frame; 3]) -> Result<(Forward, Var), SwinError> {
        for f in gt {
            if f.width() != stream.width() || f.height() != stream.height() {
                return Err(SwinError::Shape(format!(
                    "ground truth {}x{} does not match stream {}x{}",
                    f.width(),
                    f.height(),
                    stream.width(),
                    stream.height()
                )));
            }
        }
        let fw = self.forward(g, stream)?;
        let t = [
            g.constant(frame_tensor(&gt[0])),
            g.constant(frame_tensor(&gt[1])),
            g.constant(frame_tensor(&gt[2])),
        ];
        let loss = reconstruction_loss(g, &fw.outputs, &t, self.cfg.lambda)?;
        Ok((fw, loss))
    }

    pub fn loss(&self, stream: &SpikeStream, gt: &[Frame; 3]) -> Result<f64, SwinError> {
        let mut g = Graph::new();
        let (_, loss) = self.loss_graph(&mut g, stream, gt)?;
        Ok(g.value(loss).item())
    }

    /// Loss and its gradient with respect to every parameter tensor.
    pub fn loss_and_grads(&self, stream: &SpikeStream, gt: &[Frame; 3]) -> Result<(f64, ParamStore), SwinError> {
        let mut g = Graph::new();
        let (fw, loss) = self.loss_graph(&mut g, stream, gt)?;
        g.backward(loss)?;
        Ok((g.value(loss).item(), fw.params.grads(&g)))
    }
}
