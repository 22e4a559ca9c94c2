//! Spike attention block and the residual group built from it.
//!
//! Features are `[3C, H, W]`: channels `0..C` hold the left segment,
//! `C..2C` the middle and `2C..3C` the right. Only the middle segment is
//! updated by a block; the outer two are carried through so that later
//! blocks can keep attending to them.

use std::sync::Arc;

use super::attention::{sw_msa, tsa, MsaWeights, TsaWeights};
use super::params::Bound;
use super::window::WindowGeometry;
use super::{MlpForm, ModelConfig, SwinError};
use crate::numerics::{Graph, Var};

pub const LN_EPS: f64 = 1e-5;

/// Window geometries for the unshifted and shifted blocks at one resolution.
#[derive(Debug, Clone)]
pub struct Geometries {
    pub plain: WindowGeometry,
    pub shifted: WindowGeometry,
    part: [Arc<Vec<usize>>; 2],
    rev: [Arc<Vec<usize>>; 2],
}

impl Geometries {
    pub fn new(h: usize, w: usize, cfg: &ModelConfig) -> Self {
        let plain = WindowGeometry::new(h, w, cfg.window, 0);
        let shifted = WindowGeometry::new(h, w, cfg.window, cfg.shift());
        let c = cfg.channels;
        Geometries {
            part: [plain.partition_indices(c), shifted.partition_indices(c)],
            rev: [plain.reverse_indices(c), shifted.reverse_indices(c)],
            plain,
            shifted,
        }
    }

    /// Block `s` of a group uses the shifted layout when `s` is odd.
    pub fn for_block(&self, s: usize) -> (&WindowGeometry, &Arc<Vec<usize>>, &Arc<Vec<usize>>) {
        let k = s % 2;
        let geo = if k == 0 { &self.plain } else { &self.shifted };
        (geo, &self.part[k], &self.rev[k])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SabOutput {
    pub out: Var,
    /// `[n_windows · heads, N, N]`
    pub msa_attn: Var,
    /// `[n_windows, N, N]` when temporal attention is enabled.
    pub tsa_attn: Option<Var>,
}

pub fn sab_forward(
    g: &mut Graph,
    x: Var,
    p: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    geos: &Geometries,
    block: usize,
) -> Result<SabOutput, SwinError> {
    let c = cfg.channels;
    let s = g.shape(x).to_vec();
    let (geo, part, rev) = geos.for_block(block);
    if s.len() != 3 || s[0] != 3 * c || s[1] != geo.h || s[2] != geo.w {
        return Err(SwinError::Shape(format!(
            "spike attention block expects [{}, {}, {}], got {s:?}",
            3 * c,
            geo.h,
            geo.w
        )));
    }
    let v = |n: &str| p.var(&format!("{prefix}.{n}"));
    let n_tok = geo.n_windows() * geo.n_tokens();
    let x_l = g.slice0(x, 0, c)?;
    let x_m = g.slice0(x, c, c)?;
    let x_r = g.slice0(x, 2 * c, c)?;
    let t_m = g.gather(x_m, part.clone(), &[n_tok, c])?;
    let (g1, b1) = (v("norm1.g")?, v("norm1.b")?);
    let n_m = g.layer_norm(t_m, g1, b1, LN_EPS)?;

    let msa = MsaWeights {
        qkv_w: v("attn.qkv.w")?,
        qkv_b: v("attn.qkv.b")?,
        proj_w: v("attn.proj.w")?,
        proj_b: v("attn.proj.b")?,
        rel_bias: v("attn.rel_bias")?,
    };
    let (a, msa_attn) = sw_msa(g, n_m, geo, &msa, cfg.n_heads)?;
    let mut y = g.add(t_m, a)?;
    let mut tsa_attn = None;
    if cfg.use_tsa {
        let t_l = g.gather(x_l, part.clone(), &[n_tok, c])?;
        let t_r = g.gather(x_r, part.clone(), &[n_tok, c])?;
        let n_l = g.layer_norm(t_l, g1, b1, LN_EPS)?;
        let n_r = g.layer_norm(t_r, g1, b1, LN_EPS)?;
        let tw = TsaWeights {
            p_l: v("tsa.p_l")?,
            p_m: v("tsa.p_m")?,
            p_r: v("tsa.p_r")?,
            proj_w: v("tsa.proj.w")?,
            proj_b: v("tsa.proj.b")?,
        };
        let (t, attn) = tsa(g, n_l, n_m, n_r, geo, &tw)?;
        let t = g.scale(t, cfg.beta);
        y = g.add(y, t)?;
        tsa_attn = Some(attn);
    }

    let n2 = g.layer_norm(y, v("norm2.g")?, v("norm2.b")?, LN_EPS)?;
    let mlp_in = match cfg.mlp_form {
        MlpForm::PreNorm => n2,
        MlpForm::Literal => g.add(n2, y)?,
    };
    let h = g.linear(mlp_in, v("mlp.fc1.w")?, Some(v("mlp.fc1.b")?))?;
    let h = g.gelu(h);
    let h = g.linear(h, v("mlp.fc2.w")?, Some(v("mlp.fc2.b")?))?;
    let y = match cfg.mlp_form {
        MlpForm::PreNorm => g.add(y, h)?,
        MlpForm::Literal => h,
    };

    let y_m = g.gather(y, rev.clone(), &[c, geo.h, geo.w])?;
    let out = g.concat0(&[x_l, y_m, x_r])?;
    Ok(SabOutput {
        out,
        msa_attn,
        tsa_attn,
    })
}

/// Residual group `r`: its blocks, a 3×3 conv over all `3C` channels, and an
/// identity skip around the whole group.
pub fn rssb_forward(
    g: &mut Graph,
    x: Var,
    p: &Bound,
    r: usize,
    cfg: &ModelConfig,
    geos: &Geometries,
) -> Result<Var, SwinError> {
    let mut h = x;
    for s in 0..cfg.n_sab_per_rssb {
        h = sab_forward(g, h, p, &format!("rssb{r}.sab{s}"), cfg, geos, s)?.out;
    }
    let h = g.conv2d(
        h,
        p.var(&format!("rssb{r}.conv.w"))?,
        p.var(&format!("rssb{r}.conv.b"))?,
        1,
        1,
    )?;
    Ok(g.add(h, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::swinsf::ParamStore;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            channels: 4,
            n_rssb: 1,
            n_sab_per_rssb: 2,
            window: 3,
            n_heads: 2,
            ..Default::default()
        }
    }

    fn features(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3 * c, h, w], |k| ((k * 2654435761usize) % 1009) as f64 / 1009.0 - 0.5)
    }

    #[test]
    fn outer_segments_pass_through() {
        let cfg = small_cfg();
        let params = ParamStore::init(&cfg);
        let x0 = features(4, 7, 5);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let geos = Geometries::new(7, 5, &cfg);
        let x = g.constant(x0.clone());
        let out = sab_forward(&mut g, x, &p, "rssb0.sab1", &cfg, &geos, 1).unwrap().out;
        let o = g.value(out).data();
        let hw = 35;
        assert_eq!(&o[..4 * hw], &x0.data()[..4 * hw]);
        assert_eq!(&o[8 * hw..], &x0.data()[8 * hw..]);
        assert_ne!(&o[4 * hw..8 * hw], &x0.data()[4 * hw..8 * hw]);
    }

    #[test]
    fn rssb_with_zero_conv_and_blocks_is_identity() {
        let cfg = small_cfg();
        let mut params = ParamStore::init(&cfg);
        for (name, t) in params.iter_mut() {
            if name.contains("proj") || name.contains("fc2") || name.ends_with("conv.w") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let x0 = features(4, 6, 6);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let geos = Geometries::new(6, 6, &cfg);
        let x = g.constant(x0.clone());
        let y = rssb_forward(&mut g, x, &p, 0, &cfg, &geos).unwrap();
        assert_eq!(g.value(y).data(), x0.data());
    }

    #[test]
    fn zero_beta_matches_disabled_temporal_branch() {
        let cfg = ModelConfig {
            beta: 0.0,
            ..small_cfg()
        };
        let off = ModelConfig {
            use_tsa: false,
            ..cfg.clone()
        };
        let params = ParamStore::init(&cfg);
        let mut reduced = ParamStore::default();
        for (k, t) in params.iter().filter(|(k, _)| !k.contains(".tsa.")) {
            reduced.insert(k.clone(), t.clone());
        }
        let x0 = features(4, 6, 7);
        let run = |cfg: &ModelConfig, ps: &ParamStore| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g);
            let x = g.constant(x0.clone());
            let y = rssb_forward(&mut g, x, &p, 0, cfg, &Geometries::new(6, 7, cfg)).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(&cfg, &params), run(&off, &reduced));
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(d <= 1e-12, "{d}");
    }

    #[test]
    fn cyclic_shift_by_window_is_covariant() {
        let cfg = small_cfg();
        let params = ParamStore::init(&cfg);
        let (h, w) = (6, 9);
        let x0 = features(4, h, w);
        let rolled = Tensor::from_fn(&[12, h, w], |k| {
            let (ch, i, j) = (k / (h * w), (k / w) % h, k % w);
            x0.get(&[ch, (i + h - 3) % h, (j + w - 3) % w])
        });
        let run = |x0: &Tensor| {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let x = g.constant(x0.clone());
            let y = sab_forward(&mut g, x, &p, "rssb0.sab0", &cfg, &Geometries::new(h, w, &cfg), 0).unwrap();
            g.value(y.out).clone()
        };
        let (a, b) = (run(&x0), run(&rolled));
        for ch in 0..12 {
            for i in 0..h {
                for j in 0..w {
                    let d = (b.get(&[ch, i, j]) - a.get(&[ch, (i + h - 3) % h, (j + w - 3) % w])).abs();
                    assert!(d < 1e-12);
                }
            }
        }
    }
}
