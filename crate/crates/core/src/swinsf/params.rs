//! Named parameter tensors and their initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, SwinError};
use crate::numerics::{Graph, Tensor, Var};

pub const SEGMENTS: [&str; 3] = ["l", "m", "r"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Kernel of the first feature-extraction conv for a given patch size.
pub fn feature_kernel(patch: usize) -> usize {
    (2 * (patch / 2) + 1).max(3)
}

/// Every parameter of the model in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let m = cfg.window;
    let hidden = c * cfg.mlp_ratio;
    let mut v = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| v.push(ParamSpec { name, shape, init });
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, co: usize, ci: usize, k: usize| {
        push(format!("{p}.w"), vec![co, ci, k, k], Init::FanIn(ci * k * k));
        push(format!("{p}.b"), vec![co], Init::Zeros);
    };
    let lin = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, i: usize, o: usize, bias: bool| {
        push(format!("{p}.w"), vec![i, o], Init::Normal(0.02));
        if bias {
            push(format!("{p}.b"), vec![o], Init::Zeros);
        }
    };
    let k1 = feature_kernel(cfg.patch_size);
    let [tl, tm, tr] = [cfg.windows.left, cfg.windows.mid, cfg.windows.right];
    for (seg, t) in SEGMENTS.iter().zip([tl, tm, tr]) {
        conv(&mut push, &format!("fe.{seg}.conv1"), c, t, k1);
        conv(&mut push, &format!("fe.{seg}.conv2"), c, c, 3);
    }
    for r in 0..cfg.n_rssb {
        for s in 0..cfg.n_sab_per_rssb {
            let p = format!("rssb{r}.sab{s}");
            push(format!("{p}.norm1.g"), vec![c], Init::Ones);
            push(format!("{p}.norm1.b"), vec![c], Init::Zeros);
            lin(&mut push, &format!("{p}.attn.qkv"), c, 3 * c, true);
            lin(&mut push, &format!("{p}.attn.proj"), c, c, true);
            push(
                format!("{p}.attn.rel_bias"),
                vec![(2 * m - 1) * (2 * m - 1), cfg.n_heads],
                Init::Zeros,
            );
            if cfg.use_tsa {
                for seg in SEGMENTS {
                    push(format!("{p}.tsa.p_{seg}"), vec![c, c], Init::Normal(0.02));
                }
                lin(&mut push, &format!("{p}.tsa.proj"), c, c, true);
            }
            push(format!("{p}.norm2.g"), vec![c], Init::Ones);
            push(format!("{p}.norm2.b"), vec![c], Init::Zeros);
            lin(&mut push, &format!("{p}.mlp.fc1"), c, hidden, true);
            lin(&mut push, &format!("{p}.mlp.fc2"), hidden, c, true);
        }
        conv(&mut push, &format!("rssb{r}.conv"), 3 * c, 3 * c, 3);
    }
    let p2 = cfg.patch_size * cfg.patch_size;
    for seg in SEGMENTS {
        conv(&mut push, &format!("head.{seg}.conv1"), c, c, 3);
        conv(&mut push, &format!("head.{seg}.conv2"), p2, c, 3);
    }
    v
}

/// Parameter tensors keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Fresh parameters; values are rounded to `f32` so checkpoints are exact.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Normal(sd) => {
                    let d = Normal::new(0.0, sd).expect("positive std");
                    Tensor::from_fn(&spec.shape, |_| d.sample(&mut rng) as f32 as f64)
                }
                Init::FanIn(fan) => {
                    let b = 1.0 / (fan as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.random_range(-b..b) as f32 as f64)
                }
            };
            tensors.insert(spec.name, t);
        }
        ParamStore { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<(), SwinError> {
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(SwinError::Layout(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for s in specs {
            match self.tensors.get(&s.name) {
                None => return Err(SwinError::Layout(format!("missing parameter {}", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(SwinError::Layout(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }
}

/// Graph handles of a [`ParamStore`] bound into one [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, SwinError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SwinError::Layout(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects the gradient of every bound tensor; untouched ones read as zero.
    pub fn grads(&self, g: &Graph) -> ParamStore {
        ParamStore {
            tensors: self
                .vars
                .iter()
                .map(|(k, &v)| {
                    let t = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                    (k.clone(), t)
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_layout_checks() {
        let cfg = ModelConfig {
            channels: 4,
            n_rssb: 1,
            n_sab_per_rssb: 2,
            ..Default::default()
        };
        let a = ParamStore::init(&cfg);
        assert_eq!(a, ParamStore::init(&cfg));
        assert_ne!(a, ParamStore::init(&ModelConfig { seed: 1, ..cfg.clone() }));
        a.check_layout(&cfg).unwrap();
        let no_tsa = ModelConfig {
            use_tsa: false,
            ..cfg.clone()
        };
        assert!(a.check_layout(&no_tsa).is_err());
        assert_eq!(a.len() - ParamStore::init(&no_tsa).len(), 2 * 5);
        assert!(a
            .get("rssb0.sab1.attn.rel_bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(a.get("fe.m.conv1.w").unwrap().shape(), &[4, 11, 3, 3]);
        for (_, t) in a.iter() {
            assert!(t.data().iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn feature_kernel_sizes() {
        assert_eq!(feature_kernel(1), 3);
        assert_eq!(feature_kernel(2), 3);
        assert_eq!(feature_kernel(4), 5);
    }
}
