//! Binary checkpoint: configuration, parameters and optional Adam state.
//!
//! Layout, little-endian: `"SWSF"`, `u16` version, `u32` config length and
//! config text, `u64` config fingerprint, `u64` epochs done, `u64` optimizer
//! step, `u32` tensor count, then per tensor `u32` name length, name, `u32`
//! rank, `u32` dims and `f32` values. Adam moments are stored as
//! `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, ParamStore, SwinError, SwinSf};
use crate::numerics::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"SWSF";
pub const CKPT_VERSION: u16 = 1;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SwinSf,
    pub epochs_done: u64,
    pub adam: Option<AdamSnapshot>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.ndim());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let text = cfg.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&cfg.fingerprint().to_le_bytes());
        out.extend_from_slice(&self.epochs_done.to_le_bytes());
        let step = self.adam.as_ref().map_or(0, |a| a.step);
        out.extend_from_slice(&step.to_le_bytes());
        let params = self.model.params();
        let n_adam = self.adam.as_ref().map_or(0, |a| a.m.len() + a.v.len());
        put_u32(&mut out, params.len() + n_adam);
        for (k, t) in params.iter() {
            put_tensor(&mut out, k, t);
        }
        if let Some(a) = &self.adam {
            for (k, t) in a.m.iter() {
                put_tensor(&mut out, &format!("{M_PREFIX}{k}"), t);
            }
            for (k, t) in a.v.iter() {
                put_tensor(&mut out, &format!("{V_PREFIX}{k}"), t);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), SwinError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SwinError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SwinError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(SwinError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(SwinError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = r.u32("config length")?;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| SwinError::Checkpoint("config text is not UTF-8".into()))?;
        let cfg = ModelConfig::from_text(text)?;
        let stored = r.u64("fingerprint")?;
        if stored != cfg.fingerprint() {
            return Err(SwinError::Checkpoint(format!(
                "config fingerprint {stored:016x} does not match stored config ({:016x})",
                cfg.fingerprint()
            )));
        }
        let epochs_done = r.u64("epoch")?;
        let step = r.u64("step")?;
        let n = r.u32("tensor count")?;
        let (mut params, mut m, mut v) = (ParamStore::default(), ParamStore::default(), ParamStore::default());
        for _ in 0..n {
            let nl = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(nl, "name")?)
                .map_err(|_| SwinError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")?);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| SwinError::Checkpoint(format!("tensor {name}: {e}")))?;
            if let Some(k) = name.strip_prefix(M_PREFIX) {
                m.insert(k, t);
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                v.insert(k, t);
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(SwinError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = SwinSf::from_parts(cfg.clone(), params)?;
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            m.check_layout(&cfg)?;
            v.check_layout(&cfg)?;
            Some(AdamSnapshot { step, m, v })
        };
        Ok(Checkpoint {
            model,
            epochs_done,
            adam,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SwinError> {
        if self.bytes.len() - self.pos < n {
            return Err(SwinError::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, SwinError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64, SwinError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SwinSf {
        SwinSf::new(ModelConfig {
            channels: 4,
            n_rssb: 1,
            n_sab_per_rssb: 1,
            window: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let model = small();
        let mut m = model.params().zeros_like();
        for (_, t) in m.iter_mut() {
            t.data_mut()[0] = 0.25;
        }
        let ck = Checkpoint {
            adam: Some(AdamSnapshot {
                step: 7,
                v: m.clone(),
                m,
            }),
            model,
            epochs_done: 3,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_damage() {
        let ck = Checkpoint {
            model: small(),
            epochs_done: 0,
            adam: None,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        // flip a digit inside the config text so the fingerprint no longer matches
        let mut bad = bytes.clone();
        let pos = bytes.windows(12).position(|w| w == b"channels = 4").unwrap() + 11;
        bad[pos] = b'8';
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
