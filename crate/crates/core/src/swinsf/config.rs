use std::fmt::Write as _;
use std::str::FromStr;

use super::SwinError;
use crate::spike_sim::Windows;

/// How the MLP sub-layer of a spike attention block is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpForm {
    /// `y + MLP(LN(y))`
    PreNorm,
    /// `MLP(LN(y) + y)`, no outer residual.
    Literal,
}

impl FromStr for MlpForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prenorm" => Ok(MlpForm::PreNorm),
            "literal" => Ok(MlpForm::Literal),
            o => Err(format!("unknown mlp_form {o:?} (prenorm|literal)")),
        }
    }
}

impl std::fmt::Display for MlpForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MlpForm::PreNorm => "prenorm",
            MlpForm::Literal => "literal",
        })
    }
}

/// Architecture and loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub n_rssb: usize,
    pub n_sab_per_rssb: usize,
    /// Spatial window side `M`.
    pub window: usize,
    /// Heads of the windowed self-attention; temporal attention is single-head.
    pub n_heads: usize,
    pub patch_size: usize,
    pub windows: Windows,
    /// Weight of the temporal attention branch.
    pub beta: f64,
    /// Weight of the adjacent-frame loss terms.
    pub lambda: f64,
    pub mlp_ratio: usize,
    pub mlp_form: MlpForm,
    /// `false` drops the temporal attention branch and its parameters.
    pub use_tsa: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            n_rssb: 2,
            n_sab_per_rssb: 6,
            window: 5,
            n_heads: 2,
            patch_size: 1,
            windows: Windows::new(7, 11, 7),
            beta: 0.1,
            lambda: 0.1,
            mlp_ratio: 4,
            mlp_form: MlpForm::PreNorm,
            use_tsa: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 250×400 setting: 96 channels, 28/41/28 windows.
    pub fn full_250x400() -> Self {
        ModelConfig {
            channels: 96,
            windows: Windows::new(28, 41, 28),
            ..Default::default()
        }
    }

    /// The 1000×1000 setting: 64 channels, one head, patch size 4.
    pub fn full_1000x1000() -> Self {
        ModelConfig {
            channels: 64,
            n_heads: 1,
            patch_size: 4,
            windows: Windows::new(28, 41, 28),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SwinError> {
        let bad = |m: String| Err(SwinError::Config(m));
        if self.channels == 0 || self.n_heads == 0 || !self.channels.is_multiple_of(self.n_heads) {
            return bad(format!(
                "channels {} must be a positive multiple of n_heads {}",
                self.channels, self.n_heads
            ));
        }
        if self.window == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return bad("window, patch_size and mlp_ratio must be at least 1".into());
        }
        if self.n_rssb == 0 || self.n_sab_per_rssb == 0 {
            return bad("n_rssb and n_sab_per_rssb must be at least 1".into());
        }
        if self.windows.left == 0 || self.windows.mid == 0 || self.windows.right == 0 {
            return bad("temporal windows must be positive".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "beta {} and lambda {} must be finite and non-negative",
                self.beta, self.lambda
            ));
        }
        Ok(())
    }

    pub fn shift(&self) -> usize {
        self.window / 2
    }

    /// Canonical `key = value` text; also the fingerprint input.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.windows;
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "n_rssb = {}", self.n_rssb);
        let _ = writeln!(s, "n_sab_per_rssb = {}", self.n_sab_per_rssb);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "t_left = {}", w.left);
        let _ = writeln!(s, "t_mid = {}", w.mid);
        let _ = writeln!(s, "t_right = {}", w.right);
        let _ = writeln!(s, "beta = {:?}", self.beta);
        let _ = writeln!(s, "lambda = {:?}", self.lambda);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "mlp_form = {}", self.mlp_form);
        let _ = writeln!(s, "use_tsa = {}", self.use_tsa);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Sets one field from its textual key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SwinError> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T, SwinError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| SwinError::Config(format!("{key} = {v:?}: {e}")))
        }
        match key {
            "channels" => self.channels = p(key, value)?,
            "n_rssb" => self.n_rssb = p(key, value)?,
            "n_sab_per_rssb" => self.n_sab_per_rssb = p(key, value)?,
            "window" => self.window = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "patch_size" => self.patch_size = p(key, value)?,
            "t_left" => self.windows.left = p(key, value)?,
            "t_mid" => self.windows.mid = p(key, value)?,
            "t_right" => self.windows.right = p(key, value)?,
            "windows" => self.windows = value.parse().map_err(SwinError::Config)?,
            "beta" => self.beta = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "mlp_ratio" => self.mlp_ratio = p(key, value)?,
            "mlp_form" => self.mlp_form = value.parse().map_err(SwinError::Config)?,
            "use_tsa" => self.use_tsa = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(SwinError::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        Self::default().set(key, "").map_or_else(
            |e| !matches!(&e, SwinError::Config(m) if m.starts_with("unknown model key")),
            |_| true,
        )
    }

    pub fn from_text(text: &str) -> Result<Self, SwinError> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// FNV-1a of the canonical text.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, SwinError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SwinError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_fingerprint() {
        let mut c = ModelConfig::full_1000x1000();
        c.beta = 0.3;
        c.mlp_form = MlpForm::Literal;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        assert_ne!(ModelConfig::default().fingerprint(), c.fingerprint());
    }

    #[test]
    fn validation() {
        let c = ModelConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            beta: -0.1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_text("colour = blue").is_err());
        assert!(ModelConfig::from_text("channels 3").is_err());
        assert!(ModelConfig::is_key("beta") && !ModelConfig::is_key("epochs"));
    }

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.n_rssb, c.n_sab_per_rssb, c.window), (2, 6, 5));
        assert_eq!((c.beta, c.lambda), (0.1, 0.1));
        let p = ModelConfig::full_250x400();
        assert_eq!((p.channels, p.windows.left, p.windows.mid), (96, 28, 41));
    }
}
