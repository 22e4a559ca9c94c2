//! Integrate-and-fire spike camera simulator.
//!
//! Each pixel integrates `alpha · I · frame_duration` per tick. When the
//! accumulator reaches `theta` the pixel emits a spike and `theta` is
//! subtracted, so the sub-threshold residual carries into the next cycle.
//! At most one spike is emitted per tick; an accumulator left above `theta`
//! fires again on the following tick.

mod dataset;
mod scene;

pub use dataset::{
    build_dataset, read_dataset, write_dataset, DatasetSample, DatasetSpec, Provenance, Windows, MANIFEST_NAME,
};
pub use scene::{synthetic_scene, SceneKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frame::{Frame, FrameError};
use crate::par::{self, Exec};
use crate::spike_codec::{CodecError, SpikeStream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sensor parameters: {0}")]
    Params(String),
    #[error("invalid luminance sequence: {0}")]
    Luminance(String),
    #[error("source {source_id} has {available} frames but windows {windows} need {required}")]
    InsufficientFrames {
        source_id: String,
        required: usize,
        available: usize,
        windows: String,
    },
    #[error("crop {crop_w}×{crop_h} does not fit source {source_id} of {width}×{height}")]
    Crop {
        source_id: String,
        crop_w: usize,
        crop_h: usize,
        width: usize,
        height: usize,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{path}: {source}")]
    SampleFile {
        path: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalized photon intensity frames, `[n][i][j]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LuminanceSequence {
    width: usize,
    height: usize,
    frames: Vec<f64>,
    frame_duration: f64,
    label: Option<String>,
}

impl LuminanceSequence {
    pub fn new(width: usize, height: usize, frames: Vec<f64>) -> Result<Self, SimError> {
        let hw = width * height;
        if hw == 0 || frames.is_empty() || !frames.len().is_multiple_of(hw) {
            return Err(SimError::Luminance(format!(
                "{} values do not form whole {width}×{height} frames",
                frames.len()
            )));
        }
        if let Some(bad) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SimError::Luminance(format!("value {bad} outside [0, 1]")));
        }
        Ok(LuminanceSequence {
            width,
            height,
            frames,
            frame_duration: 1.0,
            label: None,
        })
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self, SimError> {
        let first = frames.first().ok_or_else(|| SimError::Luminance("no frames".into()))?;
        let mut data = Vec::with_capacity(frames.len() * first.values().len());
        for f in frames {
            first.same_size(f)?;
            data.extend_from_slice(f.values());
        }
        Self::new(first.width(), first.height(), data)
    }

    pub fn with_frame_duration(mut self, t: f64) -> Result<Self, SimError> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(SimError::Luminance(format!("frame duration {t} must be positive")));
        }
        self.frame_duration = t;
        Ok(self)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / (self.width * self.height)
    }

    pub fn frame_duration(&self) -> f64 {
        self.frame_duration
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn frame_values(&self, n: usize) -> &[f64] {
        let hw = self.width * self.height;
        &self.frames[n * hw..(n + 1) * hw]
    }

    pub fn frame(&self, n: usize) -> Frame {
        Frame::new(self.width, self.height, self.frame_values(n).to_vec()).expect("valid dims")
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize) -> f64 {
        self.frames[(n * self.height + i) * self.width + j]
    }

    /// Frames `start..start+len` cropped to `h×w` at `(top, left)`.
    pub fn window(&self, start: usize, len: usize, top: usize, left: usize, h: usize, w: usize) -> LuminanceSequence {
        assert!(start + len <= self.n_frames() && top + h <= self.height && left + w <= self.width);
        let mut frames = Vec::with_capacity(len * h * w);
        for n in start..start + len {
            for i in top..top + h {
                let row = (n * self.height + i) * self.width;
                frames.extend_from_slice(&self.frames[row + left..row + left + w]);
            }
        }
        LuminanceSequence {
            width: w,
            height: h,
            frames,
            frame_duration: self.frame_duration,
            label: self.label.clone(),
        }
    }
}

/// Accumulator state at the first tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialCharge {
    Constant(f64),
    /// Independent uniform draws in `[0, theta)`, seeded.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorParams {
    pub alpha: f64,
    pub theta: f64,
    pub initial_charge: InitialCharge,
    pub seed: u64,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            alpha: 1.0,
            theta: 2.0,
            initial_charge: InitialCharge::Constant(0.0),
            seed: 0,
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(SimError::Params(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SimError::Params(format!("alpha must be positive, got {}", self.alpha)));
        }
        if let InitialCharge::Constant(c) = self.initial_charge {
            if !(0.0..self.theta).contains(&c) {
                return Err(SimError::Params(format!("initial charge {c} outside [0, theta)")));
            }
        }
        Ok(())
    }

    fn initial_charges(&self, n: usize) -> Vec<f64> {
        match self.initial_charge {
            InitialCharge::Constant(c) => vec![c; n],
            InitialCharge::Uniform => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..n).map(|_| rng.random_range(0.0..self.theta)).collect()
            }
        }
    }
}

/// Stream plus the per-pixel accumulator left after the last tick.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub stream: SpikeStream,
    pub residual: Vec<f64>,
}

pub fn simulate(lum: &LuminanceSequence, p: &SensorParams) -> Result<SpikeStream, SimError> {
    Ok(simulate_traced_with(par::exec(), lum, p)?.stream)
}

pub fn simulate_traced(lum: &LuminanceSequence, p: &SensorParams) -> Result<SimTrace, SimError> {
    simulate_traced_with(par::exec(), lum, p)
}

/// Simulation with an explicit execution strategy; output is identical for both.
pub fn simulate_traced_with(exec: Exec, lum: &LuminanceSequence, p: &SensorParams) -> Result<SimTrace, SimError> {
    p.validate()?;
    let (w, h, t_len) = (lum.width, lum.height, lum.n_frames());
    let gain = p.alpha * lum.frame_duration;
    let init = p.initial_charges(w * h);

    // Row-major rows of [t][j] firing flags followed by the row's residuals.
    let row_len = t_len * w + w;
    let mut rows = vec![0.0f64; h * row_len];
    par::for_each_chunk(exec, &mut rows, row_len, |i, row| {
        let (fires, resid) = row.split_at_mut(t_len * w);
        resid.copy_from_slice(&init[i * w..(i + 1) * w]);
        for t in 0..t_len {
            let lrow = &lum.frames[(t * h + i) * w..(t * h + i + 1) * w];
            let frow = &mut fires[t * w..(t + 1) * w];
            for j in 0..w {
                let a = resid[j] + gain * lrow[j];
                if a >= p.theta {
                    frow[j] = 1.0;
                    resid[j] = a - p.theta;
                } else {
                    resid[j] = a;
                }
            }
        }
    });

    let mut stream = SpikeStream::zeros(w, h, t_len).with_tick_duration(lum.frame_duration);
    let mut residual = vec![0.0; w * h];
    for (i, row) in rows.chunks(row_len).enumerate() {
        residual[i * w..(i + 1) * w].copy_from_slice(&row[t_len * w..]);
    }
    for t in 0..t_len {
        let frame = stream.frame_packed_mut(t);
        for i in 0..h {
            let fires = &rows[i * row_len + t * w..i * row_len + (t + 1) * w];
            for (j, &f) in fires.iter().enumerate() {
                if f != 0.0 {
                    let px = i * w + j;
                    frame[px / 8] |= 1 << (px % 8);
                }
            }
        }
    }
    Ok(SimTrace { stream, residual })
}

/// Spikes per tick at pixel `(i, j)`.
pub fn spike_rate(s: &SpikeStream, i: usize, j: usize) -> Result<f64, SimError> {
    s.get(0, i, j)?;
    let p = i * s.width() + j;
    let count = (0..s.t_len()).filter(|&t| s.bit(t, p)).count();
    Ok(count as f64 / s.t_len() as f64)
}
