//! Per-sample PSNR/SSIM tables for learned and classic reconstructors.

use std::fmt::Write as _;

use super::metrics::{psnr, ssim};
use super::TrainError;
use crate::classic_recon::{tfi, tfp};
use crate::frame::Frame;
use crate::par;
use crate::spike_sim::{DatasetSample, SensorParams, Windows};
use crate::swinsf::SwinSf;

pub const SEGMENT_NAMES: [&str; 3] = ["left", "mid", "right"];

#[derive(Debug, Clone)]
pub enum Reconstructor<'a> {
    SwinSf(&'a SwinSf),
    Tfi(SensorParams),
    /// Playback window in ticks; `None` uses each segment's own length.
    Tfp(SensorParams, Option<usize>),
    /// The ground truth itself, as a sanity row.
    GroundTruth,
}

impl Reconstructor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Reconstructor::SwinSf(_) => "swinsf",
            Reconstructor::Tfi(_) => "tfi",
            Reconstructor::Tfp(..) => "tfp",
            Reconstructor::GroundTruth => "ground_truth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample: String,
    /// Left, middle, right.
    pub psnr: [f64; 3],
    pub ssim: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,sample,psnr_left,ssim_left,psnr_mid,ssim_mid,psnr_right,ssim_right\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = write!(s, "{},{}", self.method, r.sample);
            for k in 0..3 {
                let _ = write!(s, ",{:.6},{:.6}", r.psnr[k], r.ssim[k]);
            }
            s.push('\n');
        }
        s
    }

    /// Human-readable table, middle frame first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:<12} {:>9} {:>7}  {:>9} {:>7}  {:>9} {:>7}",
            "method", "sample", "psnr_mid", "ssim_mid", "psnr_l", "ssim_l", "psnr_r", "ssim_r"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                s,
                "{:<14} {:<12} {:>9.3} {:>7.4}  {:>9.3} {:>7.4}  {:>9.3} {:>7.4}",
                self.method, r.sample, r.psnr[1], r.ssim[1], r.psnr[0], r.ssim[0], r.psnr[2], r.ssim[2]
            );
        }
        s
    }
}

fn reconstruct(rec: &Reconstructor, sample: &DatasetSample, windows: Windows) -> Result<[Frame; 3], TrainError> {
    let s = &sample.stream;
    if s.t_len() != windows.total() {
        return Err(TrainError::Contract(format!(
            "sample has {} ticks, windows {windows} need {}",
            s.t_len(),
            windows.total()
        )));
    }
    let refs = windows.gt_offsets();
    let segs = windows.segments();
    Ok(match rec {
        Reconstructor::SwinSf(m) => m.infer(s)?,
        Reconstructor::Tfi(p) => [tfi(s, refs[0], p)?, tfi(s, refs[1], p)?, tfi(s, refs[2], p)?],
        Reconstructor::Tfp(p, w) => {
            let win = |k: usize| w.unwrap_or(segs[k].1);
            [
                tfp(s, refs[0], win(0), p)?,
                tfp(s, refs[1], win(1), p)?,
                tfp(s, refs[2], win(2), p)?,
            ]
        }
        Reconstructor::GroundTruth => sample.gt.clone(),
    })
}

pub fn sample_label(k: usize) -> String {
    format!("sample_{k:04}")
}

/// Scores `samples` (labelled by their position) against their ground truth.
pub fn evaluate(samples: &[DatasetSample], rec: &Reconstructor, windows: Windows) -> Result<EvalReport, TrainError> {
    evaluate_indexed(samples, &(0..samples.len()).collect::<Vec<_>>(), rec, windows)
}

pub fn evaluate_indexed(
    samples: &[DatasetSample],
    indices: &[usize],
    rec: &Reconstructor,
    windows: Windows,
) -> Result<EvalReport, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let rows = par::map_indices(par::exec(), indices.len(), |n| -> Result<EvalRow, TrainError> {
        let k = indices[n];
        let sample = &samples[k];
        let out = reconstruct(rec, sample, windows)?;
        let mut row = EvalRow {
            sample: sample_label(k),
            psnr: [0.0; 3],
            ssim: [0.0; 3],
        };
        for (s, (o, gt)) in out.iter().zip(&sample.gt).enumerate() {
            row.psnr[s] = psnr(o, gt, 1.0)?;
            row.ssim[s] = ssim(o, gt, 1.0)?;
        }
        Ok(row)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut mean = EvalRow {
        sample: "mean".into(),
        psnr: [0.0; 3],
        ssim: [0.0; 3],
    };
    for r in &rows {
        for s in 0..3 {
            mean.psnr[s] += r.psnr[s];
            mean.ssim[s] += r.ssim[s];
        }
    }
    let n = rows.len() as f64;
    for s in 0..3 {
        mean.psnr[s] /= n;
        mean.ssim[s] /= n;
    }
    Ok(EvalReport {
        method: rec.name().into(),
        rows,
        mean,
    })
}
