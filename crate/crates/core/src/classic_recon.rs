//! Texture-from-ISI and texture-from-playback estimators.
//!
//! Both invert the integrate-and-fire model: a pixel under constant
//! intensity `I` fires every `theta / (alpha · T · I)` ticks, so
//! `I ≈ theta / (alpha · T · isi)` and `I ≈ count · theta / (alpha · T · w)`.
//! Outputs are clamped to `[0, 1]`.

use thiserror::Error;

use crate::frame::ReconFrame;
use crate::par;
use crate::spike_codec::SpikeStream;
use crate::spike_sim::SensorParams;

#[derive(Debug, Error, PartialEq)]
pub enum ReconError {
    #[error("reference tick {t_ref} outside stream of {t_len} ticks")]
    TickOutOfRange { t_ref: usize, t_len: usize },
    #[error("playback window must be at least one tick")]
    EmptyWindow,
}

fn gain(s: &SpikeStream, p: &SensorParams) -> f64 {
    p.alpha * s.tick_duration()
}

fn check_tick(s: &SpikeStream, t_ref: usize) -> Result<(), ReconError> {
    if t_ref >= s.t_len() {
        return Err(ReconError::TickOutOfRange {
            t_ref,
            t_len: s.t_len(),
        });
    }
    Ok(())
}

/// Inter-spike interval around `t_ref` for pixel `p`, if one can be formed.
///
/// Uses the gap from the latest spike at or before `t_ref` to the next one.
/// Before the first spike the first gap is used; after the last spike the
/// last gap is used.
fn isi_at(s: &SpikeStream, p: usize, t_ref: usize) -> Option<usize> {
    let mut prev: Option<usize> = None;
    let mut before_prev: Option<usize> = None;
    for t in 0..s.t_len() {
        if !s.bit(t, p) {
            continue;
        }
        match prev {
            Some(a) if t > t_ref => return Some(t - a),
            Some(a) => {
                before_prev = Some(a);
                prev = Some(t);
            }
            None if t > t_ref => {
                // first spike lies after t_ref: use the first gap
                return (t + 1..s.t_len()).find(|&u| s.bit(u, p)).map(|u| u - t);
            }
            None => prev = Some(t),
        }
    }
    match (before_prev, prev) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    }
}

pub fn tfi(s: &SpikeStream, t_ref: usize, p: &SensorParams) -> Result<ReconFrame, ReconError> {
    check_tick(s, t_ref)?;
    let g = gain(s, p);
    let values = par::map_indices(par::exec(), s.width() * s.height(), |px| match isi_at(s, px, t_ref) {
        Some(isi) => (p.theta / (g * isi as f64)).clamp(0.0, 1.0),
        None => 0.0,
    });
    Ok(ReconFrame::new(s.width(), s.height(), values).expect("stream dims"))
}

/// Tick range `[lo, hi)` of a playback window centred on `t_ref`.
pub fn tfp_window(t_len: usize, t_ref: usize, w: usize) -> (usize, usize) {
    let lo = t_ref.saturating_sub(w / 2);
    let hi = (t_ref + w.div_ceil(2)).min(t_len);
    (lo, hi)
}

pub fn tfp(s: &SpikeStream, t_ref: usize, w: usize, p: &SensorParams) -> Result<ReconFrame, ReconError> {
    check_tick(s, t_ref)?;
    if w == 0 {
        return Err(ReconError::EmptyWindow);
    }
    let (lo, hi) = tfp_window(s.t_len(), t_ref, w);
    let w_eff = (hi - lo) as f64;
    let g = gain(s, p);
    let values = par::map_indices(par::exec(), s.width() * s.height(), |px| {
        let c = (lo..hi).filter(|&t| s.bit(t, px)).count() as f64;
        (c * p.theta / (g * w_eff)).clamp(0.0, 1.0)
    });
    Ok(ReconFrame::new(s.width(), s.height(), values).expect("stream dims"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spike_sim::{simulate, spike_rate, LuminanceSequence};

    fn constant_stream(v: f64, n: usize) -> SpikeStream {
        simulate(
            &LuminanceSequence::new(3, 2, vec![v; 6 * n]).unwrap(),
            &SensorParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn tfi_recovers_half() {
        let s = constant_stream(0.5, 40);
        for t_ref in [0, 3, 17, 39] {
            let f = tfi(&s, t_ref, &SensorParams::default()).unwrap();
            assert!(f.values().iter().all(|&v| v == 0.5), "t_ref {t_ref}: {:?}", f.values());
        }
    }

    #[test]
    fn tfi_degenerate_streams() {
        let p = SensorParams::default();
        let z = SpikeStream::zeros(3, 2, 10);
        assert!(tfi(&z, 4, &p).unwrap().values().iter().all(|&v| v == 0.0));
        let ones = SpikeStream::from_bools(3, 2, 10, &[true; 60]).unwrap();
        assert!(tfi(&ones, 4, &p).unwrap().values().iter().all(|&v| v == 1.0));
        let mut one = SpikeStream::zeros(1, 1, 10);
        one.set(3, 0, 0, true);
        assert_eq!(tfi(&one, 5, &p).unwrap().values(), &[0.0]);
        assert_eq!(
            tfi(&z, 10, &p),
            Err(ReconError::TickOutOfRange { t_ref: 10, t_len: 10 })
        );
    }

    #[test]
    fn isi_selection_rules() {
        // spikes at 2, 5, 11
        let mut s = SpikeStream::zeros(1, 1, 14);
        for t in [2, 5, 11] {
            s.set(t, 0, 0, true);
        }
        assert_eq!(isi_at(&s, 0, 0), Some(3));
        assert_eq!(isi_at(&s, 0, 2), Some(3));
        assert_eq!(isi_at(&s, 0, 5), Some(6));
        assert_eq!(isi_at(&s, 0, 10), Some(6));
        assert_eq!(isi_at(&s, 0, 13), Some(6));
    }

    #[test]
    fn tfp_rate_law_trace() {
        // rate 0.25 for I = 0.5: one spike per 4-tick window
        let s = constant_stream(0.5, 40);
        let f = tfp(&s, 20, 4, &SensorParams::default()).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.5));
        assert_eq!(tfp_window(40, 20, 4), (18, 22));
    }

    #[test]
    fn tfp_zero_and_full_window() {
        let p = SensorParams::default();
        let z = SpikeStream::zeros(3, 2, 9);
        assert!(tfp(&z, 4, 3, &p).unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(tfp(&z, 4, 0, &p), Err(ReconError::EmptyWindow));

        let s = constant_stream(0.3, 33);
        let f = tfp(&s, 33 / 2, 33, &p).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let r = spike_rate(&s, i, j).unwrap();
                assert!((f.at(i, j) - (r * p.theta / p.alpha).min(1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edge_windows_renormalize() {
        assert_eq!(tfp_window(10, 0, 6), (0, 3));
        assert_eq!(tfp_window(10, 9, 6), (6, 10));
    }
}
