//! PSNR and SSIM on frames with values in `[0, peak]`.

use super::TrainError;
use crate::frame::Frame;

/// Reported for identical frames, where the ratio is unbounded.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(a: &Frame, b: &Frame) -> Result<(), TrainError> {
    a.same_size(b).map_err(|e| TrainError::Metric(e.to_string()))
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64, TrainError> {
    check(a, b)?;
    let s: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.values().len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Frame, b: &Frame, peak: f64) -> Result<f64, TrainError> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (s * s));
        }
    }
    w
}

/// Mean SSIM over every position where the 11×11 Gaussian window fits.
pub fn ssim(a: &Frame, b: &Frame, peak: f64) -> Result<f64, TrainError> {
    check(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(TrainError::Metric(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let win = gaussian_window();
    let (va, vb) = (a.values(), b.values());
    let (ny, nx) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = (y + dy) * w + x + dx;
                    let g = win[dy * SSIM_WINDOW + dx];
                    let (p, q) = (va[k], vb[k]);
                    ma += g * p;
                    mb += g * q;
                    saa += g * p * p;
                    sbb += g * q * q;
                    sab += g * p * q;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
    }
    Ok(total / (nx * ny) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noisy(w: usize, h: usize, amp: f64) -> Frame {
        Frame::from_fn(w, h, |i, j| {
            0.5 + amp * if (i * 31 + j * 17) % 7 < 3 { 1.0 } else { -1.0 }
        })
    }

    #[test]
    fn psnr_cases() {
        let a = Frame::filled(16, 16, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = Frame::filled(16, 16, 0.2);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &Frame::filled(8, 16, 0.2), 1.0).is_err());
        let base = Frame::filled(16, 16, 0.5);
        let vals: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2]
            .iter()
            .map(|&amp| psnr(&base, &noisy(16, 16, amp), 1.0).unwrap())
            .collect();
        assert!(vals.windows(2).all(|p| p[1] < p[0]), "{vals:?}");
    }

    #[test]
    fn ssim_cases() {
        let x = Frame::from_fn(24, 20, |i, j| ((i * 7 + j * 3) % 10) as f64 / 10.0);
        assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
        let checker = Frame::from_fn(24, 24, |i, j| if (i / 2 + j / 2) % 2 == 0 { 0.0 } else { 1.0 });
        let inv = Frame::from_fn(24, 24, |i, j| 1.0 - checker.at(i, j));
        assert!(ssim(&checker, &inv, 1.0).unwrap() < 0.1);
        assert!(ssim(&Frame::filled(10, 12, 0.0), &Frame::filled(10, 12, 0.0), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn psnr_matches_direct_oracle(vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 144)) {
            let a = Frame::new(12, 12, vals.iter().map(|p| p.0).collect()).unwrap();
            let b = Frame::new(12, 12, vals.iter().map(|p| p.1).collect()).unwrap();
            let m = vals.iter().map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 144.0;
            let oracle = if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) };
            prop_assert!((psnr(&a, &b, 1.0).unwrap() - oracle).abs() <= 1e-9);
            let (s1, s2) = (ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
            prop_assert!((s1 - s2).abs() <= 1e-12);
        }
    }
}
