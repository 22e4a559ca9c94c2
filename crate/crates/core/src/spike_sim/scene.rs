//! Analytic luminance scenes for desk-scale experiments.

use std::str::FromStr;

use super::LuminanceSequence;

pub const BAR_LEVEL: f64 = 0.9;
pub const BAR_BACKGROUND: f64 = 0.2;
pub const CHECKER_LOW: f64 = 0.2;
pub const CHECKER_HIGH: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneKind {
    /// Horizontal ramp `j / (w − 1)`, static.
    Gradient,
    /// Bright vertical bar sliding right by `speed` px/frame, wrapping.
    MovingBar,
    /// Static checkerboard of two levels.
    Checker,
    /// Uniform static field.
    Constant(f64),
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gradient" => Ok(SceneKind::Gradient),
            "moving_bar" | "moving-bar" => Ok(SceneKind::MovingBar),
            "checker" => Ok(SceneKind::Checker),
            other => {
                if let Some(v) = other.strip_prefix("constant:") {
                    let v: f64 = v.parse().map_err(|e| format!("constant level {v:?}: {e}"))?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(format!("constant level {v} outside [0, 1]"));
                    }
                    Ok(SceneKind::Constant(v))
                } else {
                    Err(format!(
                        "unknown scene {other:?} (gradient|moving_bar|checker|constant:<level>)"
                    ))
                }
            }
        }
    }
}

fn bar_width(w: usize) -> usize {
    (w / 8).max(1)
}

fn checker_tile(w: usize, h: usize) -> usize {
    (w.min(h) / 4).max(1)
}

pub fn synthetic_scene(kind: SceneKind, w: usize, h: usize, n_frames: usize, speed: f64) -> LuminanceSequence {
    assert!(w >= 1 && h >= 1 && n_frames >= 1, "scene dims must be positive");
    let mut data = Vec::with_capacity(w * h * n_frames);
    for n in 0..n_frames {
        for i in 0..h {
            for j in 0..w {
                let v = match kind {
                    SceneKind::Gradient => {
                        if w == 1 {
                            0.0
                        } else {
                            j as f64 / (w - 1) as f64
                        }
                    }
                    SceneKind::MovingBar => {
                        let start = (w / 4) as f64;
                        let pos = (start + speed * n as f64).floor().rem_euclid(w as f64) as usize;
                        let rel = (j + w - pos) % w;
                        if rel < bar_width(w) {
                            BAR_LEVEL
                        } else {
                            BAR_BACKGROUND
                        }
                    }
                    SceneKind::Checker => {
                        let t = checker_tile(w, h);
                        if (i / t + j / t).is_multiple_of(2) {
                            CHECKER_LOW
                        } else {
                            CHECKER_HIGH
                        }
                    }
                    SceneKind::Constant(c) => c,
                };
                data.push(v);
            }
        }
    }
    LuminanceSequence::new(w, h, data).expect("scene values lie in [0, 1]")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_ramp() {
        let s = synthetic_scene(SceneKind::Gradient, 5, 3, 4, 0.0);
        for n in 0..4 {
            for i in 0..3 {
                for j in 0..5 {
                    assert_eq!(s.at(n, i, j), j as f64 / 4.0);
                }
            }
        }
    }

    #[test]
    fn static_bar() {
        let s = synthetic_scene(SceneKind::MovingBar, 16, 8, 5, 0.0);
        for n in 1..5 {
            assert_eq!(s.frame_values(n), s.frame_values(0));
        }
        let moving = synthetic_scene(SceneKind::MovingBar, 16, 8, 5, 1.0);
        assert_ne!(moving.frame_values(1), moving.frame_values(0));
        assert_eq!(moving.at(1, 0, 5), BAR_LEVEL);
        assert_eq!(moving.at(1, 0, 4), BAR_BACKGROUND);
    }

    #[test]
    fn checker_mean() {
        let s = synthetic_scene(SceneKind::Checker, 8, 8, 1, 0.0);
        let mean = s.frame(0).mean();
        assert!((mean - (CHECKER_LOW + CHECKER_HIGH) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn parses_kinds() {
        assert_eq!("checker".parse::<SceneKind>().unwrap(), SceneKind::Checker);
        assert_eq!("constant:0.25".parse::<SceneKind>().unwrap(), SceneKind::Constant(0.25));
        assert!("constant:2".parse::<SceneKind>().is_err());
        assert!("plasma".parse::<SceneKind>().is_err());
    }
}
