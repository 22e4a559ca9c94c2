//! Paired spike-stream / ground-truth samples.
//!
//! A sample is a contiguous run of `left + mid + right` frames cut from a
//! luminance source. Segments tile each source without overlap. The ground
//! truth of a segment is the luminance frame at its temporal midpoint,
//! index `start + (len − 1) / 2`.
//!
//! On disk a dataset is a directory holding, per sample `k`,
//! `sample_kkkk.spks` and `sample_kkkk_{l,m,r}.pgm` (16-bit graymaps), plus
//! `manifest.txt` with one whitespace-separated line per sample:
//!
//! ```text
//! <stream> <gt_left> <gt_mid> <gt_right> <source_id> <top> <left> <start>
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{simulate, InitialCharge, LuminanceSequence, SensorParams, SimError};
use crate::frame::{Depth, Frame};
use crate::spike_codec::SpikeStream;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Temporal segment lengths, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Windows {
    pub left: usize,
    pub mid: usize,
    pub right: usize,
}

impl Windows {
    pub const fn new(left: usize, mid: usize, right: usize) -> Self {
        Windows { left, mid, right }
    }

    pub fn total(&self) -> usize {
        self.left + self.mid + self.right
    }

    /// Offsets of the three segments' midpoint frames within a sample.
    pub fn gt_offsets(&self) -> [usize; 3] {
        [
            (self.left - 1) / 2,
            self.left + (self.mid - 1) / 2,
            self.left + self.mid + (self.right - 1) / 2,
        ]
    }

    /// `(start, len)` of each segment within a sample.
    pub fn segments(&self) -> [(usize, usize); 3] {
        [
            (0, self.left),
            (self.left, self.mid),
            (self.left + self.mid, self.right),
        ]
    }
}

impl fmt::Display for Windows {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.left, self.mid, self.right)
    }
}

impl std::str::FromStr for Windows {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("window {p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [l, m, r] if l > 0 && m > 0 && r > 0 => Ok(Windows::new(l, m, r)),
            _ => Err(format!("expected three positive lengths l,m,r, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub crop_w: usize,
    pub crop_h: usize,
    pub windows: Windows,
    /// Number of samples; defaults to one per available segment.
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source_id: String,
    pub top: usize,
    pub left: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub stream: SpikeStream,
    /// Left, middle and right ground truths.
    pub gt: [Frame; 3],
    pub provenance: Provenance,
}

pub fn build_dataset(
    sources: &[LuminanceSequence],
    spec: &DatasetSpec,
    params: &SensorParams,
    seed: u64,
) -> Result<Vec<DatasetSample>, SimError> {
    params.validate()?;
    let need = spec.windows.total();
    if sources.is_empty() {
        return Err(SimError::Luminance("no source sequences".into()));
    }
    let ids: Vec<String> = sources
        .iter()
        .enumerate()
        .map(|(k, s)| s.label().map_or_else(|| k.to_string(), str::to_string))
        .collect();
    for (src, id) in sources.iter().zip(&ids) {
        if src.n_frames() < need {
            return Err(SimError::InsufficientFrames {
                source_id: id.clone(),
                required: need,
                available: src.n_frames(),
                windows: spec.windows.to_string(),
            });
        }
        if spec.crop_w == 0 || spec.crop_h == 0 || spec.crop_w > src.width() || spec.crop_h > src.height() {
            return Err(SimError::Crop {
                source_id: id.clone(),
                crop_w: spec.crop_w,
                crop_h: spec.crop_h,
                width: src.width(),
                height: src.height(),
            });
        }
    }
    let segments: Vec<(usize, usize)> = sources
        .iter()
        .enumerate()
        .flat_map(|(k, s)| (0..s.n_frames() / need).map(move |q| (k, q * need)))
        .collect();
    let count = spec.count.unwrap_or(segments.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = spec.windows.gt_offsets();
    let mut out = Vec::with_capacity(count);
    for n in 0..count {
        let (k, start) = segments[n % segments.len()];
        let src = &sources[k];
        let top = rng.random_range(0..=src.height() - spec.crop_h);
        let left = rng.random_range(0..=src.width() - spec.crop_w);
        let clip = src.window(start, need, top, left, spec.crop_h, spec.crop_w);
        let mut p = params.clone();
        if p.initial_charge == InitialCharge::Uniform {
            p.seed = params.seed.wrapping_add(n as u64);
        }
        let stream = simulate(&clip, &p)?;
        let gt = offsets.map(|o| clip.frame(o));
        out.push(DatasetSample {
            stream,
            gt,
            provenance: Provenance {
                source_id: ids[k].clone(),
                top,
                left,
                start,
            },
        });
    }
    Ok(out)
}

fn sample_paths(k: usize) -> [String; 4] {
    [
        format!("sample_{k:04}.spks"),
        format!("sample_{k:04}_l.pgm"),
        format!("sample_{k:04}_m.pgm"),
        format!("sample_{k:04}_r.pgm"),
    ]
}

/// Writes samples and the manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[DatasetSample]) -> Result<PathBuf, SimError> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (k, s) in samples.iter().enumerate() {
        let names = sample_paths(k);
        s.stream.write_spks(fs::File::create(dir.join(&names[0]))?)?;
        for (g, name) in s.gt.iter().zip(&names[1..]) {
            g.save_pgm(&dir.join(name), Depth::Sixteen)?;
        }
        let p = &s.provenance;
        manifest.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            names[0], names[1], names[2], names[3], p.source_id, p.top, p.left, p.start
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest)?;
    Ok(path)
}

fn wrap<E: std::error::Error + Send + Sync + 'static>(path: &Path, e: E) -> SimError {
    SimError::SampleFile {
        path: path.display().to_string(),
        source: Box::new(e),
    }
}

/// Loads every sample listed in a manifest.
pub fn read_dataset(manifest: &Path) -> Result<Vec<DatasetSample>, SimError> {
    let text = fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(SimError::Manifest {
                line: ln + 1,
                msg: format!("expected 8 fields, found {}", f.len()),
            });
        }
        let num = |s: &str| {
            s.parse::<usize>().map_err(|e| SimError::Manifest {
                line: ln + 1,
                msg: format!("{s:?}: {e}"),
            })
        };
        let spath = base.join(f[0]);
        let file = fs::File::open(&spath).map_err(|e| wrap(&spath, e))?;
        let stream = SpikeStream::read_spks(std::io::BufReader::new(file)).map_err(|e| wrap(&spath, e))?;
        let mut gts = Vec::with_capacity(3);
        for name in &f[1..4] {
            let p = base.join(name);
            let g = Frame::load_pgm(&p).map_err(|e| wrap(&p, e))?;
            if g.width() != stream.width() || g.height() != stream.height() {
                return Err(SimError::Manifest {
                    line: ln + 1,
                    msg: format!(
                        "ground truth {}×{} does not match stream {}×{}",
                        g.width(),
                        g.height(),
                        stream.width(),
                        stream.height()
                    ),
                });
            }
            gts.push(g);
        }
        let gt: [Frame; 3] = gts.try_into().expect("three frames");
        out.push(DatasetSample {
            stream,
            gt,
            provenance: Provenance {
                source_id: f[4].to_string(),
                top: num(f[5])?,
                left: num(f[6])?,
                start: num(f[7])?,
            },
        });
    }
    Ok(out)
}
