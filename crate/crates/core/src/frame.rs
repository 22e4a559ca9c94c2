//! Single-channel real-valued images and their portable-graymap encoding.

use std::fs::File;
use std::io::{BufRead, BufWriter, Seek, Write};
use std::path::Path;

use image::{ImageError, ImageFormat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("{width}×{height} frame needs {} values, got {got}", width * height)]
    Size { width: usize, height: usize, got: usize },
    #[error("frame sizes differ: {0}×{1} vs {2}×{3}")]
    Mismatch(usize, usize, usize, usize),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("unsupported graymap pixel format {0:?}")]
    PixelFormat(image::ColorType),
}

/// Row-major grayscale frame with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// Reconstruction output; always finite and clamped to `[0, 1]`.
pub type ReconFrame = Frame;

/// Bit depth of a written graymap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

impl Frame {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, FrameError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(FrameError::Size {
                width,
                height,
                got: values.len(),
            });
        }
        Ok(Frame { width, height, values })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Frame {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Frame { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.values {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        self
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Frame {
        assert!(top + h <= self.height && left + w <= self.width);
        Frame::from_fn(w, h, |i, j| self.at(top + i, left + j))
    }

    pub fn same_size(&self, other: &Frame) -> Result<(), FrameError> {
        if self.width != other.width || self.height != other.height {
            return Err(FrameError::Mismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// 8-bit levels, `value·255` rounded half up after clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect()
    }

    fn to_u16(&self) -> Vec<u16> {
        self.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16)
            .collect()
    }

    /// Writes a binary (`P5`) graymap.
    pub fn save_pgm(&self, path: &Path, depth: Depth) -> Result<(), FrameError> {
        let io = |e| FrameError::Image(ImageError::IoError(e));
        let mut sink = BufWriter::new(File::create(path).map_err(io)?);
        self.write_pgm(&mut sink, depth).map_err(io)?;
        sink.flush().map_err(io)
    }

    pub fn write_pgm<W: Write>(&self, mut sink: W, depth: Depth) -> std::io::Result<()> {
        let maxval = match depth {
            Depth::Eight => 255,
            Depth::Sixteen => 65535,
        };
        write!(sink, "P5\n{} {}\n{maxval}\n", self.width, self.height)?;
        match depth {
            Depth::Eight => sink.write_all(&self.to_u8()),
            Depth::Sixteen => {
                let bytes: Vec<u8> = self.to_u16().iter().flat_map(|v| v.to_be_bytes()).collect();
                sink.write_all(&bytes)
            }
        }
    }

    /// Reads an 8- or 16-bit graymap, scaling to `[0, 1]`.
    pub fn load_pgm(path: &Path) -> Result<Frame, FrameError> {
        let img = image::ImageReader::open(path)
            .map_err(image::ImageError::IoError)?
            .with_guessed_format()
            .map_err(image::ImageError::IoError)?
            .decode()?;
        Self::from_dynamic(img)
    }

    pub fn read_pgm<R: BufRead + Seek>(reader: R) -> Result<Frame, FrameError> {
        let img = image::load(reader, ImageFormat::Pnm)?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: image::DynamicImage) -> Result<Frame, FrameError> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values = match img {
            image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
            other => return Err(FrameError::PixelFormat(other.color())),
        };
        Frame::new(w, h, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_rounds_half_up() {
        let f = Frame::new(4, 1, vec![0.0, 0.5, 1.0, 1.5 / 255.0]).unwrap();
        assert_eq!(f.to_u8(), vec![0, 128, 255, 2]);
    }

    #[test]
    fn pgm_round_trip_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pgm");
        let f = Frame::from_fn(5, 3, |i, j| (i * 5 + j) as f64 / 14.0);
        f.save_pgm(&p, Depth::Sixteen).unwrap();
        assert!(std::fs::read(&p).unwrap().starts_with(b"P5\n5 3\n65535\n"));
        let g = Frame::load_pgm(&p).unwrap();
        for (a, b) in f.values().iter().zip(g.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        f.save_pgm(&p, Depth::Eight).unwrap();
        let g = Frame::load_pgm(&p).unwrap();
        assert_eq!(g.to_u8(), f.to_u8());
    }
}
