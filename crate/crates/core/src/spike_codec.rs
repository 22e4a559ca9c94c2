//! Bit-packed binary spike streams and their on-disk formats.
//!
//! Pixels are stored row-major within a frame, eight per byte, least
//! significant bit first. Each frame occupies `ceil(width*height/8)` bytes and
//! its trailing pad bits are zero.
//!
//! The `.spks` container is a 26-byte little-endian header followed by the
//! packed frames:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `SPKS`                   |
//! | 4      | 2    | version (u16, currently 1)     |
//! | 6      | 4    | width (u32)                    |
//! | 10     | 4    | height (u32)                   |
//! | 14     | 4    | t_len (u32)                    |
//! | 18     | 8    | tick duration (f64)            |

use std::io::{self, Read, Write};

use thiserror::Error;

pub const SPKS_MAGIC: [u8; 4] = *b"SPKS";
pub const SPKS_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic {0:?}, expected \"SPKS\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found}, expected {expected}")]
    Version { found: u16, expected: u16 },
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0} trailing bytes after the last frame")]
    TrailingData(usize),
    #[error("frame {0} has non-zero pad bits")]
    PadBits(usize),
    #[error("raw stream length {len} is not a multiple of the {frame_bytes}-byte frame size")]
    RawLength { len: usize, frame_bytes: usize },
    #[error("invalid stream: {0}")]
    Invalid(String),
    #[error("index ({t}, {i}, {j}) out of range for {t_len}×{height}×{width} stream")]
    Index {
        t: usize,
        i: usize,
        j: usize,
        t_len: usize,
        height: usize,
        width: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Bit order inside each byte of a raw camera dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitOrder {
    Lsb,
    Msb,
}

impl std::str::FromStr for BitOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lsb" => Ok(BitOrder::Lsb),
            "msb" => Ok(BitOrder::Msb),
            other => Err(format!("unknown bit order {other:?} (lsb|msb)")),
        }
    }
}

/// `T` binary `H×W` frames, bit-packed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeStream {
    width: usize,
    height: usize,
    t_len: usize,
    tick_duration: f64,
    bits: Vec<u8>,
}

pub fn frame_bytes(width: usize, height: usize) -> usize {
    (width * height).div_ceil(8)
}

impl SpikeStream {
    /// All-zero stream.
    pub fn zeros(width: usize, height: usize, t_len: usize) -> Self {
        assert!(width > 0 && height > 0 && t_len > 0, "empty stream");
        SpikeStream {
            width,
            height,
            t_len,
            tick_duration: 1.0,
            bits: vec![0; t_len * frame_bytes(width, height)],
        }
    }

    /// Packs one `bool` per pixel, laid out `[t][i][j]`.
    pub fn from_bools(width: usize, height: usize, t_len: usize, pixels: &[bool]) -> Result<Self, CodecError> {
        if pixels.len() != width * height * t_len {
            return Err(CodecError::Invalid(format!(
                "{} pixels for a {t_len}×{height}×{width} stream",
                pixels.len()
            )));
        }
        let mut s = Self::zeros(width, height, t_len);
        let fb = s.frame_bytes();
        let hw = width * height;
        for t in 0..t_len {
            let frame = &mut s.bits[t * fb..(t + 1) * fb];
            pack_frame(&pixels[t * hw..(t + 1) * hw], frame);
        }
        Ok(s)
    }

    /// Wraps already-packed LSB-first frames.
    pub fn from_packed(width: usize, height: usize, t_len: usize, bits: Vec<u8>) -> Result<Self, CodecError> {
        if width == 0 || height == 0 || t_len == 0 {
            return Err(CodecError::Invalid(format!(
                "zero dimension in {t_len}×{height}×{width}"
            )));
        }
        let fb = frame_bytes(width, height);
        if bits.len() != fb * t_len {
            return Err(CodecError::Invalid(format!(
                "{} payload bytes for {t_len} frames of {fb} bytes",
                bits.len()
            )));
        }
        let s = SpikeStream {
            width,
            height,
            t_len,
            tick_duration: 1.0,
            bits,
        };
        s.check_padding()?;
        Ok(s)
    }

    pub fn with_tick_duration(mut self, tick: f64) -> Self {
        self.tick_duration = tick;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn tick_duration(&self) -> f64 {
        self.tick_duration
    }

    pub fn frame_bytes(&self) -> usize {
        frame_bytes(self.width, self.height)
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    pub fn frame_packed(&self, t: usize) -> &[u8] {
        let fb = self.frame_bytes();
        &self.bits[t * fb..(t + 1) * fb]
    }

    pub(crate) fn frame_packed_mut(&mut self, t: usize) -> &mut [u8] {
        let fb = self.frame_bytes();
        &mut self.bits[t * fb..(t + 1) * fb]
    }

    fn check_padding(&self) -> Result<(), CodecError> {
        let hw = self.width * self.height;
        let used = hw % 8;
        if used == 0 {
            return Ok(());
        }
        let mask = !((1u8 << used) - 1);
        for t in 0..self.t_len {
            if self.frame_packed(t).last().copied().unwrap_or(0) & mask != 0 {
                return Err(CodecError::PadBits(t));
            }
        }
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> Result<bool, CodecError> {
        if t >= self.t_len || i >= self.height || j >= self.width {
            return Err(CodecError::Index {
                t,
                i,
                j,
                t_len: self.t_len,
                height: self.height,
                width: self.width,
            });
        }
        Ok(self.bit(t, i * self.width + j))
    }

    /// Unchecked read of pixel `p = i*width + j` of frame `t`.
    #[inline]
    pub fn bit(&self, t: usize, p: usize) -> bool {
        let byte = self.bits[t * self.frame_bytes() + p / 8];
        (byte >> (p % 8)) & 1 == 1
    }

    pub fn set(&mut self, t: usize, i: usize, j: usize, v: bool) {
        assert!(t < self.t_len && i < self.height && j < self.width);
        let fb = self.frame_bytes();
        let p = i * self.width + j;
        let byte = &mut self.bits[t * fb + p / 8];
        if v {
            *byte |= 1 << (p % 8);
        } else {
            *byte &= !(1 << (p % 8));
        }
    }

    /// One frame as 0/1 reals, row-major.
    pub fn frame_as_f64(&self, t: usize) -> Vec<f64> {
        (0..self.width * self.height)
            .map(|p| if self.bit(t, p) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn count_frame(&self, t: usize) -> u64 {
        self.frame_packed(t).iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn spike_count(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }

    /// Fraction of set bits over all frames and pixels.
    pub fn density(&self) -> f64 {
        self.spike_count() as f64 / (self.t_len * self.width * self.height) as f64
    }

    /// Frames `start..start+len` as a new stream.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<SpikeStream, CodecError> {
        if len == 0 || start + len > self.t_len {
            return Err(CodecError::Invalid(format!(
                "frames {start}..{} of a {}-frame stream",
                start + len,
                self.t_len
            )));
        }
        let fb = self.frame_bytes();
        Ok(SpikeStream {
            width: self.width,
            height: self.height,
            t_len: len,
            tick_duration: self.tick_duration,
            bits: self.bits[start * fb..(start + len) * fb].to_vec(),
        })
    }

    /// Spatial crop `h×w` at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<SpikeStream, CodecError> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(CodecError::Invalid(format!(
                "crop {h}×{w}@({top},{left}) outside {}×{}",
                self.height, self.width
            )));
        }
        let mut out = SpikeStream::zeros(w, h, self.t_len).with_tick_duration(self.tick_duration);
        for t in 0..self.t_len {
            for i in 0..h {
                for j in 0..w {
                    if self.bit(t, (top + i) * self.width + left + j) {
                        out.set(t, i, j, true);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write_spks<W: Write>(&self, mut sink: W) -> Result<(), CodecError> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(&SPKS_MAGIC);
        header.extend_from_slice(&SPKS_VERSION.to_le_bytes());
        for d in [self.width, self.height, self.t_len] {
            let d = u32::try_from(d).map_err(|_| CodecError::Invalid(format!("dimension {d} exceeds u32")))?;
            header.extend_from_slice(&d.to_le_bytes());
        }
        header.extend_from_slice(&self.tick_duration.to_le_bytes());
        sink.write_all(&header)?;
        sink.write_all(&self.bits)?;
        sink.flush()?;
        Ok(())
    }

    pub fn to_spks_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(HEADER_LEN + self.bits.len());
        self.write_spks(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_spks<R: Read>(mut source: R) -> Result<SpikeStream, CodecError> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        Self::from_spks_bytes(&buf)
    }

    pub fn from_spks_bytes(buf: &[u8]) -> Result<SpikeStream, CodecError> {
        if buf.len() < 4 {
            return Err(CodecError::Truncated {
                what: "header",
                expected: HEADER_LEN,
                found: buf.len(),
            });
        }
        let magic: [u8; 4] = buf[..4].try_into().unwrap();
        if magic != SPKS_MAGIC {
            return Err(CodecError::BadMagic(magic));
        }
        if buf.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                what: "header",
                expected: HEADER_LEN,
                found: buf.len(),
            });
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != SPKS_VERSION {
            return Err(CodecError::Version {
                found: version,
                expected: SPKS_VERSION,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
        let (width, height, t_len) = (u32_at(6), u32_at(10), u32_at(14));
        let tick_duration = f64::from_le_bytes(buf[18..26].try_into().unwrap());
        if width == 0 || height == 0 || t_len == 0 {
            return Err(CodecError::Invalid(format!(
                "zero dimension in {t_len}×{height}×{width}"
            )));
        }
        let expected = frame_bytes(width, height) * t_len;
        let payload = &buf[HEADER_LEN..];
        if payload.len() < expected {
            return Err(CodecError::Truncated {
                what: "payload",
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(CodecError::TrailingData(payload.len() - expected));
        }
        Ok(Self::from_packed(width, height, t_len, payload.to_vec())?.with_tick_duration(tick_duration))
    }

    /// Reads a headerless dump of consecutive `width×height` frames.
    pub fn read_raw_dat<R: Read>(
        mut source: R,
        width: usize,
        height: usize,
        order: BitOrder,
    ) -> Result<SpikeStream, CodecError> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        if width == 0 || height == 0 {
            return Err(CodecError::Invalid("zero raw frame dimension".into()));
        }
        let fb = frame_bytes(width, height);
        if buf.is_empty() || buf.len() % fb != 0 {
            return Err(CodecError::RawLength {
                len: buf.len(),
                frame_bytes: fb,
            });
        }
        if order == BitOrder::Msb {
            for b in &mut buf {
                *b = b.reverse_bits();
            }
        }
        let t_len = buf.len() / fb;
        // Raw dumps may carry junk in the pad bits; the container format may not.
        let used = (width * height) % 8;
        if used != 0 {
            let keep = (1u8 << used) - 1;
            for t in 0..t_len {
                buf[(t + 1) * fb - 1] &= keep;
            }
        }
        Self::from_packed(width, height, t_len, buf)
    }
}

fn pack_frame(pixels: &[bool], out: &mut [u8]) {
    for (byte, chunk) in out.iter_mut().zip(pixels.chunks(8)) {
        *byte = chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (k, &b)| acc | ((b as u8) << k));
    }
}
