//! Dense float rasters with a fixed channel count.
//!
//! Storage is row-major and channel-interleaved, which is also the on-disk
//! layout: `data[(y * width + x) * C + c]`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<const C: usize> {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Channels 0/1/2 hold the object's X/Y/Z axis.
pub type TriAxisImage = Raster<3>;

/// Single-channel shaded rendering used as the conditioning signal.
pub type QueryImage = Raster<1>;

impl<const C: usize> Raster<C> {
    pub const CHANNELS: usize = C;

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * C],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * C],
        }
    }

    /// Panics if `data.len() != width * height * C`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * C, "raster buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * C + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        s / self.data.len() as f64
    }

    /// Rotates a square raster by 90°: a pixel offset `(dx, dy)` from the
    /// center becomes `(-dy, dx)`. Exact pixel permutation.
    pub fn rotate90(&self) -> Self {
        assert_eq!(self.width, self.height, "rotate90 needs a square raster");
        let n = self.width;
        let mut out = Self::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                for c in 0..C {
                    out.set(x, y, c, self.get(y, n - 1 - x, c));
                }
            }
        }
        out
    }

    /// Little-endian f32 bytes in storage order.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_bytes(width: usize, height: usize, bytes: &[u8]) -> io::Result<Self> {
        let expected = width * height * C * 4;
        if bytes.len() != expected {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!(
                    "raster file has {} bytes, expected {expected} for {width}x{height}x{C}",
                    bytes.len()
                ),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn write_f32(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_f32_bytes())
    }

    pub fn read_f32(path: &Path, width: usize, height: usize) -> io::Result<Self> {
        Self::from_f32_bytes(width, height, &fs::read(path)?)
    }

    /// Binary PPM (P6). Single-channel rasters are written as gray.
    pub fn write_ppm(&self, path: &Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.width * self.height * 3);
        for px in self.data.chunks_exact(C) {
            for c in 0..3 {
                let v = if C == 1 { px[0] } else { px.get(c).copied().unwrap_or(0.0) };
                bytes.push(to_byte(v));
            }
        }
        f.write_all(&bytes)?;
        f.flush()
    }
}

/// Scales by 255 and rounds half-up.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}
