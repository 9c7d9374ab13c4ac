//! Planar image arrays with values in `[0, 1]`.
//!
//! No decoding happens here. Images come either from a raw tensor file
//! (`MAIM` layout below) or from a seeded synthetic generator.
//!
//! ```text
//! magic "MAIM" | version u16 = 1 | channels u32 | height u32 | width u32
//! channels x height x width f32 LE, planar (channel-major)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"MAIM";
const RAW_VERSION: u16 = 1;
const RAW_HEADER: usize = 4 + 2 + 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image data",
                format!("{channels}x{height}x{width}"),
                data.len(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Non-overlapping `ps x ps` patches in row-major patch order, each
    /// flattened channel-major. Returns `(patch_count, patch_len, data)`.
    pub fn patches(&self, ps: usize) -> Result<(usize, usize, Vec<f64>)> {
        if ps == 0 || !self.height.is_multiple_of(ps) || !self.width.is_multiple_of(ps) {
            return Err(Error::shape(
                "image patching",
                format!("height and width divisible by patch size {ps}"),
                format!(
                    "{}x{} (pad or crop to {}x{})",
                    self.height,
                    self.width,
                    self.height.div_ceil(ps.max(1)) * ps,
                    self.width.div_ceil(ps.max(1)) * ps
                ),
            ));
        }
        let (ph, pw) = (self.height / ps, self.width / ps);
        let plen = self.channels * ps * ps;
        let mut out = Vec::with_capacity(ph * pw * plen);
        for py in 0..ph {
            for px in 0..pw {
                for c in 0..self.channels {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            out.push(self.get(c, py * ps + dy, px * ps + dx));
                        }
                    }
                }
            }
        }
        Ok((ph * pw, plen, out))
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(RAW_HEADER + 4 * self.data.len());
        buf.extend_from_slice(RAW_MAGIC);
        buf.extend_from_slice(&RAW_VERSION.to_le_bytes());
        for d in [self.channels, self.height, self.width] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < RAW_HEADER || &bytes[..4] != RAW_MAGIC {
            return Err(Error::BadMagic {
                expected: "MAIM".into(),
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != RAW_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                offset: 4,
                supported: vec![RAW_VERSION],
            });
        }
        let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(6), dim(10), dim(14));
        let expected = RAW_HEADER + 4 * c * h * w;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected),
                message: format!(
                    "expected {expected} bytes for {c}x{h}x{w}, found {}",
                    bytes.len()
                ),
            });
        }
        let data = bytes[RAW_HEADER..]
            .chunks_exact(4)
            .map(|ch| f64::from(f32::from_le_bytes(ch.try_into().unwrap())))
            .collect();
        Image::new(c, h, w, data)
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_bytes(&bytes)
    }
}

/// Seeded single-channel test image whose visible degradation decreases
/// with `quality` in `[0, 1]`: a smooth random pattern plus uniform noise
/// of amplitude `0.4 * (1 - quality)`.
pub fn synth_image(seed: u64, quality: f64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = rng.random_range(0.05..0.4);
    let fy = rng.random_range(0.05..0.4);
    let (p1, p2) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let amp = 0.4 * (1.0 - quality.clamp(0.0, 1.0));
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let base = 0.5 + 0.3 * (fx * x as f64 + p1).sin() * (fy * y as f64 + p2).cos();
            let noise = if amp > 0.0 {
                rng.random_range(-amp..amp)
            } else {
                0.0
            };
            data.push((base + noise).clamp(0.0, 1.0));
        }
    }
    Image {
        channels: 1,
        height: size,
        width: size,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_count_and_layout() {
        let data: Vec<f64> = (0..16 * 16).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::new(1, 16, 16, data).unwrap();
        let (p, plen, patches) = img.patches(8).unwrap();
        assert_eq!((p, plen), (4, 64));
        // second patch starts at column 8 of row 0
        assert_eq!(patches[plen], img.get(0, 0, 8));
        assert_eq!(patches[2 * plen], img.get(0, 8, 0));
    }

    #[test]
    fn non_divisible_suggests_padding() {
        let img = Image::zeros(1, 20, 16);
        let err = img.patches(8).unwrap_err().to_string();
        assert!(err.contains("pad or crop to 24x16"), "{err}");
    }

    #[test]
    fn raw_round_trip() {
        let img = synth_image(4, 0.3, 8);
        let back = Image::from_raw_bytes(&img.to_raw_bytes()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(Image::from_raw_bytes(&img.to_raw_bytes()[..30]).is_err());
    }

    #[test]
    fn synth_is_seeded_and_in_range() {
        let a = synth_image(9, 0.2, 16);
        assert_eq!(a, synth_image(9, 0.2, 16));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
