//! Image stacks.
//!
//! ```text
//! "TDV1"  u16 version  u32 width  u32 height  u32 count  f64 lo  f64 hi
//! count·height·width × f32 pixels, row-major
//! ```
//!
//! Everything is little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TDV1";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4 + 2 * 8;

/// `count` single-channel images of equal size with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub range: (f64, f64),
    pub pixels: Vec<f32>,
}

impl ImageVolume {
    pub fn new(
        width: usize,
        height: usize,
        count: usize,
        range: (f64, f64),
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let v = Self {
            width,
            height,
            count,
            range,
            pixels,
        };
        v.validate()?;
        Ok(v)
    }

    /// Stacks `1×h×w` (or `h×w`) tensors.
    pub fn from_images(images: &[Tensor<f32>], range: (f64, f64)) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = image_dims(first)?;
        let mut pixels = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if image_dims(img)? != (h, w) {
                return Err(Error::Format(format!(
                    "image of shape {:?} in a {h}×{w} volume",
                    img.shape()
                )));
            }
            pixels.extend_from_slice(img.data());
        }
        Self::new(w, h, images.len(), range, pixels)
    }

    /// Checks dimensions, pixel count and the value range.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.count == 0 {
            return Err(Error::Format(format!(
                "volume dimensions must be positive, got {}×{}×{}",
                self.count, self.height, self.width
            )));
        }
        let (lo, hi) = self.range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Format(format!("invalid value range [{lo}, {hi}]")));
        }
        let n = self.count * self.height * self.width;
        if self.pixels.len() != n {
            return Err(Error::Format(format!(
                "{} pixels for a {}×{}×{} volume",
                self.pixels.len(),
                self.count,
                self.height,
                self.width
            )));
        }
        for (index, &p) in self.pixels.iter().enumerate() {
            let v = p as f64;
            if !(v >= lo && v <= hi) {
                return Err(Error::Range {
                    index,
                    value: v,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.width * self.height
    }

    /// Image `i` as a `1×h×w` tensor.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let n = self.image_len();
        Tensor::new(
            &[1, self.height, self.width],
            self.pixels[i * n..(i + 1) * n].to_vec(),
        )
        .expect("validated volume")
    }

    pub fn images(&self) -> Vec<Tensor<f32>> {
        (0..self.count).map(|i| self.image(i)).collect()
    }

    pub fn data_range(&self) -> f64 {
        self.range.1 - self.range.0
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.width, self.height, self.count] {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.range.0.to_le_bytes());
        out.extend_from_slice(&self.range.1.to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not an image volume (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported volume format version {version}, expected {VERSION}"
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let (width, height, count) = (u32_at(6), u32_at(10), u32_at(14));
        let range = (f64_at(18), f64_at(26));

        let expected = HEADER_LEN as u64 + 4 * (width as u64) * (height as u64) * (count as u64);
        if bytes.len() as u64 != expected {
            let actual = bytes.len() as u64;
            return Err(if actual < expected {
                Error::Truncated { expected, actual }
            } else {
                Error::Format(format!("{} trailing bytes after pixels", actual - expected))
            });
        }
        let pixels = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(width, height, count, range, pixels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn image_dims(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match *t.shape() {
        [1, h, w] | [h, w] => Ok((h, w)),
        ref s => Err(Error::Format(format!("{s:?} is not a single-channel image"))),
    }
}
