//! Whole-image inference from overlapping patches.
//!
//! With patch side `p`, the image is reflect-padded by `p/4` on every side
//! and cut into `p×p` patches at stride `p/2`. Only the central `(p/2)²` of
//! each output is kept, and those crops tile the original image exactly. A
//! side that is not a multiple of `p/2` gets extra reflected rows or
//! columns at the bottom or right, which are cropped away afterwards.

use crate::error::{shape_err, Error, Result};
use crate::model::{TedNet, TedNetParams};
use crate::tensor::Tensor;

/// Patch placement for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    /// Rows and columns of patches.
    pub rows: usize,
    pub cols: usize,
}

impl TilePlan {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch < 4 || patch % 4 != 0 {
            return Err(Error::Config(format!(
                "tiling needs a patch side divisible by 4, got {patch}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(shape_err("tile", format!("empty image {height}×{width}")));
        }
        let crop = patch / 2;
        Ok(Self {
            patch,
            height,
            width,
            rows: height.div_ceil(crop),
            cols: width.div_ceil(crop),
        })
    }

    pub fn crop(&self) -> usize {
        self.patch / 2
    }

    pub fn margin(&self) -> usize {
        self.patch / 4
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left corners of the kept crops, in image coordinates. Patch
    /// `(r, c)` starts `margin` pixels above and left of its crop.
    pub fn crop_origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let s = self.crop();
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| (r * s, c * s)))
    }

    /// How many crops write each pixel; all ones for a valid plan.
    pub fn coverage(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        let s = self.crop();
        for (r0, c0) in self.crop_origins() {
            for r in r0..(r0 + s).min(self.height) {
                for c in c0..(c0 + s).min(self.width) {
                    counts[r * self.width + c] += 1;
                }
            }
        }
        counts
    }
}

/// Maps any integer onto `0..n` by mirroring about the edge pixels.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn plane(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        ref s => Err(shape_err("tile_denoise", format!("{s:?} is not a single-channel image"))),
    }
}

/// The `p×p` input patch whose crop starts at `(r0, c0)`.
pub fn extract_patch(image: &Tensor<f32>, plan: &TilePlan, r0: usize, c0: usize) -> Result<Tensor<f32>> {
    let (h, w) = plane(image)?;
    let (p, m) = (plan.patch, plan.margin() as isize);
    let src = image.data();
    let mut out = Vec::with_capacity(p * p);
    for i in 0..p {
        let r = reflect(r0 as isize - m + i as isize, h);
        for j in 0..p {
            out.push(src[r * w + reflect(c0 as isize - m + j as isize, w)]);
        }
    }
    Tensor::new(&[1, p, p], out)
}

/// Denoises an arbitrary-size `h×w` or `1×h×w` image patch by patch.
pub fn tile_denoise(image: &Tensor<f32>, net: &TedNet, params: &TedNetParams) -> Result<Tensor<f32>> {
    tile_map(image, net.config().patch_side, |patch| net.forward(patch, params))
}

/// The tiling machinery with an arbitrary per-patch function.
pub fn tile_map(
    image: &Tensor<f32>,
    patch: usize,
    mut f: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let (h, w) = plane(image)?;
    let plan = TilePlan::new(h, w, patch)?;
    let (s, m) = (plan.crop(), plan.margin());
    let mut out = vec![0.0f32; h * w];
    for (r0, c0) in plan.crop_origins() {
        let x = extract_patch(image, &plan, r0, c0)?;
        let y = f(&x)?;
        if y.shape() != [1, patch, patch] {
            return Err(shape_err("tile_denoise", format!("patch output {:?}", y.shape())));
        }
        let yd = y.data();
        for r in 0..s.min(h - r0) {
            let src = (m + r) * patch + m;
            let n = s.min(w - c0);
            out[(r0 + r) * w + c0..][..n].copy_from_slice(&yd[src..src + n]);
        }
    }
    Tensor::new(image.shape(), out)
}
