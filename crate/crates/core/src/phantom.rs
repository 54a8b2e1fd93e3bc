//! Synthetic paired data: piecewise-constant ellipse phantoms and a noisy copy.
//!
//! A clean image is a large "body" ellipse plus smaller random ellipses that
//! add or remove intensity, clamped to `[0, 1]`. Edges are anti-aliased with
//! a one-pixel linear ramp on the approximate signed distance to the
//! boundary. The noisy image adds zero-mean Gaussian noise with standard
//! deviation `noise_sigma · (1 + dose_scale · clean)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::ImageVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub side: usize,
    pub count: usize,
    /// Inclusive range for the number of ellipses besides the body.
    pub ellipses: (usize, usize),
    /// Range of the absolute intensity of each inner ellipse.
    pub intensity: (f64, f64),
    pub noise_sigma: f64,
    /// Signal-dependent noise gain; 0 gives purely additive noise.
    pub dose_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            side: 64,
            count: 8,
            ellipses: (3, 6),
            intensity: (0.1, 0.4),
            noise_sigma: 0.05,
            dose_scale: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.side < 8 {
            return bad(format!("phantom side {} is below 8", self.side));
        }
        if self.count == 0 {
            return bad("phantom count must be positive".into());
        }
        if self.ellipses.0 > self.ellipses.1 {
            return bad(format!("empty ellipse count range {:?}", self.ellipses));
        }
        let (lo, hi) = self.intensity;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return bad(format!("invalid intensity range {:?}", self.intensity));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        if !(self.dose_scale >= 0.0 && self.dose_scale.is_finite()) {
            return bad(format!("dose_scale must be ≥ 0, got {}", self.dose_scale));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    /// Fraction of the pixel centred at `(x, y)` inside the ellipse.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let rho = (u * u + v * v).sqrt();
        if rho < 1e-9 {
            return 1.0;
        }
        // distance to the boundary along the ray, in pixels
        let dist = (rho - 1.0) / rho * (dx * dx + dy * dy).sqrt();
        (0.5 - dist).clamp(0.0, 1.0)
    }
}

fn clean_image(side: usize, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = side as f64;
    let mut shapes = vec![Ellipse {
        cx: s * rng.random_range(0.45..0.55),
        cy: s * rng.random_range(0.45..0.55),
        a: s * rng.random_range(0.36..0.46),
        b: s * rng.random_range(0.30..0.42),
        cos: 1.0,
        sin: 0.0,
        value: rng.random_range(0.35..0.5),
    }];
    let n = rng.random_range(spec.ellipses.0..=spec.ellipses.1);
    for _ in 0..n {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let magnitude = if spec.intensity.0 < spec.intensity.1 {
            rng.random_range(spec.intensity.0..spec.intensity.1)
        } else {
            spec.intensity.0
        };
        let sign = if rng.random_bool(0.7) { 1.0 } else { -1.0 };
        shapes.push(Ellipse {
            cx: s * rng.random_range(0.25..0.75),
            cy: s * rng.random_range(0.25..0.75),
            a: s * rng.random_range(0.04..0.2),
            b: s * rng.random_range(0.04..0.2),
            cos: theta.cos(),
            sin: theta.sin(),
            value: sign * magnitude,
        });
    }
    let mut img = vec![0.0; side * side];
    for (i, px) in img.iter_mut().enumerate() {
        let (x, y) = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
        let v: f64 = shapes.iter().map(|e| e.value * e.coverage(x, y)).sum();
        *px = v.clamp(0.0, 1.0);
    }
    img
}

/// `(clean, noisy)`. The clean range is `[0, 1]`; the noisy range is widened
/// to the extremes of the noisy pixels.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<(ImageVolume, ImageVolume)> {
    spec.validate()?;
    let mut shape_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let n = spec.side * spec.side;
    let mut clean = Vec::with_capacity(spec.count * n);
    let mut noisy = Vec::with_capacity(spec.count * n);
    for _ in 0..spec.count {
        for v in clean_image(spec.side, spec, &mut shape_rng) {
            let c = v as f32;
            clean.push(c);
            noisy.push(if spec.noise_sigma == 0.0 {
                c
            } else {
                let sigma = spec.noise_sigma * (1.0 + spec.dose_scale * v);
                (v + sigma * normal.sample(&mut noise_rng)) as f32
            });
        }
    }
    let lo = noisy.iter().fold(0.0f64, |m, &v| m.min(v as f64));
    let hi = noisy.iter().fold(1.0f64, |m, &v| m.max(v as f64));
    Ok((
        ImageVolume::new(spec.side, spec.side, spec.count, (0.0, 1.0), clean)?,
        ImageVolume::new(spec.side, spec.side, spec.count, (lo, hi), noisy)?,
    ))
}
