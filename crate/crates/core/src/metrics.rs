//! Image quality metrics, computed in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};
use crate::volume::ImageVolume;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub rmse: f64,
    pub data_range: f64,
}

impl MetricReport {
    pub fn compute<T: Element>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<Self> {
        Ok(Self {
            ssim: ssim(a, b, data_range)?,
            rmse: rmse(a, b)?,
            data_range,
        })
    }
}

/// Per-image reports plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub images: Vec<MetricReport>,
    pub mean: MetricReport,
}

impl EvaluationReport {
    pub fn from_reports(images: Vec<MetricReport>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = images.len() as f64;
        let mean = MetricReport {
            ssim: images.iter().map(|r| r.ssim).sum::<f64>() / n,
            rmse: images.iter().map(|r| r.rmse).sum::<f64>() / n,
            data_range: images[0].data_range,
        };
        Ok(Self { images, mean })
    }
}

/// Compares every image of `test` with the same image of `reference`, using
/// the reference's declared range as the SSIM data range.
pub fn evaluate(test: &ImageVolume, reference: &ImageVolume) -> Result<EvaluationReport> {
    if (test.count, test.height, test.width) != (reference.count, reference.height, reference.width) {
        return Err(shape_err(
            "evaluate",
            format!(
                "{}×{}×{} vs {}×{}×{}",
                test.count, test.height, test.width, reference.count, reference.height, reference.width
            ),
        ));
    }
    let range = reference.data_range();
    let reports = (0..test.count)
        .map(|i| MetricReport::compute(&test.image(i), &reference.image(i), range))
        .collect::<Result<_>>()?;
    EvaluationReport::from_reports(reports)
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sqrt(mean((a − b)²))`.
pub fn rmse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "rmse")?;
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok((sq / a.numel() as f64).sqrt())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

fn plane_dims<T: Element>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        ref s => Err(shape_err("ssim", format!("{s:?} is not a single-channel image"))),
    }
}

/// Mean SSIM over every 11×11 Gaussian window (σ = 1.5) lying fully inside
/// the image.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Config(format!("SSIM data range must be positive, got {data_range}")));
    }
    let (h, w) = plane_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err(
            "ssim",
            format!("{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    let x: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let taps = gaussian_taps();
    let mut window = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for (i, wi) in taps.iter().enumerate() {
        for (j, wj) in taps.iter().enumerate() {
            window[i * SSIM_WINDOW + j] = wi * wj;
        }
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);

    let mut total = 0.0;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let patch = |i: usize| (r0 + i / SSIM_WINDOW) * w + c0 + i % SSIM_WINDOW;
            let (mut mx, mut my) = (0.0, 0.0);
            for (i, wt) in window.iter().enumerate() {
                mx += wt * x[patch(i)];
                my += wt * y[patch(i)];
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for (i, wt) in window.iter().enumerate() {
                let dx = x[patch(i)] - mx;
                let dy = y[patch(i)] - my;
                vx += wt * dx * dx;
                vy += wt * dy * dy;
                cxy += wt * (dx * dy);
            }
            total += ((2.0 * (mx * my) + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(seed: u64, side: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[side, side], (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let z = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let b = Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap();
        assert_eq!(rmse(&z, &b).unwrap(), 12.5f64.sqrt());
        assert_eq!(rmse(&b, &b).unwrap(), 0.0);
        let c = Tensor::<f64>::full(&[3, 3], 1.0);
        let d = Tensor::<f64>::full(&[3, 3], -1.5);
        assert!((rmse(&c, &d).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = random_image(1, 24);
        assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        for (m1, m2, r) in [(0.2, 0.7, 1.0), (10.0, 12.5, 40.0), (0.0, 0.0, 1.0), (-0.3, 0.4, 2.0)] {
            let a = Tensor::<f64>::full(&[1, 16, 13], m1);
            let b = Tensor::<f64>::full(&[1, 16, 13], m2);
            let c1 = (0.01 * r as f64).powi(2);
            let expected = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
            let got = ssim(&a, &b, r).unwrap();
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn ssim_falls_with_noise_amplitude() {
        let clean = random_image(2, 32).map(|v| 0.25 + 0.5 * v);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut last = 1.0;
        for amp in [0.01, 0.05, 0.1] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let data = clean.data().iter().map(|v| v + amp * normal.sample(&mut rng)).collect();
            let noisy = Tensor::new(clean.shape(), data).unwrap();
            let s = ssim(&clean, &noisy, 1.0).unwrap();
            assert!(s < last, "amp {amp}: {s} !< {last}");
            last = s;
        }
    }

    #[test]
    fn errors() {
        let a = random_image(0, 12);
        let b = random_image(0, 13);
        assert!(ssim(&a, &b, 1.0).is_err());
        assert!(rmse(&a, &b).is_err());
        assert!(ssim(&a, &a, 0.0).is_err());
        let small = random_image(0, 10);
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    #[test]
    fn aggregate_is_mean() {
        let r = |s, e| MetricReport { ssim: s, rmse: e, data_range: 1.0 };
        let rep = EvaluationReport::from_reports(vec![r(0.5, 1.0), r(1.0, 3.0)]).unwrap();
        assert_eq!(rep.mean, r(0.75, 2.0));
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"mean\":{\"ssim\":0.75,\"rmse\":2.0,\"data_range\":1.0}"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_image(s1, 14);
            let b = random_image(s2, 14).map(|v| 2.0 * v - 0.5);
            let ab = ssim(&a, &b, 1.0).unwrap();
            prop_assert_eq!(ab, ssim(&b, &a, 1.0).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn rmse_is_a_metric(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
            let (a, b, c) = (random_image(s1, 6), random_image(s2, 6), random_image(s3, 6));
            let ab = rmse(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, rmse(&b, &a).unwrap());
            prop_assert!(rmse(&a, &c).unwrap() <= ab + rmse(&b, &c).unwrap() + 1e-12);
        }
    }
}
