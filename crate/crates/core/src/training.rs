//! Fitting [`TedNetParams`] to paired noisy/clean images.
//!
//! Every epoch crops `patches_per_image` random patches from each pair,
//! optionally applies a random rotation or flip to both members, shuffles,
//! and takes one Adam step per batch on the mean-squared error between the
//! model output and the clean patch.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::{ModelConfig, TedNet, TedNetParams};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub patches_per_image: usize,
    pub patch_side: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: bool,
    /// With augmentation on, also train on every patch untransformed
    /// (doubling each epoch) instead of relying on the identity draw.
    pub keep_original_copy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale settings: lr 1e-5, 4000 epochs, four 64×64 patches per image.
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            epochs: 4000,
            max_steps: None,
            patches_per_image: 4,
            patch_side: 64,
            batch_size: 16,
            seed: 0,
            augmentation: true,
            keep_original_copy: false,
        }
    }

    /// 500 steps at lr 1e-3 on 32×32 patches.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: usize::MAX,
            max_steps: Some(500),
            patch_side: 32,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps_adam > 0.0) {
            return bad(format!("eps_adam must be positive, got {}", self.eps_adam));
        }
        if self.patches_per_image == 0 || self.batch_size == 0 || self.patch_side == 0 {
            return bad("patches_per_image, batch_size and patch_side must be positive".into());
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_params(params: &TedNetParams<Tensor<T>>) -> Self {
        let mut shapes = Vec::new();
        params.visit("", &mut |_, t| shapes.push(t));
        Self::new(shapes)
    }

    fn check(&self, i: usize, p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
        if i >= self.m.len() || p.shape() != self.m[i].shape() || g.shape() != p.shape() {
            return Err(shape_err(
                "adam_step",
                format!("parameter {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        Ok(())
    }

    fn update(&mut self, i: usize, p: &mut Tensor<T>, g: &Tensor<T>, cfg: &TrainConfig) {
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
        for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let delta = cfg.learning_rate * (mj / c1) / ((vj / c2).sqrt() + cfg.eps_adam);
            *pj = T::from_f64_lossy(pj.as_f64() - delta);
        }
    }

    /// One bias-corrected step over parallel slices.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], cfg: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(
                "adam_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            self.check(i, p, g)?;
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g, cfg);
        }
        Ok(())
    }

    /// Same as [`step`](Self::step), with `grads` in visit order.
    pub fn step_params(
        &mut self,
        params: &mut TedNetParams<Tensor<T>>,
        grads: &[Tensor<T>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let mut i = 0;
        let mut status = Ok(());
        params.visit("", &mut |_, p| {
            if status.is_ok() {
                status = grads.get(i).map_or(
                    Err(shape_err("adam_step", format!("missing gradient {i}"))),
                    |g| self.check(i, p, g),
                );
            }
            i += 1;
        });
        status?;
        if i != grads.len() {
            return Err(shape_err("adam_step", format!("{i} params, {} grads", grads.len())));
        }
        self.step += 1;
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            self.update(i, p, &grads[i], cfg);
            i += 1;
        });
        Ok(())
    }
}

/// Mean of `(pred − target)²`.
pub fn mse_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    crate::ops::mse(pred, target)
}

/// A noisy/clean pair of `1×h×w` images.
pub type Pair = (Tensor<f32>, Tensor<f32>);

fn square_side(t: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [1, h, w] => Ok((h, w)),
        ref s => Err(shape_err(op, format!("expected a 1×h×w image, got {s:?}"))),
    }
}

fn crop(t: &Tensor<f32>, r0: usize, c0: usize, side: usize) -> Tensor<f32> {
    let w = t.shape()[2];
    let mut out = Vec::with_capacity(side * side);
    for r in r0..r0 + side {
        out.extend_from_slice(&t.data()[r * w + c0..r * w + c0 + side]);
    }
    Tensor::new(&[1, side, side], out).expect("crop inside image")
}

/// `count` random `side×side` crops, at the same offsets in both images.
pub fn sample_patches(pair: &Pair, count: usize, side: usize, rng: &mut impl Rng) -> Result<Vec<Pair>> {
    let (h, w) = square_side(&pair.0, "sample_patches")?;
    if pair.1.shape() != pair.0.shape() {
        return Err(shape_err(
            "sample_patches",
            format!("noisy {:?} vs clean {:?}", pair.0.shape(), pair.1.shape()),
        ));
    }
    if h < side || w < side {
        return Err(shape_err("sample_patches", format!("{h}×{w} image is smaller than patch {side}")));
    }
    Ok((0..count)
        .map(|_| {
            let r = rng.random_range(0..=h - side);
            let c = rng.random_range(0..=w - side);
            (crop(&pair.0, r, c, side), crop(&pair.1, r, c, side))
        })
        .collect())
}

/// An element of the symmetry group of the square: a horizontal flip
/// (when `flip`) followed by `quarter_turns` rotations.
///
/// One quarter turn maps `[[1, 2], [3, 4]]` to `[[3, 1], [4, 2]]`, i.e.
/// `out[r][c] = in[n−1−c][r]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Self = Self::rot(0);
    pub const ROT90: Self = Self::rot(1);
    pub const ROT180: Self = Self::rot(2);
    pub const ROT270: Self = Self::rot(3);
    /// Mirror left–right.
    pub const FLIP_H: Self = Self {
        quarter_turns: 0,
        flip: true,
    };
    /// Mirror up–down.
    pub const FLIP_V: Self = Self {
        quarter_turns: 2,
        flip: true,
    };
    /// The draws made by [`augment`].
    pub const AUGMENTATIONS: [Self; 6] = [
        Self::IDENTITY,
        Self::ROT90,
        Self::ROT180,
        Self::ROT270,
        Self::FLIP_V,
        Self::FLIP_H,
    ];

    const fn rot(k: u8) -> Self {
        Self {
            quarter_turns: k,
            flip: false,
        }
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8).map(|i| Self {
            quarter_turns: i % 4,
            flip: i >= 4,
        })
    }

    /// The input pixel that lands at `(r, c)` of an `n×n` output.
    pub fn source(self, mut r: usize, mut c: usize, n: usize) -> (usize, usize) {
        for _ in 0..self.quarter_turns {
            (r, c) = (n - 1 - c, r);
        }
        if self.flip {
            c = n - 1 - c;
        }
        (r, c)
    }

    /// `self ∘ other`: apply `other`, then `self`.
    pub fn compose(self, other: Self) -> Self {
        let probe = |d: Self| [(0, 0), (0, 1)].map(|(r, c)| {
            let (r, c) = d.source(r, c, 3);
            other.source(r, c, 3)
        });
        let target = probe(self);
        Self::all()
            .find(|&e| [(0, 0), (0, 1)].map(|(r, c)| e.source(r, c, 3)) == target)
            .expect("the group is closed")
    }

    pub fn inverse(self) -> Self {
        Self::all()
            .find(|&e| e.compose(self) == Self::IDENTITY)
            .expect("every element has an inverse")
    }

    /// Applies the transform to every channel of a `c×n×n` tensor.
    pub fn apply<T: Element>(self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (ch, h, w) = img.dims3("augment")?;
        if h != w {
            return Err(shape_err("augment", format!("{h}×{w} is not square")));
        }
        let n = h;
        let src = img.data();
        let mut out = Vec::with_capacity(src.len());
        for k in 0..ch {
            for r in 0..n {
                for c in 0..n {
                    let (sr, sc) = self.source(r, c, n);
                    out.push(src[k * n * n + sr * n + sc]);
                }
            }
        }
        Tensor::new(img.shape(), out)
    }
}

/// Applies one uniformly drawn element of [`Dihedral::AUGMENTATIONS`] to both
/// members of the pair.
pub fn augment(pair: &Pair, rng: &mut impl Rng) -> Result<Pair> {
    let d = Dihedral::AUGMENTATIONS[rng.random_range(0..Dihedral::AUGMENTATIONS.len())];
    Ok((d.apply(&pair.0)?, d.apply(&pair.1)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// One loss-log line: `epoch <i> loss <mean> seconds <wall>`.
    pub fn log_line(&self) -> String {
        format!("epoch {} loss {:.8e} seconds {:.3}", self.epoch, self.mean_loss, self.seconds)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TedNetParams,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, measured before its update.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn loss_log(&self) -> String {
        self.history.iter().map(|r| r.log_line() + "\n").collect()
    }
}

/// Mean MSE over a batch and the gradient of every parameter, in visit order.
pub fn batch_loss_and_grads(
    net: &TedNet,
    params: &TedNetParams,
    batch: &[Pair],
) -> Result<(f64, Vec<Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tape = Tape::new();
    let p = params.map(&mut |t| tape.leaf(t.clone()));
    let scale = 1.0 / batch.len() as f32;
    let mut total: Option<Var<'_, f32>> = None;
    for (noisy, clean) in batch {
        let x = tape.constant(noisy.clone());
        let y = tape.constant(clean.clone());
        let loss = net.forward_tape(x, &p)?.mse(y)?.scale(scale)?;
        total = Some(match total {
            Some(t) => t.add(loss)?,
            None => loss,
        });
    }
    let total = total.expect("batch is not empty");
    let mut grads = tape.gradients(total)?;
    let mut leaves = Vec::new();
    p.visit("", &mut |_, v| leaves.push(*v));
    let grads = leaves.into_iter().map(|v| grads.take(v)).collect();
    Ok((total.value().item() as f64, grads))
}

/// Trains from [`TedNet::init_params`] with `train_cfg.seed`.
pub fn train(dataset: &[Pair], model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    let net = TedNet::new(model_cfg.clone())?;
    let init = net.init_params(train_cfg.seed);
    train_from(&net, init, dataset, train_cfg, |_| {})
}

/// Trains starting at `params`, calling `on_epoch` after every epoch.
pub fn train_from(
    net: &TedNet,
    mut params: TedNetParams,
    dataset: &[Pair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    net.check_params(&params)?;
    if cfg.patch_side != net.config().patch_side {
        return Err(Error::Config(format!(
            "training patch side {} differs from the model's {}",
            cfg.patch_side,
            net.config().patch_side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_params(&params);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 0..cfg.epochs {
        if step_losses.len() >= max_steps {
            break;
        }
        let start = Instant::now();
        let mut samples = Vec::new();
        for pair in dataset {
            for patch in sample_patches(pair, cfg.patches_per_image, cfg.patch_side, &mut rng)? {
                if cfg.augmentation {
                    let aug = augment(&patch, &mut rng)?;
                    if cfg.keep_original_copy {
                        samples.push(patch);
                    }
                    samples.push(aug);
                } else {
                    samples.push(patch);
                }
            }
        }
        samples.shuffle(&mut rng);

        let mut epoch_losses = Vec::new();
        for batch in samples.chunks(cfg.batch_size) {
            if step_losses.len() >= max_steps {
                break;
            }
            let step = step_losses.len();
            let (loss, grads) = batch_loss_and_grads(net, &params, batch).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            adam.step_params(&mut params, &grads, cfg)?;
            step_losses.push(loss);
            epoch_losses.push(loss);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        params,
        history,
        step_losses,
    })
}
