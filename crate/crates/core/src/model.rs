//! The full encoder–decoder denoiser.
//!
//! Encoder, one step per stage `i` (the last stage feeds the bottleneck):
//!
//! ```text
//! map ─soft_split(gᵢ)→ tokens ─embedᵢ→ E-dim tokens ─TB→ ─reshape→ map ─shift(+k)→ …
//! ```
//!
//! Decoder, mirrored:
//!
//! ```text
//! … tokens ─unembedᵢ→ raw tokens ─fold(gᵢ)→ map ─shift(−k)→ ─reshape→ tokens ─TB→ …
//! ```
//!
//! The last fold returns a `1×s×s` residual `r`, and the output is
//! `x + sign·r`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};
use crate::tokenization::{token_count, StageGeometry};
use crate::transformer::{self, join, Activation, BlockConfig, Linear, TransformerBlockParams};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch_side: usize,
    pub stages: Vec<StageGeometry>,
    pub embed_dim: usize,
    pub shift_pixels: i64,
    pub heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub activation: Activation,
    /// Adds a learned embedding to the first-stage tokens.
    pub use_positional: bool,
    /// Transformer blocks without residual connections.
    pub literal_eq3: bool,
    /// Adds each encoder block's output to the mirrored decoder block's input.
    pub token_skips: bool,
    /// `+1` adds the decoded residual to the input, `-1` subtracts it.
    pub residual_sign: i8,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    /// 64×64 patches, kernels 7/3/3, strides 2/1/1, dilations 1/2/1,
    /// 256-dim tokens, shift of 2 pixels.
    fn default() -> Self {
        Self {
            patch_side: 64,
            stages: vec![
                StageGeometry::same_padded(7, 2, 1),
                StageGeometry::same_padded(3, 1, 2),
                StageGeometry::same_padded(3, 1, 1),
            ],
            embed_dim: 256,
            shift_pixels: 2,
            heads: 8,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            use_positional: false,
            literal_eq3: false,
            token_skips: false,
            residual_sign: 1,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Reduced model that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            patch_side: 32,
            embed_dim: 64,
            heads: 4,
            ..Self::default()
        }
    }

    /// Small enough for exhaustive finite differences in `f64`.
    pub fn gradcheck() -> Self {
        Self {
            patch_side: 16,
            embed_dim: 16,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            dim: self.embed_dim,
            heads: self.heads,
            hidden: self.mlp_ratio * self.embed_dim,
            activation: self.activation,
            literal_eq3: self.literal_eq3,
            eps: self.norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one soft-split stage is required".into()));
        }
        if self.residual_sign != 1 && self.residual_sign != -1 {
            return Err(Error::Config(format!(
                "residual_sign must be +1 or -1, got {}",
                self.residual_sign
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        self.block_config().validate()
    }
}

/// Shapes at one soft-split stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub geometry: StageGeometry,
    /// Side of the (square) map entering the soft split.
    pub input_side: usize,
    /// Channels of that map.
    pub channels: usize,
    /// Windows per axis.
    pub grid: usize,
    /// `channels·kernel²`.
    pub raw_dim: usize,
    pub projected_dim: usize,
}

/// The shape chain of a [`ModelConfig`].
///
/// Parameter count, with `E = embed_dim`, `H = mlp_ratio·E`, `Rᵢ` the raw
/// token dim of stage `i` and `S` stages:
///
/// ```text
/// Σᵢ (Rᵢ·E + E) + (E·Rᵢ + Rᵢ)                         projections
/// + (2S − 1)·(4E + 4(E² + E) + (E·H + H) + (H·E + E))   transformer blocks
/// + grid₀²·E                                           if use_positional
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePlan {
    /// Soft-split stages in application order.
    pub encoder: Vec<StagePlan>,
    /// Fold stages in application order; the reverse of `encoder`.
    pub decoder: Vec<StagePlan>,
    pub output_shape: [usize; 3],
    pub parameter_count: usize,
}

impl ShapePlan {
    pub fn is_mirror(&self) -> bool {
        self.encoder.iter().rev().eq(self.decoder.iter())
    }

    /// Human-readable table, one row per stage.
    pub fn table(&self) -> String {
        let mut s = String::from(
            "stage  kernel stride dilation padding  side -> grid   raw_dim -> embed\n",
        );
        for (i, st) in self.encoder.iter().enumerate() {
            let g = st.geometry;
            s.push_str(&format!(
                "{:>5}  {:>6} {:>6} {:>8} {:>7}  {:>4} -> {:<4}  {:>7} -> {}\n",
                i + 1,
                g.kernel,
                g.stride,
                g.dilation,
                g.padding,
                st.input_side,
                st.grid,
                st.raw_dim,
                st.projected_dim
            ));
        }
        let [c, h, w] = self.output_shape;
        s.push_str(&format!("output {c}x{h}x{w}, {} parameters\n", self.parameter_count));
        s
    }
}

/// Walks the token-count formula through every stage; fails on the first
/// stage whose geometry is invalid for the side it receives.
pub fn plan_shapes(cfg: &ModelConfig) -> Result<ShapePlan> {
    cfg.validate()?;
    let mut side = cfg.patch_side;
    let mut channels = 1;
    let mut encoder = Vec::with_capacity(cfg.stages.len());
    for (i, g) in cfg.stages.iter().enumerate() {
        let grid = token_count(side, g)
            .and_then(|grid| g.check_coverage(side).map(|_| grid))
            .map_err(|e| Error::Geometry(format!("stage {}: {e}", i + 1)))?;
        encoder.push(StagePlan {
            geometry: *g,
            input_side: side,
            channels,
            grid,
            raw_dim: g.token_dim(channels),
            projected_dim: cfg.embed_dim,
        });
        side = grid;
        channels = cfg.embed_dim;
    }
    let decoder: Vec<_> = encoder.iter().rev().copied().collect();

    let e = cfg.embed_dim;
    let projections: usize = encoder
        .iter()
        .map(|s| (s.raw_dim * e + e) + (e * s.raw_dim + s.raw_dim))
        .sum();
    let blocks = (2 * encoder.len() - 1) * cfg.block_config().parameter_count();
    let positional = if cfg.use_positional {
        encoder[0].grid * encoder[0].grid * e
    } else {
        0
    };
    let plan = ShapePlan {
        encoder,
        decoder,
        output_shape: [1, cfg.patch_side, cfg.patch_side],
        parameter_count: projections + blocks + positional,
    };
    debug_assert!(plan.is_mirror());
    Ok(plan)
}

/// All learnable weights of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TedNetParams<P = Tensor<f32>> {
    /// Per stage: raw tokens → embed dim, applied after each soft split.
    pub embed: Vec<Linear<P>>,
    /// Per stage: embed dim → raw tokens, applied before each fold.
    pub unembed: Vec<Linear<P>>,
    /// One block per encoder stage except the last.
    pub encoder: Vec<TransformerBlockParams<P>>,
    pub bottleneck: TransformerBlockParams<P>,
    /// In application order: `decoder[0]` runs first, at the deepest level.
    pub decoder: Vec<TransformerBlockParams<P>>,
    pub position: Option<P>,
}

impl<P> TedNetParams<P> {
    /// Applies `f` to every tensor, in [`visit`](Self::visit) order.
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> TedNetParams<Q> {
        let embed = self.embed.iter().map(|l| l.map(f)).collect();
        let encoder = self.encoder.iter().map(|b| b.map(f)).collect();
        let bottleneck = self.bottleneck.map(f);
        let decoder = self.decoder.iter().map(|b| b.map(f)).collect();
        let unembed = self.unembed.iter().map(|l| l.map(f)).collect();
        let position = self.position.as_ref().map(f);
        TedNetParams {
            embed,
            unembed,
            encoder,
            bottleneck,
            decoder,
            position,
        }
    }

    /// Visits every tensor with its dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        for (i, l) in self.embed.iter().enumerate() {
            l.visit(&join(prefix, &format!("embed.{i}")), f);
        }
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        for (i, l) in self.unembed.iter().enumerate() {
            l.visit(&join(prefix, &format!("unembed.{i}")), f);
        }
        if let Some(p) = &self.position {
            f(join(prefix, "position"), p);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        for (i, l) in self.embed.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("embed.{i}")), f);
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        for (i, l) in self.unembed.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("unembed.{i}")), f);
        }
        if let Some(p) = &mut self.position {
            f(join(prefix, "position"), p);
        }
    }

    pub fn into_vec(self) -> Vec<P>
    where
        P: Clone,
    {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p.clone()));
        out
    }
}

impl<T: Element> TedNetParams<Tensor<T>> {
    /// Zero weights of the right shapes, norms at unit gain.
    pub fn zeros(cfg: &ModelConfig, plan: &ShapePlan) -> Self {
        let e = cfg.embed_dim;
        let block = cfg.block_config();
        let depth = plan.encoder.len();
        Self {
            embed: plan.encoder.iter().map(|s| Linear::zeros(s.raw_dim, e)).collect(),
            unembed: plan.encoder.iter().map(|s| Linear::zeros(e, s.raw_dim)).collect(),
            encoder: (1..depth).map(|_| TransformerBlockParams::zeros(&block)).collect(),
            bottleneck: TransformerBlockParams::zeros(&block),
            decoder: (1..depth).map(|_| TransformerBlockParams::zeros(&block)).collect(),
            position: cfg
                .use_positional
                .then(|| Tensor::zeros(&[plan.encoder[0].grid * plan.encoder[0].grid, e])),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    pub fn cast<U: Element>(&self) -> TedNetParams<Tensor<U>> {
        self.map(&mut |t| t.cast())
    }

    /// `(name, shape)` of every tensor, in visit order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.shape().to_vec())));
        out
    }

    /// Zeroes the last pre-fold projection, which makes the model the identity.
    pub fn zero_final_projection(&mut self) {
        let last = &mut self.unembed[0];
        last.weight.data_mut().iter_mut().for_each(|v| *v = T::zero());
        last.bias.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}

/// A validated configuration together with its shape plan.
#[derive(Debug, Clone)]
pub struct TedNet {
    cfg: ModelConfig,
    plan: ShapePlan,
}

impl TedNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let plan = plan_shapes(&cfg)?;
        if !plan.is_mirror() {
            return Err(Error::Config("decoder plan does not mirror the encoder".into()));
        }
        Ok(Self { cfg, plan })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    /// Deterministic initialization: weights ~ N(0, 1/fan_in), biases 0,
    /// norm gains 1, positional embedding ~ N(0, 0.02²).
    pub fn init_params(&self, seed: u64) -> TedNetParams<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TedNetParams::zeros(&self.cfg, &self.plan);
        params.visit_mut("", &mut |name, t| {
            if name.ends_with("weight") {
                *t = transformer::init_weight(t.shape(), &mut rng);
            } else if name.ends_with("position") {
                let normal = Normal::new(0.0f32, 0.02).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        });
        params
    }

    /// Checks that `params` has exactly the tensors this model expects.
    pub fn check_params<T: Element>(&self, params: &TedNetParams<Tensor<T>>) -> Result<()> {
        check_manifest(
            &TedNetParams::<Tensor<T>>::zeros(&self.cfg, &self.plan).manifest(),
            &params.manifest(),
        )
    }

    /// Records the forward pass of a `1×s×s` input on `x`'s tape.
    pub fn forward_tape<'t, T: Element>(
        &self,
        x: Var<'t, T>,
        p: &TedNetParams<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let side = self.cfg.patch_side;
        if x.shape() != [1, side, side] {
            return Err(shape_err(
                "forward",
                format!("input {:?} is not 1×{side}×{side}", x.shape()),
            ));
        }
        let block = self.cfg.block_config();
        let shift = self.cfg.shift_pixels;
        let depth = self.plan.encoder.len();

        let mut map = x;
        let mut tokens = x;
        let mut skips = Vec::with_capacity(depth);
        for (i, st) in self.plan.encoder.iter().enumerate() {
            if i > 0 {
                let prev = self.plan.encoder[i - 1].grid;
                map = tokens.tokens_to_spatial(prev, prev)?.cyclic_shift(shift)?;
            }
            tokens = map
                .soft_split(&st.geometry)?
                .linear(p.embed[i].weight, p.embed[i].bias)?;
            if i == 0 {
                if let Some(pos) = p.position {
                    tokens = tokens.add(pos)?;
                }
            }
            tokens = if i + 1 < depth {
                transformer::block(tokens, &p.encoder[i], &block)?
            } else {
                transformer::block(tokens, &p.bottleneck, &block)?
            };
            skips.push(tokens);
        }

        for (k, st) in self.plan.decoder.iter().enumerate() {
            let i = depth - 1 - k;
            let raw = tokens.linear(p.unembed[i].weight, p.unembed[i].bias)?;
            map = raw.fold(st.channels, st.input_side, &st.geometry, true)?;
            if i == 0 {
                break;
            }
            tokens = map.cyclic_shift(-shift)?.spatial_to_tokens()?;
            if self.cfg.token_skips {
                tokens = tokens.add(skips[i - 1])?;
            }
            tokens = transformer::block(tokens, &p.decoder[k], &block)?;
        }

        let residual = if self.cfg.residual_sign < 0 {
            map.scale(-T::one())?
        } else {
            map
        };
        x.add(residual)
    }

    /// Denoises one `1×s×s` patch.
    pub fn forward<T: Element>(
        &self,
        x: &Tensor<T>,
        params: &TedNetParams<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = params.map(&mut |t| tape.constant(t.clone()));
        let xv = tape.constant(x.clone());
        Ok(self.forward_tape(xv, &p)?.value().as_ref().clone())
    }
}

/// Errors on the first tensor whose name or shape differs from `expected`.
pub(crate) fn check_manifest(
    expected: &[(String, Vec<usize>)],
    found: &[(String, Vec<usize>)],
) -> Result<()> {
    for (i, (name, shape)) in expected.iter().enumerate() {
        match found.get(i) {
            Some((n, s)) if n == name && s == shape => {}
            Some((n, s)) if n == name => {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: s.clone(),
                })
            }
            Some((n, _)) => {
                return Err(Error::Format(format!(
                    "expected tensor `{name}` at position {i}, found `{n}`"
                )))
            }
            None => return Err(Error::Format(format!("missing tensor `{name}`"))),
        }
    }
    if found.len() > expected.len() {
        return Err(Error::Format(format!(
            "unexpected tensor `{}`",
            found[expected.len()].0
        )));
    }
    Ok(())
}
