//! Transformer block over token matrices: multi-head self-attention and an
//! MLP, each wrapped in a pre-norm residual.
//!
//! ```text
//! u   = x + msa(ln₁(x))
//! out = u + mlp(ln₂(u))          mlp = fc₂ ∘ act ∘ fc₁
//! ```
//!
//! With `literal_eq3` the residuals are dropped: `out = mlp(ln₂(msa(ln₁(x))))`.
//! There is no positional information inside the block, so both `msa` and
//! `block` commute with any permutation of the token rows.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gelu => "gelu",
            Self::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub literal_eq3: bool,
    pub eps: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::Config("block dims and heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Learnable values in one block.
    pub fn parameter_count(&self) -> usize {
        let (d, h) = (self.dim, self.hidden);
        2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    }
}

/// `x·weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Element> Linear<Tensor<T>> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

impl<P> Norm<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Weights of one transformer block. `P` is `Tensor<T>` for storage and
/// `Var` while recorded on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams<P = Tensor<f32>> {
    pub norm1: Norm<P>,
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub proj: Linear<P>,
    pub norm2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

impl<P> TransformerBlockParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> TransformerBlockParams<Q> {
        TransformerBlockParams {
            norm1: self.norm1.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            proj: self.proj.map(f),
            norm2: self.norm2.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        let p = |s: &str| join(prefix, s);
        self.norm1.visit(&p("norm1"), f);
        self.query.visit(&p("query"), f);
        self.key.visit(&p("key"), f);
        self.value.visit(&p("value"), f);
        self.proj.visit(&p("proj"), f);
        self.norm2.visit(&p("norm2"), f);
        self.fc1.visit(&p("fc1"), f);
        self.fc2.visit(&p("fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        let p = |s: &str| join(prefix, s);
        self.norm1.visit_mut(&p("norm1"), f);
        self.query.visit_mut(&p("query"), f);
        self.key.visit_mut(&p("key"), f);
        self.value.visit_mut(&p("value"), f);
        self.proj.visit_mut(&p("proj"), f);
        self.norm2.visit_mut(&p("norm2"), f);
        self.fc1.visit_mut(&p("fc1"), f);
        self.fc2.visit_mut(&p("fc2"), f);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Element> TransformerBlockParams<Tensor<T>> {
    /// All weights zero, norms at unit gain.
    pub fn zeros(cfg: &BlockConfig) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden);
        let norm = || Norm {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        };
        Self {
            norm1: norm(),
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            proj: Linear::zeros(d, d),
            norm2: norm(),
            fc1: Linear::zeros(d, h),
            fc2: Linear::zeros(h, d),
        }
    }

    /// Draws every weight matrix from N(0, 1/fan_in); biases stay zero.
    pub fn init(cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(cfg);
        p.visit_mut("", &mut |name, t| {
            if name.ends_with("weight") {
                *t = init_weight(t.shape(), rng);
            }
        });
        p
    }
}

/// `fan_in×fan_out` matrix drawn from N(0, 1/fan_in).
pub(crate) fn init_weight<T: Element>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let std = (shape[0] as f64).sqrt().recip();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape is consistent")
}

fn eps<T: Element>(cfg: &BlockConfig) -> T {
    T::from_f64_lossy(cfg.eps)
}

/// Multi-head self-attention on an `n×d` token matrix.
pub fn attention<'t, T: Element>(
    x: Var<'t, T>,
    p: &TransformerBlockParams<Var<'t, T>>,
    cfg: &BlockConfig,
) -> Result<Var<'t, T>> {
    let hd = cfg.head_dim();
    let scale = T::from_f64_lossy((hd as f64).sqrt().recip());
    let q = x.linear(p.query.weight, p.query.bias)?;
    let k = x.linear(p.key.weight, p.key.bias)?;
    let v = x.linear(p.value.weight, p.value.bias)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (
            q.slice_cols(h * hd, hd)?,
            k.slice_cols(h * hd, hd)?,
            v.slice_cols(h * hd, hd)?,
        );
        let weights = qh.matmul(kh.transpose()?)?.scale(scale)?.softmax_rows()?;
        heads.push(weights.matmul(vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        x.tape().concat_cols(&heads)?
    };
    merged.linear(p.proj.weight, p.proj.bias)
}

fn mlp<'t, T: Element>(
    x: Var<'t, T>,
    p: &TransformerBlockParams<Var<'t, T>>,
    cfg: &BlockConfig,
) -> Result<Var<'t, T>> {
    let hidden = x.linear(p.fc1.weight, p.fc1.bias)?;
    let hidden = match cfg.activation {
        Activation::Gelu => hidden.gelu()?,
        Activation::Relu => hidden.relu()?,
    };
    hidden.linear(p.fc2.weight, p.fc2.bias)
}

/// One transformer block on an `n×d` token matrix.
pub fn block<'t, T: Element>(
    x: Var<'t, T>,
    p: &TransformerBlockParams<Var<'t, T>>,
    cfg: &BlockConfig,
) -> Result<Var<'t, T>> {
    let e = eps::<T>(cfg);
    let normed = x.layer_norm(p.norm1.gamma, p.norm1.beta, e)?;
    let attended = attention(normed, p, cfg)?;
    if cfg.literal_eq3 {
        let normed = attended.layer_norm(p.norm2.gamma, p.norm2.beta, e)?;
        return mlp(normed, p, cfg);
    }
    let u = x.add(attended)?;
    let normed = u.layer_norm(p.norm2.gamma, p.norm2.beta, e)?;
    u.add(mlp(normed, p, cfg)?)
}

fn check_tokens<T: Element>(tokens: &Tensor<T>, cfg: &BlockConfig) -> Result<()> {
    cfg.validate()?;
    let (_, d) = tokens.dims2("transformer")?;
    if d != cfg.dim {
        return Err(crate::error::shape_err(
            "transformer",
            format!("tokens {:?} do not have dim {}", tokens.shape(), cfg.dim),
        ));
    }
    Ok(())
}

/// [`attention`] on plain tensors.
pub fn msa<T: Element>(
    tokens: &Tensor<T>,
    params: &TransformerBlockParams<Tensor<T>>,
    cfg: &BlockConfig,
) -> Result<Tensor<T>> {
    check_tokens(tokens, cfg)?;
    let tape = Tape::new();
    let p = params.map(&mut |t| tape.constant(t.clone()));
    let x = tape.constant(tokens.clone());
    Ok(attention(x, &p, cfg)?.value().as_ref().clone())
}

/// [`block`] on plain tensors.
pub fn transformer_block<T: Element>(
    tokens: &Tensor<T>,
    params: &TransformerBlockParams<Tensor<T>>,
    cfg: &BlockConfig,
) -> Result<Tensor<T>> {
    check_tokens(tokens, cfg)?;
    let tape = Tape::new();
    let p = params.map(&mut |t| tape.constant(t.clone()));
    let x = tape.constant(tokens.clone());
    Ok(block(x, &p, cfg)?.value().as_ref().clone())
}

/// Per-head `n×n` attention weight matrices, for inspection.
pub fn attention_maps<T: Element>(
    tokens: &Tensor<T>,
    params: &TransformerBlockParams<Tensor<T>>,
    cfg: &BlockConfig,
) -> Result<Vec<Tensor<T>>> {
    check_tokens(tokens, cfg)?;
    let hd = cfg.head_dim();
    let scale = T::from_f64_lossy((hd as f64).sqrt().recip());
    let normed = crate::ops::layer_norm(tokens, &params.norm1.gamma, &params.norm1.beta, eps(cfg))?;
    let q = crate::ops::linear(&normed, &params.query.weight, &params.query.bias)?;
    let k = crate::ops::linear(&normed, &params.key.weight, &params.key.bias)?;
    (0..cfg.heads)
        .map(|h| {
            let qh = crate::ops::slice_cols(&q, h * hd, hd)?;
            let kh = crate::ops::transpose(&crate::ops::slice_cols(&k, h * hd, hd)?)?;
            let logits = crate::ops::scale(&crate::ops::matmul(&qh, &kh)?, scale);
            Ok(crate::ops::softmax_rows(&logits))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(dim: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            dim,
            heads,
            hidden: 2 * dim,
            activation: Activation::Gelu,
            literal_eq3: false,
            eps: 1e-5,
        }
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let d = t.shape()[1];
        let data = perm
            .iter()
            .flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec())
            .collect();
        Tensor::new(t.shape(), data).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let c = cfg(8, 2);
        let p = TransformerBlockParams::<Tensor<f64>>::init(&c, &mut ChaCha8Rng::seed_from_u64(1));
        let x = random_tokens(1, 8, 2);
        for map in attention_maps(&x, &p, &c).unwrap() {
            assert_eq!(map.data(), &[1.0]);
        }
        // softmax over one logit is exactly 1, so msa(x) = proj(V(x))
        let v = crate::ops::linear(&x, &p.value.weight, &p.value.bias).unwrap();
        let expected = crate::ops::linear(&v, &p.proj.weight, &p.proj.bias).unwrap();
        assert!(msa(&x, &p, &c).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn identity_projections_on_identical_tokens() {
        let c = cfg(4, 1);
        let mut p = TransformerBlockParams::<Tensor<f64>>::zeros(&c);
        for lin in [&mut p.query, &mut p.key, &mut p.value, &mut p.proj] {
            lin.weight = Tensor::eye(4);
        }
        let row = [0.3, -1.2, 2.0, 0.7];
        let x = Tensor::from_f64(&[2, 4], &[row, row].concat()).unwrap();
        let out = msa(&x, &p, &c).unwrap();
        for r in out.data().chunks(4) {
            for (a, b) in r.iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_and_block_are_permutation_equivariant() {
        let c = cfg(8, 2);
        let p = TransformerBlockParams::<Tensor<f64>>::init(&c, &mut ChaCha8Rng::seed_from_u64(3));
        let x = random_tokens(3, 8, 4);
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let base_msa = msa(&x, &p, &c).unwrap();
        let base_block = transformer_block(&x, &p, &c).unwrap();
        for perm in perms {
            let px = permute_rows(&x, &perm);
            let a = msa(&px, &p, &c).unwrap();
            assert!(a.max_abs_diff(&permute_rows(&base_msa, &perm)) < 1e-12);
            let b = transformer_block(&px, &p, &c).unwrap();
            assert!(b.max_abs_diff(&permute_rows(&base_block, &perm)) < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_exact_identity() {
        let c = cfg(8, 4);
        let p = TransformerBlockParams::<Tensor<f64>>::zeros(&c);
        let x = random_tokens(5, 8, 5);
        assert_eq!(transformer_block(&x, &p, &c).unwrap(), x);
    }

    #[test]
    fn block_preserves_shape() {
        for n in [1, 4, 16] {
            for d in [8, 16] {
                let c = cfg(d, 2);
                let p = TransformerBlockParams::<Tensor<f32>>::init(&c, &mut ChaCha8Rng::seed_from_u64(6));
                let x = random_tokens(n, d, 7).cast::<f32>();
                let out = transformer_block(&x, &p, &c).unwrap();
                assert_eq!(out.shape(), &[n, d]);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let c = cfg(16, 4);
        let p = TransformerBlockParams::<Tensor<f64>>::init(&c, &mut ChaCha8Rng::seed_from_u64(8));
        let x = random_tokens(6, 16, 9).map(|v| 4.0 * v);
        for map in attention_maps(&x, &p, &c).unwrap() {
            for row in map.data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let c = cfg(6, 4);
        let p = TransformerBlockParams::<Tensor<f64>>::zeros(&cfg(6, 3));
        assert!(matches!(
            transformer_block(&random_tokens(2, 6, 0), &p, &c),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn literal_form_drops_residuals() {
        let mut c = cfg(8, 2);
        c.literal_eq3 = true;
        let p = TransformerBlockParams::<Tensor<f64>>::zeros(&c);
        let out = transformer_block(&random_tokens(3, 8, 1), &p, &c).unwrap();
        assert_eq!(out, Tensor::zeros(&[3, 8]));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let check = crate::gradcheck::transformer_block_check(11).unwrap();
        assert!(check.passed(), "{check:?}");
    }

    #[test]
    fn parameter_count_matches_visit() {
        let c = cfg(16, 4);
        let p = TransformerBlockParams::<Tensor<f32>>::zeros(&c);
        let mut total = 0;
        p.visit("", &mut |_, t| total += t.numel());
        assert_eq!(total, c.parameter_count());
    }
}
