//! Central finite-difference checks of tape gradients, in `f64`.
//!
//! Each check reduces the function under test to a scalar through a fixed
//! random weighting `Σ out∘R`, so every output entry carries a distinct
//! upstream gradient (a plain sum would make e.g. softmax look constant).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{ModelConfig, TedNet};
use crate::tensor::Tensor;
use crate::tokenization::StageGeometry;
use crate::transformer::{self, Activation, BlockConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared absolutely (to `TOLERANCE·DENOM_FLOOR`).
/// Roundoff in a central difference is about `ε·|loss|/STEP`, a few 1e-10
/// for the model check.
pub const DENOM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `|a − n| / max(|a|, |n|, DENOM_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// A scalar function of several tensors, expressed on a tape.
pub trait TapeFn: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}
impl<F> TapeFn for F where F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}

/// Pins a closure to the higher-ranked [`TapeFn`] signature.
pub fn tape_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

fn eval(f: &impl TapeFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.value().item())
}

/// Compares tape gradients of `f` against central differences. When
/// `per_input` is `Some(k)`, only `k` evenly spaced entries of each input
/// are perturbed.
pub fn check(
    name: impl Into<String>,
    f: impl TapeFn,
    inputs: &[Tensor<f64>],
    per_input: Option<usize>,
) -> Result<GradCheck> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let analytic = tape.grad(loss, &vars)?;

    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let n = inputs[i].numel();
        let stride = per_input.map_or(1, |k| (n / k.max(1)).max(1));
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grad.data()[j], numeric);
            if worst_at.is_none() || err > worst {
                worst = err;
                worst_at = Some((i, j, grad.data()[j], numeric));
            }
            entries += 1;
        }
    }
    Ok(GradCheck {
        name: name.into(),
        max_rel_err: worst,
        entries,
        worst: worst_at,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Same as [`random`] but bounded away from zero, for kinked primitives.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| if v.abs() < 0.1 { v + 0.2f64.copysign(v) } else { v })
}

fn weighted<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let w = tape.constant(weights.reshape(&out.shape())?);
    out.mul(w)?.sum()
}

/// One check per differentiable primitive on random shapes with dims ≤ 8.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..=8usize);
    let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let mut out = Vec::new();

    macro_rules! unary {
        ($name:expr, $shape:expr, $input:expr, |$v:ident| $body:expr) => {{
            let shape: Vec<usize> = $shape;
            let x = $input(&mut rng, &shape);
            let probe = random(&mut rng, &[x.numel() * 4]);
            let f = tape_fn(move |tape: &_, v: &[Var<'_, f64>]| {
                let $v = v[0];
                let y = $body?;
                let r = Tensor::new(&[y.value().numel()], probe.data()[..y.value().numel()].to_vec())?;
                weighted(tape, y, &r)
            });
            out.push(check($name, f, &[x], None)?);
        }};
    }

    {
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let r = random(&mut rng, &[m * n]);
        let f = tape_fn(move |t: &_, v: &[Var<'_, f64>]| weighted(t, v[0].matmul(v[1])?, &r));
        out.push(check("matmul", f, &[a, b], None)?);
    }
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let a = random(&mut rng, &[m, n]);
        let b = random(&mut rng, &[m, n]);
        let r = random(&mut rng, &[m * n]);
        let f = tape_fn(move |t: &_, v: &[Var<'_, f64>]| {
            let y = match which {
                0 => v[0].add(v[1])?,
                1 => v[0].sub(v[1])?,
                _ => v[0].mul(v[1])?,
            };
            weighted(t, y, &r)
        });
        out.push(check(name, f, &[a, b], None)?);
    }
    unary!("scale", vec![m, n], random, |x| x.scale(-1.7));
    unary!("sum", vec![m, n], random, |x| x.sum());
    unary!("transpose", vec![m, n], random, |x| x.transpose());
    unary!("reshape", vec![m, n], random, |x| x.reshape(&[n, m]));
    unary!("slice_cols", vec![m, n + 2], random, |x| x.slice_cols(1, n));
    unary!("softmax_rows", vec![m, n.max(2)], random, |x| x.scale(3.0)?.softmax_rows());
    unary!("gelu", vec![m, n], random, |x| x.scale(3.0)?.gelu());
    unary!("relu", vec![m, n], random_off_zero, |x| x.relu());
    {
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[m, n]);
        let r = random(&mut rng, &[m * (k + n)]);
        let f = tape_fn(move |t: &Tape<f64>, v: &[Var<'_, f64>]| weighted(t, t.concat_cols(&[v[0], v[1]])?, &r));
        out.push(check("concat_cols", f, &[a, b], None)?);
    }
    {
        let d = n.max(2);
        let x = random(&mut rng, &[m, d]);
        let g = random(&mut rng, &[d]);
        let b = random(&mut rng, &[d]);
        let r = random(&mut rng, &[m * d]);
        let f = tape_fn(move |t: &_, v: &[Var<'_, f64>]| weighted(t, v[0].layer_norm(v[1], v[2], 1e-5)?, &r));
        out.push(check("layer_norm", f, &[x, g, b], None)?);
    }
    {
        let x = random(&mut rng, &[m, k]);
        let w = random(&mut rng, &[k, n]);
        let b = random(&mut rng, &[n]);
        let r = random(&mut rng, &[m * n]);
        let f = tape_fn(move |t: &_, v: &[Var<'_, f64>]| weighted(t, v[0].linear(v[1], v[2])?, &r));
        out.push(check("linear", f, &[x, w, b], None)?);
    }
    {
        let c = rng.random_range(1..=3usize);
        let side = rng.random_range(5..=8usize);
        let geom = StageGeometry::new(3, rng.random_range(1..=2), rng.random_range(1..=2), 1);
        let x = random(&mut rng, &[c, side, side]);
        let r = random(&mut rng, &[crate::tokenization::soft_split(&x, &geom)?.tokens.numel()]);
        let f = tape_fn(move |t: &_, v: &[Var<'_, f64>]| weighted(t, v[0].soft_split(&geom)?, &r));
        out.push(check("soft_split", f, &[x], None)?);

        for normalize in [false, true] {
            let geom = StageGeometry::new(3, 1, 2, 2);
            let grid = crate::tokenization::token_count(side, &geom)?;
            let tokens = random(&mut rng, &[grid * grid, geom.token_dim(c)]);
            let r = random(&mut rng, &[c * side * side]);
            let f = tape_fn(move |t: &_, v: &[Var<'_, f64>]| weighted(t, v[0].fold(c, side, &geom, normalize)?, &r));
            let name = if normalize { "fold(normalized)" } else { "fold" };
            out.push(check(name, f, &[tokens], None)?);
        }
        unary!("cyclic_shift", vec![c, side, side], random, |x| x.cyclic_shift(2));
    }
    {
        let p = random(&mut rng, &[m, n]);
        let y = random(&mut rng, &[m, n]);
        let f = tape_fn(|_: &_, v: &[Var<'_, f64>]| v[0].mse(v[1]));
        out.push(check("mse", f, &[p, y], None)?);
    }
    Ok(out)
}

/// Whole transformer block at `n = 4`, `d = 8`, every parameter perturbed.
pub fn transformer_block_check(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BlockConfig {
        dim: 8,
        heads: 2,
        hidden: 16,
        activation: Activation::Gelu,
        literal_eq3: false,
        eps: 1e-5,
    };
    let template = transformer::TransformerBlockParams::<Tensor<f64>>::zeros(&cfg);
    let mut inputs = vec![random(&mut rng, &[4, 8])];
    template.visit("", &mut |name, t| {
        let mut v = random(&mut rng, t.shape());
        if name.ends_with("gamma") {
            v = v.map(|x| 1.0 + 0.5 * x);
        }
        inputs.push(v);
    });
    let r = random(&mut rng, &[32]);
    let f = tape_fn(move |tape: &_, v: &[Var<'_, f64>]| {
        let mut rest = v[1..].iter().copied();
        let params = template.map(&mut |_| rest.next().unwrap());
        weighted(tape, transformer::block(v[0], &params, &cfg)?, &r)
    });
    check("transformer_block", f, &inputs, None)
}

/// Reduced model (patch 16, embed 16, 2 heads): `Σ forward(x)∘R` against a
/// sampled subset of entries from every parameter tensor.
pub fn model_check(seed: u64) -> Result<GradCheck> {
    let cfg = ModelConfig::gradcheck();
    let net = TedNet::new(cfg)?;
    let params = net.init_params(seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let side = net.config().patch_side;
    let x = random(&mut rng, &[1, side, side]);
    let r = random(&mut rng, &[side * side]);
    let mut inputs = Vec::new();
    params.visit("", &mut |_, t| inputs.push(t.clone()));
    let template = params.clone();
    let f = tape_fn(move |tape: &Tape<f64>, v: &[Var<'_, f64>]| {
        let mut it = v.iter().copied();
        let pv = template.map(&mut |_| it.next().unwrap());
        let xv = tape.constant(x.clone());
        weighted(tape, net.forward_tape(xv, &pv)?, &r)
    });
    check("tednet_forward", f, &inputs, Some(3))
}

/// Everything above, in a fixed order.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = primitive_suite(seed)?;
    all.push(transformer_block_check(seed)?);
    all.push(model_check(seed)?);
    Ok(all)
}
