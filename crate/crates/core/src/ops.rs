//! Forward and backward kernels for the differentiable primitives.
//!
//! Every forward kernel is a pure function of its inputs and validates
//! shapes. The `*_backward` functions are the vector-Jacobian products the
//! tape replays; they assume shapes were validated on the forward pass.

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Element, Tensor};

/// `a·b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dimensions of {:?} and {:?} disagree", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `a·b` given upstream `dc`: `(dc·bᵀ, aᵀ·dc)`.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![T::zero(); m * k];
    gemm(m, n, k, dc.data(), false, b.data(), true, &mut da, false);
    let mut db = vec![T::zero(); k * n];
    gemm(k, m, n, a.data(), true, dc.data(), false, &mut db, false);
    (
        Tensor::from_parts(vec![m, k], da),
        Tensor::from_parts(vec![k, n], db),
    )
}

fn zip_with<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    a.same_shape(b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "sub", |x, y| x - y)
}

/// Elementwise product.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale<T: Element>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2("transpose")?;
    let src = a.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        out.extend((0..r).map(|i| src[i * c + j]));
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Row-wise softmax over the last axis, computed with max subtraction.
pub fn softmax_rows<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let d = *a.shape().last().expect("tensor has rank ≥ 1");
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = total.recip();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

/// Backward of softmax given its output `y`: `y∘(dy − ⟨dy, y⟩_row)`.
pub fn softmax_rows_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = *y.shape().last().unwrap();
    let mut out = vec![T::zero(); y.numel()];
    for ((o, yr), gr) in out
        .chunks_mut(d)
        .zip(y.data().chunks(d))
        .zip(dy.data().chunks(d))
    {
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Intermediates of a layer-norm forward pass needed by its backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes over the last axis, then applies `gamma`/`beta`.
pub fn layer_norm<T: Element>(
    a: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_cached(a, gamma, beta, eps).map(|(out, _)| out)
}

pub(crate) fn layer_norm_cached<T: Element>(
    a: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = *a.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err(
            "layer_norm",
            format!(
                "input {:?} needs gamma/beta of [{d}], got {:?}/{:?}",
                a.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(shape_err("layer_norm", "eps must be positive"));
    }
    let dn = T::from_usize(d).unwrap();
    let rows = a.numel() / d;
    let mut normalized = Vec::with_capacity(a.numel());
    let mut out = Vec::with_capacity(a.numel());
    let mut inv_std = Vec::with_capacity(rows);
    for row in a.data().chunks(d) {
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let var = row
            .iter()
            .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
            / dn;
        let inv = (var + eps).sqrt().recip();
        inv_std.push(inv);
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let xh = (v - mean) * inv;
            normalized.push(xh);
            out.push(xh * g + b);
        }
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), out),
        LayerNormCache {
            normalized: Tensor::from_parts(a.shape().to_vec(), normalized),
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Element>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let dn = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.numel()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxh = vec![T::zero(); d];
    for (r, ((dx_row, xh_row), dy_row)) in dx
        .chunks_mut(d)
        .zip(cache.normalized.data().chunks(d))
        .zip(dy.data().chunks(d))
        .enumerate()
    {
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            dgamma[j] = dgamma[j] + dy_row[j] * xh_row[j];
            dbeta[j] = dbeta[j] + dy_row[j];
            dxh[j] = dy_row[j] * gamma.data()[j];
            mean_dxh = mean_dxh + dxh[j];
            mean_dxh_xh = mean_dxh_xh + dxh[j] * xh_row[j];
        }
        mean_dxh = mean_dxh / dn;
        mean_dxh_xh = mean_dxh_xh / dn;
        let inv = cache.inv_std[r];
        for j in 0..d {
            dx_row[j] = inv * (dxh[j] - mean_dxh - xh_row[j] * mean_dxh_xh);
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

/// `a·w + b` with `b` broadcast over rows.
pub fn linear<T: Element>(a: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d_in) = a.dims2("linear")?;
    let (w_in, d_out) = w.dims2("linear")?;
    if w_in != d_in || b.shape() != [d_out] {
        return Err(shape_err(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?} are inconsistent",
                a.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, d_in, d_out, a.data(), false, w.data(), false, &mut out, true);
    Ok(Tensor::from_parts(vec![n, d_out], out))
}

/// Returns `(da, dw, db)`.
pub fn linear_backward<T: Element>(
    a: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (da, dw) = matmul_backward(a, w, dy);
    (da, dw, column_sums(dy))
}

pub(crate) fn column_sums<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let c = a.shape()[1];
    let mut out = vec![T::zero(); c];
    for row in a.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::from_parts(vec![c], out)
}

const GELU_K: f64 = 0.044_715;

/// Tanh-approximated Gaussian error linear unit.
pub fn gelu<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    a.map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
}

pub fn gelu_backward<T: Element>(a: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_K);
    let three_k = T::from_f64_lossy(3.0 * GELU_K);
    let half = T::from_f64_lossy(0.5);
    let data = a
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| {
            let t = (c * (x + k * x * x * x)).tanh();
            let d = half * (T::one() + t)
                + half * x * (T::one() - t * t) * c * (T::one() + three_k * x * x);
            d * g
        })
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub fn relu<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.max(T::zero()))
}

pub fn relu_backward<T: Element>(a: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Columns `start..start+len` of a matrix.
pub fn slice_cols<T: Element>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = a.dims2("slice_cols")?;
    if len == 0 || start + len > c {
        return Err(shape_err(
            "slice_cols",
            format!("columns {start}..{} out of range for {:?}", start + len, a.shape()),
        ));
    }
    let mut out = Vec::with_capacity(r * len);
    for row in a.data().chunks(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![r, len], out))
}

/// Scatters `dy` back into a zero matrix of `cols` columns at `start`.
pub fn slice_cols_backward<T: Element>(dy: &Tensor<T>, cols: usize, start: usize) -> Tensor<T> {
    let (r, len) = (dy.shape()[0], dy.shape()[1]);
    let mut out = vec![T::zero(); r * cols];
    for (o, g) in out.chunks_mut(cols).zip(dy.data().chunks(len)) {
        o[start..start + len].copy_from_slice(g);
    }
    Tensor::from_parts(vec![r, cols], out)
}

/// Concatenates matrices with equal row counts side by side.
pub fn concat_cols<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat_cols", "nothing to concatenate"))?;
    let rows = first.dims2("concat_cols")?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2("concat_cols")?;
        if r != rows {
            return Err(shape_err(
                "concat_cols",
                format!("row counts {:?} and {:?} differ", first.shape(), p.shape()),
            ));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![rows, total], out))
}

/// Mean squared error as a one-element tensor.
pub fn mse<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    pred.same_shape(target, "mse")?;
    let n = T::from_usize(pred.numel()).unwrap();
    let total = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |s, (&p, &t)| s + (p - t) * (p - t));
    Ok(Tensor::scalar(total / n))
}

/// Gradient of [`mse`] with respect to `pred`, scaled by upstream `g`.
pub fn mse_backward<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, g: T) -> Tensor<T> {
    let k = g * T::from_f64_lossy(2.0) / T::from_usize(pred.numel()).unwrap();
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| k * (p - t))
        .collect();
    Tensor::from_parts(pred.shape().to_vec(), data)
}
