//! Reverse-mode differentiation over a closed set of tensor primitives.
//!
//! A [`Tape`] records each primitive as it is applied to [`Var`]s. Calling
//! [`Tape::gradients`] on a scalar replays the record backwards, visiting each
//! node once, and returns the gradient of every leaf that reaches the loss.
//!
//! ```
//! use tednet::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
//! let half_sq = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
//! let grads = tape.gradients(half_sq).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, -2.0, 0.5]);
//! ```
//!
//! One tape per forward pass; tapes are not shared across threads.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, LayerNormCache};
use crate::tensor::{Element, Tensor};
use crate::tokenization::{self, StageGeometry};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Transpose(usize),
    Reshape(usize),
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: LayerNormCache<T>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Gelu(usize),
    Relu(usize),
    SoftSplit {
        src: usize,
        geom: StageGeometry,
    },
    Fold {
        src: usize,
        geom: StageGeometry,
        channels: usize,
        side: usize,
        normalize: bool,
    },
    CyclicShift {
        src: usize,
        pixels: i64,
    },
    Mse {
        pred: usize,
        target: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Linear { .. } => "linear",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::SoftSplit { .. } => "soft_split",
            Op::Fold { .. } => "fold",
            Op::CyclicShift { .. } => "cyclic_shift",
            Op::Mse { .. } => "mse",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Relu(a) => vec![*a],
            Op::SliceCols { src, .. }
            | Op::SoftSplit { src, .. }
            | Op::Fold { src, .. }
            | Op::CyclicShift { src, .. } => vec![*src],
            Op::ConcatCols(parts) => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Mse { pred, target } => vec![*pred, *target],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of primitive applications for one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Constant, false)
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        let value = value.ensure_finite(op.name())?;
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].needs_grad)
        };
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn owns(&self, v: Var<'_, T>) -> Result<usize> {
        if std::ptr::eq(self, v.tape) && v.id < self.len() {
            Ok(v.id)
        } else {
            Err(Error::NotOnTape)
        }
    }

    /// Side-by-side concatenation of matrices.
    pub fn concat_cols(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let ids = parts
            .iter()
            .map(|&p| self.owns(p))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<_> = ids.iter().map(|&i| self.value(i)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = ops::concat_cols(&refs)?;
        self.push(out, Op::ConcatCols(ids))
    }

    /// Backpropagates from a one-element `loss`.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let root = self.owns(loss)?;
        let nodes = self.nodes.borrow();
        if !nodes[root].value.is_scalar() {
            return Err(Error::NotScalar {
                shape: nodes[root].value.shape().to_vec(),
            });
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        pending[root] = Some(Tensor::full(nodes[root].value.shape(), T::one()));

        for id in (0..=root).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            visited.push(id);
            let mut send = |p: usize, grad: Tensor<T>| {
                if !nodes[p].needs_grad {
                    return;
                }
                pending[p] = Some(match pending[p].take() {
                    Some(acc) => ops::add(&acc, &grad).expect("gradient shapes agree"),
                    None => grad,
                });
            };
            let val = |p: usize| nodes[p].value.as_ref();
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(val(*a), val(*b), &g);
                    send(*a, da);
                    send(*b, db);
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, ops::mul(&g, val(*b))?);
                    send(*b, ops::mul(&g, val(*a))?);
                }
                Op::Scale(a, s) => send(*a, ops::scale(&g, *s)),
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Transpose(a) => send(*a, ops::transpose(&g)?),
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
                Op::SliceCols { src, start } => {
                    let cols = val(*src).shape()[1];
                    send(*src, ops::slice_cols_backward(&g, cols, *start));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).shape()[1];
                        send(p, ops::slice_cols(&g, start, w)?);
                        start += w;
                    }
                }
                Op::Softmax(a) => send(*a, ops::softmax_rows_backward(&node.value, &g)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::layer_norm_backward(cache, val(*gamma), &g);
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), &g);
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::Gelu(a) => send(*a, ops::gelu_backward(val(*a), &g)),
                Op::Relu(a) => send(*a, ops::relu_backward(val(*a), &g)),
                Op::SoftSplit { src, geom } => {
                    let (c, side, _) = val(*src).dims3("soft_split")?;
                    send(*src, tokenization::soft_split_backward(&g, c, side, geom));
                }
                Op::Fold {
                    src,
                    geom,
                    channels,
                    side,
                    normalize,
                } => send(
                    *src,
                    tokenization::fold_backward(&g, *channels, *side, geom, *normalize),
                ),
                Op::CyclicShift { src, pixels } => {
                    send(*src, tokenization::cyclic_shift(&g, -*pixels)?)
                }
                Op::Mse { pred, target } => {
                    let dp = ops::mse_backward(val(*pred), val(*target), g.item());
                    send(*target, dp.map(|v| -v));
                    send(*pred, dp);
                }
            }
        }
        for g in leaves.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { leaves, visited })
    }

    /// Gradients of `loss` for each tensor in `wrt`, in order. Leaves the loss
    /// does not depend on get a zero gradient.
    pub fn grad(&self, loss: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let ids = wrt
            .iter()
            .map(|&v| self.owns(v))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = self.gradients(loss)?;
        Ok(ids
            .iter()
            .map(|&id| {
                grads.leaves[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes.borrow()[id].value.shape()))
            })
            .collect())
    }
}

/// Leaf gradients produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(v.id).and_then(Option::as_ref)
    }

    /// Moves a gradient out, or returns zeros shaped like `v`.
    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.leaves
            .get_mut(v.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    /// Node ids in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// Handle to a tensor recorded on a [`Tape`].
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn other(self, o: Var<'_, T>) -> Result<usize> {
        self.tape.owns(o)
    }

    pub fn matmul(self, b: Var<'_, T>) -> Result<Self> {
        let bi = self.other(b)?;
        let out = ops::matmul(&self.value(), &b.value())?;
        self.tape.push(out, Op::MatMul(self.id, bi))
    }

    pub fn add(self, b: Var<'_, T>) -> Result<Self> {
        let bi = self.other(b)?;
        let out = ops::add(&self.value(), &b.value())?;
        self.tape.push(out, Op::Add(self.id, bi))
    }

    pub fn sub(self, b: Var<'_, T>) -> Result<Self> {
        let bi = self.other(b)?;
        let out = ops::sub(&self.value(), &b.value())?;
        self.tape.push(out, Op::Sub(self.id, bi))
    }

    /// Elementwise product.
    pub fn mul(self, b: Var<'_, T>) -> Result<Self> {
        let bi = self.other(b)?;
        let out = ops::mul(&self.value(), &b.value())?;
        self.tape.push(out, Op::Mul(self.id, bi))
    }

    pub fn scale(self, s: T) -> Result<Self> {
        let out = ops::scale(&self.value(), s);
        self.tape.push(out, Op::Scale(self.id, s))
    }

    pub fn sum(self) -> Result<Self> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn transpose(self) -> Result<Self> {
        let out = ops::transpose(&self.value())?;
        self.tape.push(out, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        self.tape.push(out, Op::Reshape(self.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let out = ops::slice_cols(&self.value(), start, len)?;
        self.tape.push(out, Op::SliceCols { src: self.id, start })
    }

    pub fn softmax_rows(self) -> Result<Self> {
        let out = ops::softmax_rows(&self.value());
        self.tape.push(out, Op::Softmax(self.id))
    }

    pub fn layer_norm(self, gamma: Var<'_, T>, beta: Var<'_, T>, eps: T) -> Result<Self> {
        let (g, b) = (self.other(gamma)?, self.other(beta)?);
        let (out, cache) = ops::layer_norm_cached(&self.value(), &gamma.value(), &beta.value(), eps)?;
        self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: g,
                beta: b,
                cache,
            },
        )
    }

    pub fn linear(self, w: Var<'_, T>, b: Var<'_, T>) -> Result<Self> {
        let (wi, bi) = (self.other(w)?, self.other(b)?);
        let out = ops::linear(&self.value(), &w.value(), &b.value())?;
        self.tape.push(out, Op::Linear { x: self.id, w: wi, b: bi })
    }

    pub fn gelu(self) -> Result<Self> {
        let out = ops::gelu(&self.value());
        self.tape.push(out, Op::Gelu(self.id))
    }

    pub fn relu(self) -> Result<Self> {
        let out = ops::relu(&self.value());
        self.tape.push(out, Op::Relu(self.id))
    }

    /// Unfolds a `c×side×side` map into an `n×d` token matrix.
    pub fn soft_split(self, geom: &StageGeometry) -> Result<Self> {
        let tg = tokenization::soft_split(&self.value(), geom)?;
        self.tape.push(
            tg.tokens,
            Op::SoftSplit {
                src: self.id,
                geom: *geom,
            },
        )
    }

    /// Folds an `n×d` token matrix back to `channels×side×side`.
    pub fn fold(
        self,
        channels: usize,
        side: usize,
        geom: &StageGeometry,
        normalize: bool,
    ) -> Result<Self> {
        let out = tokenization::fold_tensor(&self.value(), channels, side, geom, normalize)?;
        self.tape.push(
            out,
            Op::Fold {
                src: self.id,
                geom: *geom,
                channels,
                side,
                normalize,
            },
        )
    }

    pub fn cyclic_shift(self, pixels: i64) -> Result<Self> {
        let out = tokenization::cyclic_shift(&self.value(), pixels)?;
        self.tape.push(out, Op::CyclicShift { src: self.id, pixels })
    }

    /// `n×d` tokens on a `grid_h×grid_w` grid to a `d×grid_h×grid_w` map.
    pub fn tokens_to_spatial(self, grid_h: usize, grid_w: usize) -> Result<Self> {
        let d = self.value().dims2("tokens_to_spatial")?.1;
        self.transpose()?.reshape(&[d, grid_h, grid_w])
    }

    /// `c×h×w` map to `h·w×c` tokens.
    pub fn spatial_to_tokens(self) -> Result<Self> {
        let (c, h, w) = self.value().dims3("spatial_to_tokens")?;
        self.reshape(&[c, h * w])?.transpose()
    }

    /// Mean squared error against `target`, as a one-element tensor.
    pub fn mse(self, target: Var<'_, T>) -> Result<Self> {
        let ti = self.other(target)?;
        let out = ops::mse(&self.value(), &target.value())?;
        self.tape.push(
            out,
            Op::Mse {
                pred: self.id,
                target: ti,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let loss = x.sum().unwrap();
        let g = tape.grad(loss, &[x]).unwrap();
        assert_eq!(g[0], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let tape = Tape::<f64>::new();
        let xv = t(&[4], &[0.5, -3., 2., 7.]);
        let x = tape.leaf(xv.clone());
        let loss = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
        assert_eq!(tape.grad(loss, &[x]).unwrap()[0], xv);
    }

    #[test]
    fn mse_gradient_matches_closed_form() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[3], &[1., 2., 3.]));
        let y = tape.constant(t(&[3], &[0., 2., 5.]));
        let g = tape.grad(p.mse(y).unwrap(), &[p]).unwrap();
        assert_eq!(g[0].data(), &[2. / 3., 0., -4. / 3.]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.gradients(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn foreign_tensor_is_rejected() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = a.leaf(Tensor::ones(&[2]));
        let y = b.leaf(Tensor::ones(&[2]));
        assert!(matches!(x.add(y), Err(Error::NotOnTape)));
        let loss = x.sum().unwrap();
        assert!(matches!(a.grad(loss, &[y]), Err(Error::NotOnTape)));
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let unused = tape.leaf(Tensor::ones(&[3]));
        let g = tape.grad(x.sum().unwrap(), &[unused]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[3]));
    }

    #[test]
    fn backward_visits_each_node_once_in_reverse() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = x.matmul(x).unwrap();
        let z = y.add(x).unwrap().softmax_rows().unwrap();
        let loss = z.mul(y).unwrap().sum().unwrap();
        let grads = tape.gradients(loss).unwrap();
        let order = grads.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.len(), tape.len());
    }

    #[test]
    fn nan_is_an_error_at_the_op_boundary() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[f64::MAX]));
        assert!(matches!(x.add(x), Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn constants_receive_no_backward_work() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(t(&[1, 3, 3], &[1.; 9]));
        let w = tape.leaf(t(&[1], &[2.]));
        let tokens = c.soft_split(&StageGeometry::new(3, 1, 1, 1)).unwrap();
        let loss = tokens.sum().unwrap().reshape(&[1]).unwrap().mul(w).unwrap().sum().unwrap();
        let grads = tape.gradients(loss).unwrap();
        assert!(!grads.visit_order().contains(&tokens.id()));
        // per-axis coverage 2+3+2, so every pixel sum reaches 7² windows
        assert_eq!(grads.get(w).unwrap().item(), 49.0);
    }
}
