//! Token-to-token machinery: dilated soft split (unfold), fold with overlap
//! normalization, the token/spatial reshape pair, and cyclic shift.
//!
//! Layout conventions shared by [`soft_split`] and [`fold`]:
//!
//! * Feature maps are `c×side×side`, row-major.
//! * Tokens are enumerated row-major over the window grid: the window whose
//!   top-left sample sits at grid position `(i, j)` is token `i·grid + j`.
//! * Inside a token, values are channel-major, then window-row-major:
//!   column `ch·k² + r·k + s` holds pixel
//!   `(i·stride − padding + dilation·r, j·stride − padding + dilation·s)`
//!   of channel `ch`. Positions in the zero padding read as 0.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Window geometry of one soft-split stage. Windows are square; stride,
/// dilation and padding apply identically to both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl StageGeometry {
    pub const fn new(kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
            padding,
        }
    }

    /// Padding that keeps the grid size at `side/stride` for odd spans.
    pub const fn same_padded(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self::new(kernel, stride, dilation, dilation * (kernel - 1) / 2)
    }

    /// Number of input pixels one window reaches across, end to end.
    pub fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Values per token for a `channels`-deep map.
    pub fn token_dim(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }

    /// Checks the span and stride constraints for an input of `side` pixels.
    pub fn check(&self, side: usize) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 || side == 0 {
            return Err(Error::Geometry(format!(
                "kernel, stride, dilation and side must be positive ({self:?}, side {side})"
            )));
        }
        let padded = side + 2 * self.padding;
        if self.span() > padded {
            return Err(Error::Geometry(format!(
                "window span {} exceeds padded side {padded}",
                self.span()
            )));
        }
        if self.stride > self.span() {
            return Err(Error::Geometry(format!(
                "stride {} exceeds window span {}; coverage violated",
                self.stride,
                self.span()
            )));
        }
        Ok(())
    }

    /// How many windows sample each pixel along one axis.
    pub fn axis_counts(&self, side: usize) -> Result<Vec<usize>> {
        let grid = token_count(side, self)?;
        let mut counts = vec![0; side];
        for t in 0..grid {
            for r in 0..self.kernel {
                if let Some(p) = self.source_index(t, r, side) {
                    counts[p] += 1;
                }
            }
        }
        Ok(counts)
    }

    /// [`check`](Self::check) plus: every pixel of the unpadded input is
    /// sampled by at least one window. Fold normalization needs this.
    pub fn check_coverage(&self, side: usize) -> Result<()> {
        let counts = self.axis_counts(side)?;
        match counts.iter().position(|&c| c == 0) {
            Some(p) => Err(Error::Geometry(format!(
                "pixel {p} of side {side} is sampled by no window ({self:?})"
            ))),
            None => Ok(()),
        }
    }

    /// Input index read by window `t` at kernel offset `r`, if not padding.
    #[inline]
    fn source_index(&self, t: usize, r: usize, side: usize) -> Option<usize> {
        let pos = (t * self.stride + self.dilation * r).checked_sub(self.padding)?;
        (pos < side).then_some(pos)
    }
}

/// Windows per axis for an input of `side` pixels:
/// `⌊(side + 2·padding − dilation·(kernel−1) − 1) / stride⌋ + 1`.
pub fn token_count(side: usize, g: &StageGeometry) -> Result<usize> {
    g.check(side)?;
    Ok((side + 2 * g.padding - g.dilation * (g.kernel - 1) - 1) / g.stride + 1)
}

/// A token matrix together with the window grid it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T = f32> {
    pub tokens: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<T: Element> TokenGrid<T> {
    pub fn new(tokens: Tensor<T>, grid_h: usize, grid_w: usize) -> Result<Self> {
        let (n, _) = tokens.dims2("token_grid")?;
        if n != grid_h * grid_w {
            return Err(shape_err(
                "token_grid",
                format!("{n} tokens cannot form a {grid_h}×{grid_w} grid"),
            ));
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

fn square_map<T: Element>(img: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let (c, h, w) = img.dims3(op)?;
    if h != w {
        return Err(shape_err(op, format!("feature map {:?} is not square", img.shape())));
    }
    Ok((c, h))
}

/// Unfold a `c×side×side` map into `grid²` tokens of `c·kernel²` values.
pub fn soft_split<T: Element>(img: &Tensor<T>, g: &StageGeometry) -> Result<TokenGrid<T>> {
    let (c, side) = square_map(img, "soft_split")?;
    let grid = token_count(side, g)?;
    let tokens = unfold_raw(img.data(), c, side, grid, g);
    Ok(TokenGrid {
        tokens: Tensor::from_parts(vec![grid * grid, g.token_dim(c)], tokens),
        grid_h: grid,
        grid_w: grid,
    })
}

fn unfold_raw<T: Element>(
    src: &[T],
    c: usize,
    side: usize,
    grid: usize,
    g: &StageGeometry,
) -> Vec<T> {
    let k = g.kernel;
    let d = c * k * k;
    let mut out = vec![T::zero(); grid * grid * d];
    // Column offsets depend only on (tj, s); precompute once per stage.
    let cols: Vec<Option<usize>> = (0..grid)
        .flat_map(|tj| (0..k).map(move |s| (tj, s)))
        .map(|(tj, s)| g.source_index(tj, s, side))
        .collect();
    for ti in 0..grid {
        for r in 0..k {
            let Some(y) = g.source_index(ti, r, side) else {
                continue;
            };
            for tj in 0..grid {
                let token = &mut out[(ti * grid + tj) * d..(ti * grid + tj + 1) * d];
                let col_idx = &cols[tj * k..(tj + 1) * k];
                for ch in 0..c {
                    let src_row = &src[(ch * side + y) * side..(ch * side + y + 1) * side];
                    let dst = &mut token[ch * k * k + r * k..ch * k * k + (r + 1) * k];
                    for (v, x) in dst.iter_mut().zip(col_idx) {
                        if let Some(x) = *x {
                            *v = src_row[x];
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold_raw<T: Element>(
    tokens: &[T],
    c: usize,
    side: usize,
    grid: usize,
    g: &StageGeometry,
) -> Vec<T> {
    let k = g.kernel;
    let d = c * k * k;
    let mut out = vec![T::zero(); c * side * side];
    let cols: Vec<Option<usize>> = (0..grid)
        .flat_map(|tj| (0..k).map(move |s| (tj, s)))
        .map(|(tj, s)| g.source_index(tj, s, side))
        .collect();
    for ti in 0..grid {
        for r in 0..k {
            let Some(y) = g.source_index(ti, r, side) else {
                continue;
            };
            for tj in 0..grid {
                let token = &tokens[(ti * grid + tj) * d..(ti * grid + tj + 1) * d];
                let col_idx = &cols[tj * k..(tj + 1) * k];
                for ch in 0..c {
                    let dst_row = &mut out[(ch * side + y) * side..(ch * side + y + 1) * side];
                    let src = &token[ch * k * k + r * k..ch * k * k + (r + 1) * k];
                    for (&v, x) in src.iter().zip(col_idx) {
                        if let Some(x) = *x {
                            dst_row[x] = dst_row[x] + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Number of windows covering each pixel of a `side×side` map.
pub fn contribution_counts(side: usize, g: &StageGeometry) -> Result<Vec<usize>> {
    let axis = g.axis_counts(side)?;
    Ok(axis
        .iter()
        .flat_map(|&ry| axis.iter().map(move |&cx| ry * cx))
        .collect())
}

/// Scatter-add tokens back to a `c×side×side` map. With `normalize`, each
/// pixel is divided by the number of windows that sampled it, which makes
/// `fold(soft_split(x))` reproduce `x`. Padding positions are dropped.
pub fn fold<T: Element>(
    tg: &TokenGrid<T>,
    c: usize,
    side: usize,
    g: &StageGeometry,
    normalize: bool,
) -> Result<Tensor<T>> {
    fold_tensor(&tg.tokens, c, side, g, normalize)
}

pub(crate) fn fold_tensor<T: Element>(
    tokens: &Tensor<T>,
    c: usize,
    side: usize,
    g: &StageGeometry,
    normalize: bool,
) -> Result<Tensor<T>> {
    let grid = token_count(side, g)?;
    let (n, d) = tokens.dims2("fold")?;
    if n != grid * grid || d != g.token_dim(c) {
        return Err(shape_err(
            "fold",
            format!(
                "tokens {:?} do not match {}×{} windows of {c}·{}² values",
                tokens.shape(),
                grid,
                grid,
                g.kernel
            ),
        ));
    }
    let mut out = fold_raw(tokens.data(), c, side, grid, g);
    if normalize {
        g.check_coverage(side)?;
        let inv = inverse_counts::<T>(side, g)?;
        for plane in out.chunks_mut(side * side) {
            for (v, &w) in plane.iter_mut().zip(&inv) {
                *v = *v * w;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, side, side], out))
}

fn inverse_counts<T: Element>(side: usize, g: &StageGeometry) -> Result<Vec<T>> {
    Ok(contribution_counts(side, g)?
        .into_iter()
        .map(|n| T::from_usize(n).unwrap().recip())
        .collect())
}

/// Vector-Jacobian product of [`soft_split`]: the unnormalized fold.
pub(crate) fn soft_split_backward<T: Element>(
    d_tokens: &Tensor<T>,
    c: usize,
    side: usize,
    g: &StageGeometry,
) -> Tensor<T> {
    let grid = token_count(side, g).expect("validated on forward");
    Tensor::from_parts(
        vec![c, side, side],
        fold_raw(d_tokens.data(), c, side, grid, g),
    )
}

/// Vector-Jacobian product of [`fold`].
pub(crate) fn fold_backward<T: Element>(
    d_img: &Tensor<T>,
    c: usize,
    side: usize,
    g: &StageGeometry,
    normalize: bool,
) -> Tensor<T> {
    let grid = token_count(side, g).expect("validated on forward");
    let tokens = if normalize {
        let inv = inverse_counts::<T>(side, g).expect("validated on forward");
        let scaled: Vec<T> = d_img
            .data()
            .chunks(side * side)
            .flat_map(|plane| plane.iter().zip(&inv).map(|(&v, &w)| v * w))
            .collect();
        unfold_raw(&scaled, c, side, grid, g)
    } else {
        unfold_raw(d_img.data(), c, side, grid, g)
    };
    Tensor::from_parts(vec![grid * grid, g.token_dim(c)], tokens)
}

/// Rolls every channel by `pixels` down and right, wrapping at the edges:
/// `out[ch][(r+pixels) mod h][(col+pixels) mod w] = img[ch][r][col]`.
/// Negative `pixels` rolls up and left, so `cyclic_shift(·, -k)` inverts
/// `cyclic_shift(·, k)`.
pub fn cyclic_shift<T: Element>(img: &Tensor<T>, pixels: i64) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3("cyclic_shift")?;
    let dy = pixels.rem_euclid(h as i64) as usize;
    let dx = pixels.rem_euclid(w as i64) as usize;
    let src = img.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for r in 0..h {
            let src_row = &src[(ch * h + r) * w..(ch * h + r + 1) * w];
            let dst_r = (r + dy) % h;
            let dst_row = &mut out[(ch * h + dst_r) * w..(ch * h + dst_r + 1) * w];
            // dst[(col + dx) mod w] = src[col]
            dst_row[dx..].copy_from_slice(&src_row[..w - dx]);
            dst_row[..dx].copy_from_slice(&src_row[w - dx..]);
        }
    }
    Ok(Tensor::from_parts(img.shape().to_vec(), out))
}

pub fn inverse_cyclic_shift<T: Element>(img: &Tensor<T>, pixels: i64) -> Result<Tensor<T>> {
    cyclic_shift(img, -pixels)
}

/// `n×d` tokens to a `d×grid_h×grid_w` map: token `i·grid_w + j` becomes
/// the channel vector at `(i, j)`.
pub fn tokens_to_spatial<T: Element>(tg: &TokenGrid<T>) -> Result<Tensor<T>> {
    let d = tg.dim();
    crate::ops::transpose(&tg.tokens)?.reshape(&[d, tg.grid_h, tg.grid_w])
}

pub fn spatial_to_tokens<T: Element>(img: &Tensor<T>) -> Result<TokenGrid<T>> {
    let (c, h, w) = img.dims3("spatial_to_tokens")?;
    let tokens = crate::ops::transpose(&img.reshape(&[c, h * w])?)?;
    TokenGrid::new(tokens, h, w)
}
