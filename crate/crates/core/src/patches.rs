//! Window extraction (im2col) and its adjoint, scatter-accumulate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Marks a padding cell in [`SourceIndices`].
pub const PAD_SENTINEL: i64 = -1;

/// Zero or constant padding, in `(top, bottom, left, right)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding::uniform(0);

    pub const fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub const fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self {
            top,
            bottom,
            left,
            right,
        }
    }
}

/// Flat indices into the unpadded input for every entry of a column matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceIndices {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

/// Output of [`im2col_pool`].
#[derive(Debug, Clone)]
pub struct PoolColumns<T: Scalar> {
    /// `[(Pr·Pc) × L]`, one window per column.
    pub columns: Tensor<T>,
    pub sources: SourceIndices,
    /// Spatial extent `(H', W')` of the pooled output.
    pub out_hw: (usize, usize),
}

/// Pooled output extent along one axis, or `None` if no window fits.
pub fn pooled_extent(n: usize, pad_lo: usize, pad_hi: usize, window: usize, stride: usize) -> Option<usize> {
    let padded = n + pad_lo + pad_hi;
    if window == 0 || stride == 0 || padded < window {
        None
    } else {
        Some((padded - window) / stride + 1)
    }
}

/// Splits a `[H, W, ...]` shape into `(H, W, trailing product)`.
pub(crate) fn spatial_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h] => Ok((*h, 1, 1)),
        [h, w, rest @ ..] => Ok((*h, *w, rest.iter().product())),
        [] => Err(Error::dim("scalar input has no spatial extent")),
    }
}

/// Rearranges every `Pr×Pc` window of an `H×W×C×N` tensor into a column.
///
/// Column `j` enumerates outputs in the same row-major order as the pooled
/// tensor `H'×W'×C×N`; row `u·Pc + v` holds window element `(u, v)`. Cells
/// that fall in the padding take `pad_value` and get [`PAD_SENTINEL`] as
/// their source index.
pub fn im2col_pool<T: Scalar>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
    pad: Padding,
    pad_value: T,
) -> Result<PoolColumns<T>> {
    let (h, w, inner) = spatial_split(x.shape())?;
    let (pr, pc) = window;
    let (sr, sc) = stride;
    let oh = pooled_extent(h, pad.top, pad.bottom, pr, sr);
    let ow = pooled_extent(w, pad.left, pad.right, pc, sc);
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::dim(format!(
                "{pr}x{pc} window (stride {sr}x{sc}) does not fit {h}x{w} input padded by {pad:?}"
            )))
        }
    };
    let rows = pr * pc;
    let cols = oh * ow * inner;
    let mut columns = vec![pad_value; rows * cols];
    let mut sources = vec![PAD_SENTINEL; rows * cols];
    let xd = x.data();
    for u in 0..pr {
        for v in 0..pc {
            let r = u * pc + v;
            let base = r * cols;
            for i in 0..oh {
                let hh = (i * sr + u) as isize - pad.top as isize;
                if hh < 0 || hh >= h as isize {
                    continue;
                }
                for j in 0..ow {
                    let ww = (j * sc + v) as isize - pad.left as isize;
                    if ww < 0 || ww >= w as isize {
                        continue;
                    }
                    let src = (hh as usize * w + ww as usize) * inner;
                    let dst = base + (i * ow + j) * inner;
                    columns[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
                    for (k, s) in sources[dst..dst + inner].iter_mut().enumerate() {
                        *s = (src + k) as i64;
                    }
                }
            }
        }
    }
    Ok(PoolColumns {
        columns: Tensor::new(vec![rows, cols], columns)?,
        sources: SourceIndices {
            rows,
            cols,
            data: sources,
        },
        out_hw: (oh, ow),
    })
}

/// `out[i] = Σ values[j]` over every `j` with `indices[j] == i`; sentinel
/// entries are dropped. Accumulation runs in ascending `j`.
pub fn scatter_accumulate<T: Scalar>(target_shape: &[usize], indices: &[i64], values: &[T]) -> Result<Tensor<T>> {
    if indices.len() != values.len() {
        return Err(Error::dim(format!(
            "scatter_accumulate: {} indices for {} values",
            indices.len(),
            values.len()
        )));
    }
    let n = numel(target_shape);
    let mut out = vec![T::zero(); n];
    for (&i, &v) in indices.iter().zip(values) {
        if i == PAD_SENTINEL {
            continue;
        }
        if i < 0 || i as usize >= n {
            return Err(Error::Index(format!(
                "scatter index {i} outside target of {n} elements"
            )));
        }
        out[i as usize] += v;
    }
    Tensor::new(target_shape.to_vec(), out)
}
