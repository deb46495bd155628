//! Frequency-domain 2-D convolution and correlation.
//!
//! Convolution uses `F⁻¹{F{x}·F{k}}` and correlation `F⁻¹{F{x}·conj(F{k})}`
//! on buffers zero-padded to powers of two large enough that the circular
//! wrap never reaches the samples that are read back. Strided outputs are
//! the stride-1 result subsampled.
//!
//! `conv2_*` is true convolution (kernel flipped); `corr2_*` slides the
//! kernel unflipped. The direct spatial loops at the bottom of this module
//! are the reference both FFT paths are tested against.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::{pooled_extent, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Complex 2-D array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexBuffer<T: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexBuffer<T> {
    pub fn at(&self, r: usize, c: usize) -> Complex<T> {
        self.data[r * self.cols + c]
    }

    pub fn real(&self) -> Vec<T> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn imag(&self) -> Vec<T> {
        self.data.iter().map(|z| z.im).collect()
    }
}

/// Spatial layout of one convolution: input and kernel extents, padding,
/// stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub input: (usize, usize),
    pub kernel: (usize, usize),
    pub pad: Padding,
    pub stride: (usize, usize),
}

impl ConvGeometry {
    pub fn valid(input: (usize, usize), kernel: (usize, usize)) -> Self {
        Self {
            input,
            kernel,
            pad: Padding::NONE,
            stride: (1, 1),
        }
    }

    /// `floor((H+Pt+Pb−Kh)/Sr)+1 × floor((W+Pl+Pr−Kw)/Sc)+1`.
    pub fn output(&self) -> Result<(usize, usize)> {
        let oh = pooled_extent(
            self.input.0,
            self.pad.top,
            self.pad.bottom,
            self.kernel.0,
            self.stride.0,
        );
        let ow = pooled_extent(
            self.input.1,
            self.pad.left,
            self.pad.right,
            self.kernel.1,
            self.stride.1,
        );
        match (oh, ow) {
            (Some(a), Some(b)) if self.input.0 > 0 && self.input.1 > 0 => Ok((a, b)),
            _ => Err(Error::dim(format!("invalid convolution geometry {self:?}"))),
        }
    }

    pub fn padded(&self) -> (usize, usize) {
        (
            self.input.0 + self.pad.top + self.pad.bottom,
            self.input.1 + self.pad.left + self.pad.right,
        )
    }

    /// Stride-1 ("valid") output extent of the padded input.
    pub fn dense_output(&self) -> (usize, usize) {
        let (hp, wp) = self.padded();
        (hp + 1 - self.kernel.0, wp + 1 - self.kernel.1)
    }

    /// Transform size: next power of two at or above the full linear
    /// convolution length along each axis.
    pub fn fft_size(&self) -> (usize, usize) {
        let (hp, wp) = self.padded();
        (
            (hp + self.kernel.0 - 1).next_power_of_two(),
            (wp + self.kernel.1 - 1).next_power_of_two(),
        )
    }
}

/// Cached row/column plans for one transform size.
///
/// The forward transform leaves the spectrum *transposed* (`cols × rows`),
/// which is all the pointwise products need, and the inverse undoes it.
/// [`fft2`]/[`ifft2`] wrap this with the conventional layout.
pub struct Fft2Plan<T: Scalar> {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Clone for Fft2Plan<T> {
    fn clone(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            row_fwd: Arc::clone(&self.row_fwd),
            row_inv: Arc::clone(&self.row_inv),
            col_fwd: Arc::clone(&self.col_fwd),
            col_inv: Arc::clone(&self.col_inv),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Fft2Plan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2Plan({}x{})", self.rows, self.cols)
    }
}

impl<T: Scalar> Fft2Plan<T> {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("zero-extent transform {rows}x{cols}")));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Zero-pads a real `h×w` plane placed at `(r0, c0)` and returns its
    /// transposed spectrum. `src` is read with row stride `w`.
    pub fn forward_real(&self, src: &[T], h: usize, w: usize, r0: usize, c0: usize) -> Vec<Complex<T>> {
        debug_assert!(r0 + h <= self.rows && c0 + w <= self.cols);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.len()];
        for i in 0..h {
            let row = &mut buf[(r0 + i) * self.cols..(r0 + i + 1) * self.cols];
            for j in 0..w {
                row[c0 + j].re = src[i * w + j];
            }
            self.row_fwd.process(row);
        }
        let mut t = transpose(&buf, self.rows, self.cols);
        for col in t.chunks_exact_mut(self.rows) {
            self.col_fwd.process(col);
        }
        t
    }

    /// Full forward transform of a complex buffer in natural layout,
    /// returning the transposed spectrum.
    pub fn forward_complex(&self, mut buf: Vec<Complex<T>>) -> Vec<Complex<T>> {
        for row in buf.chunks_exact_mut(self.cols) {
            self.row_fwd.process(row);
        }
        let mut t = transpose(&buf, self.rows, self.cols);
        for col in t.chunks_exact_mut(self.rows) {
            self.col_fwd.process(col);
        }
        t
    }

    /// Inverse of a transposed spectrum, normalized, in natural layout.
    pub fn inverse(&self, mut spec: Vec<Complex<T>>) -> Vec<Complex<T>> {
        for col in spec.chunks_exact_mut(self.rows) {
            self.col_inv.process(col);
        }
        let mut buf = transpose(&spec, self.cols, self.rows);
        for row in buf.chunks_exact_mut(self.cols) {
            self.row_inv.process(row);
        }
        let scale = T::one() / T::from_usize(self.len()).expect("transform size fits");
        for z in buf.iter_mut() {
            *z *= scale;
        }
        buf
    }
}

fn transpose<X: Copy>(src: &[X], rows: usize, cols: usize) -> Vec<X> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(src[i * cols + j]);
        }
    }
    out
}

fn plane<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::dim(format!("{what} needs a non-empty 2-D plane, got {s:?}"))),
    }
}

/// 2-D DFT at the tensor's own extents.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexBuffer<T>> {
    let (h, w) = plane(x, "fft2")?;
    let plan = Fft2Plan::new(h, w)?;
    let spec = plan.forward_real(x.data(), h, w, 0, 0);
    Ok(ComplexBuffer {
        rows: h,
        cols: w,
        data: transpose(&spec, w, h),
    })
}

/// Inverse 2-D DFT, keeping the real part.
pub fn ifft2<T: Scalar>(x: &ComplexBuffer<T>) -> Result<Tensor<T>> {
    let plan = Fft2Plan::new(x.rows, x.cols)?;
    let spec = transpose(&x.data, x.rows, x.cols);
    let out = plan.inverse(spec);
    Tensor::new(vec![x.rows, x.cols], out.iter().map(|z| z.re).collect())
}

/// Materializes the zero-padded input plane.
pub(crate) fn pad_plane<T: Scalar>(x: &[T], h: usize, w: usize, pad: Padding) -> (Vec<T>, usize, usize) {
    let hp = h + pad.top + pad.bottom;
    let wp = w + pad.left + pad.right;
    let mut out = vec![T::zero(); hp * wp];
    for i in 0..h {
        let dst = (i + pad.top) * wp + pad.left;
        out[dst..dst + w].copy_from_slice(&x[i * w..(i + 1) * w]);
    }
    (out, hp, wp)
}

fn check_operands<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeometry) -> Result<(usize, usize)> {
    let xs = plane(x, "convolution input")?;
    let ks = plane(k, "convolution kernel")?;
    if xs != geom.input || ks != geom.kernel {
        return Err(Error::dim(format!(
            "operands {xs:?} / {ks:?} disagree with geometry {geom:?}"
        )));
    }
    geom.output()
}

/// True 2-D convolution (kernel flipped) of the zero-padded input, valid
/// region only, subsampled by the stride.
pub fn conv2_fft<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let (oh, ow) = check_operands(x, k, geom)?;
    let (xp, hp, wp) = pad_plane(x.data(), geom.input.0, geom.input.1, geom.pad);
    let (n, m) = geom.fft_size();
    let plan = Fft2Plan::new(n, m)?;
    let xf = plan.forward_real(&xp, hp, wp, 0, 0);
    let kf = plan.forward_real(k.data(), geom.kernel.0, geom.kernel.1, 0, 0);
    let prod: Vec<_> = xf.iter().zip(&kf).map(|(a, b)| a * b).collect();
    let full = plan.inverse(prod);
    let (kh, kw) = geom.kernel;
    let (sr, sc) = geom.stride;
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            out.push(full[(r * sr + kh - 1) * m + c * sc + kw - 1].re);
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// 2-D cross-correlation (no flip) of the zero-padded input, valid region
/// only, subsampled by the stride.
pub fn corr2_fft<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let (oh, ow) = check_operands(x, k, geom)?;
    let (xp, hp, wp) = pad_plane(x.data(), geom.input.0, geom.input.1, geom.pad);
    let (n, m) = geom.fft_size();
    let plan = Fft2Plan::new(n, m)?;
    let xf = plan.forward_real(&xp, hp, wp, 0, 0);
    let kf = plan.forward_real(k.data(), geom.kernel.0, geom.kernel.1, 0, 0);
    let prod: Vec<_> = xf.iter().zip(&kf).map(|(a, b)| a * b.conj()).collect();
    let full = plan.inverse(prod);
    let (sr, sc) = geom.stride;
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            out.push(full[r * sr * m + c * sc].re);
        }
    }
    Tensor::new(vec![oh, ow], out)
}

fn direct<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeometry, flip: bool) -> Result<Tensor<T>> {
    let (oh, ow) = check_operands(x, k, geom)?;
    let (xp, _, wp) = pad_plane(x.data(), geom.input.0, geom.input.1, geom.pad);
    let (kh, kw) = geom.kernel;
    let kd = k.data();
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = T::zero();
            for u in 0..kh {
                for v in 0..kw {
                    let kv = if flip {
                        kd[(kh - 1 - u) * kw + (kw - 1 - v)]
                    } else {
                        kd[u * kw + v]
                    };
                    acc += xp[(r * geom.stride.0 + u) * wp + c * geom.stride.1 + v] * kv;
                }
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Spatial-domain reference for [`conv2_fft`].
pub fn direct_conv2<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    direct(x, k, geom, true)
}

/// Spatial-domain reference for [`corr2_fft`].
pub fn direct_corr2<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    direct(x, k, geom, false)
}
