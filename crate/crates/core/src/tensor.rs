//! Dense row-major tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Dense N-dimensional array, row-major (last axis contiguous).
///
/// Mini-batches use the `H x W x C x N` layout, so the batch index is the
/// fastest-varying one and a flattened batch is simply `[H*W*C, N]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements, got {} values",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    /// 2-D tensor from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn gaussian(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.gaussian() * std))
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.uniform_range(lo, hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Index(format!(
                "index {:?} has rank {}, tensor has rank {}",
                index,
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            if i >= n {
                return Err(Error::Index(format!(
                    "index {:?} out of bounds for shape {:?}",
                    index, self.shape
                )));
            }
            off = off * n + i;
        }
        Ok(off)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for (slot, &n) in idx.iter_mut().zip(&self.shape).rev() {
            *slot = offset % n;
            offset /= n;
        }
        idx
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        self.clone().reshape(shape)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Adds `bias` broadcast numpy-style: shapes are right-aligned and the
    /// bias may only have extent 1 where it differs from `self`.
    pub fn add_broadcast(&self, bias: &Self) -> Result<Self> {
        if bias.ndim() > self.ndim() {
            return Err(self.broadcast_error(bias));
        }
        let lead = self.ndim() - bias.ndim();
        let mut bshape = vec![1; lead];
        bshape.extend_from_slice(&bias.shape);
        for (&s, &b) in self.shape.iter().zip(&bshape) {
            if b != s && b != 1 {
                return Err(self.broadcast_error(bias));
            }
        }
        // Strides of the bias in the output index space (0 on broadcast axes).
        let mut bstrides = vec![0; bshape.len()];
        let mut acc = 1;
        for d in (0..bshape.len()).rev() {
            bstrides[d] = if bshape[d] == 1 { 0 } else { acc };
            acc *= bshape[d];
        }
        let mut out = self.clone();
        let mut idx = vec![0usize; self.ndim()];
        for v in out.data.iter_mut() {
            let boff: usize = idx.iter().zip(&bstrides).map(|(i, s)| i * s).sum();
            *v += bias.data[boff];
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(out)
    }

    fn broadcast_error(&self, bias: &Self) -> Error {
        Error::dim(format!("cannot broadcast {:?} onto {:?}", bias.shape, self.shape))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    /// General axis permutation: output axis `d` is input axis `axes[d]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("{axes:?} is not a permutation of {n} axes")));
        }
        let mut in_strides = vec![1; n];
        for d in (0..n.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * self.shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; n];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Sums over every axis except `axis`, giving a vector of that axis' extent.
    pub fn sum_except(&self, axis: usize) -> Result<Vec<T>> {
        if axis >= self.ndim() {
            return Err(Error::dim(format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = vec![T::zero(); n];
        for (i, chunk) in self.data.chunks(inner).enumerate() {
            let s = chunk.iter().fold(T::zero(), |acc, &v| acc + v);
            out[i % n] += s;
        }
        Ok(out)
    }

    pub(crate) fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("{what} needs a matrix, got shape {:?}", self.shape))),
        }
    }

    fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
///
/// Each output element accumulates over `k` in ascending order, so results
/// are bit-reproducible for a given precision.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = vec![T::zero(); m * n];
    for (i, crow) in c.chunks_mut(n.max(1)).enumerate().take(m) {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`, without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.as_matrix("matmul_tn")?;
    let (k2, n) = b.as_matrix("matmul_tn")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_tn leading extents differ: {:?}ᵀ · {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.as_matrix("matmul_nt")?;
    let (n, k2) = b.as_matrix("matmul_nt")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_nt trailing extents differ: {:?} · {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c.push(s);
        }
    }
    Tensor::new(vec![m, n], c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = Tensor::<f64>::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&i2, &v).unwrap(), v);
    }

    #[test]
    fn matmul_direct_arithmetic() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::<f32>::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(5);
        let a = Tensor::<f64>::gaussian(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::gaussian(&[7, 3], 1.0, &mut rng);
        let want = naive_matmul(a.data(), b.data(), 5, 7, 3);
        let got = matmul(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        let tn = matmul_tn(&a.transpose().unwrap(), &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose().unwrap()).unwrap();
        for ((x, y), w) in tn.data().iter().zip(nt.data()).zip(&want) {
            assert!((x - w).abs() < 1e-12 && (y - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] · [2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_and_broadcast() {
        let x = Tensor::<f32>::from_rows(&[&[1.0, 2.0]]);
        assert_eq!(x.map(|v| 2.0 * v).data(), &[2.0, 4.0]);
        let m = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::from_f64(&[1], &[1.0]).unwrap();
        assert_eq!(m.add_broadcast(&b).unwrap().data(), &[1.0; 4]);
        let col = Tensor::<f32>::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        assert_eq!(m.add_broadcast(&col).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        let bad = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(m.add_broadcast(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn permute_moves_axes() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.get(&[c, a, b]).unwrap(), t.get(&[a, b, c]).unwrap());
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn sum_except_axis() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        // axis 1 sums: entries with j fixed
        assert_eq!(
            t.sum_except(1).unwrap(),
            vec![0. + 1. + 6. + 7., 2. + 3. + 8. + 9., 4. + 5. + 10. + 11.]
        );
    }

    proptest! {
        #[test]
        fn offset_round_trips(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            let t = Tensor::<f32>::zeros(&shape);
            let mut rng = SeededRng::new(seed);
            let flat = rng.below(t.len());
            let idx = t.unravel(flat);
            prop_assert_eq!(t.offset(&idx).unwrap(), flat);
        }

        #[test]
        fn reshape_round_trip_is_bitwise(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let t = Tensor::<f32>::gaussian(&[a, b, c], 1.0, &mut rng);
            let back = t.reshaped(&[a * b * c]).unwrap().reshape(&[a, b, c]).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn transpose_is_an_involution(seed in any::<u64>(), r in 1usize..8, c in 1usize..8) {
            let mut rng = SeededRng::new(seed);
            let t = Tensor::<f64>::gaussian(&[r, c], 1.0, &mut rng);
            prop_assert_eq!(t.transpose().unwrap().transpose().unwrap(), t);
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let a = Tensor::<f64>::gaussian(&[4, 4], 1.0, &mut rng);
            let b = Tensor::<f64>::gaussian(&[4, 4], 1.0, &mut rng);
            let c = Tensor::<f64>::gaussian(&[4, 4], 1.0, &mut rng);
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
            }
        }
    }
}
