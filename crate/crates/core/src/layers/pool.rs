use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec};
use crate::patches::{im2col_pool, pooled_extent, scatter_accumulate, spatial_split, Padding, PAD_SENTINEL};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max pooling over `Pr×Pc` windows of an `[H × W × C × B]` tensor.
///
/// Padding cells read as −∞, so they are never selected. Ties go to the
/// first maximum in window order (row-major inside the window). Overlapping
/// windows (window > stride) accumulate their gradients on shared cells.
#[derive(Debug, Clone)]
pub struct MaxPoolLayer {
    window: (usize, usize),
    stride: (usize, usize),
    pad: Padding,
    cache: Option<(Vec<usize>, Vec<i64>)>,
}

impl MaxPoolLayer {
    pub fn new(window: (usize, usize), stride: (usize, usize), pad: Padding) -> Result<Self> {
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim(format!(
                "pool window {window:?} and stride {stride:?} must be ≥ 1"
            )));
        }
        // A pad at least as wide as the window admits all-padding windows.
        if pad.top >= window.0 || pad.bottom >= window.0 || pad.left >= window.1 || pad.right >= window.1 {
            return Err(Error::dim(format!(
                "pool padding {pad:?} must be smaller than the window {window:?}"
            )));
        }
        Ok(Self {
            window,
            stride,
            pad,
            cache: None,
        })
    }

    /// Flat input indices selected by the last forward pass.
    pub fn selected(&self) -> Option<&[i64]> {
        self.cache.as_ref().map(|(_, from)| &from[..])
    }
}

impl<T: Scalar> Layer<T> for MaxPoolLayer {
    fn spec(&self) -> LayerSpec {
        LayerSpec::MaxPool {
            window: self.window,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let out_shape = <Self as Layer<T>>::output_shape(self, x.shape())?;
        let cols = im2col_pool(x, self.window, self.stride, self.pad, T::neg_infinity())?;
        let (rows, n) = (cols.sources.rows, cols.sources.cols);
        let data = cols.columns.data();
        let mut out = Vec::with_capacity(n);
        let mut from = Vec::with_capacity(n);
        let mut best = data[..n].to_vec();
        let mut arg: Vec<usize> = vec![0; n];
        for r in 1..rows {
            let row = &data[r * n..(r + 1) * n];
            for j in 0..n {
                // strict > keeps the first maximum
                if row[j] > best[j] {
                    best[j] = row[j];
                    arg[j] = r;
                }
            }
        }
        for j in 0..n {
            let src = cols.sources.data[arg[j] * n + j];
            if src == PAD_SENTINEL {
                return Err(Error::dim("pooling window covers only padding"));
            }
            out.push(best[j]);
            from.push(src);
        }
        self.cache = Some((x.shape().to_vec(), from));
        Tensor::new(out_shape, out)
    }

    fn branch_pattern(&self) -> Vec<i64> {
        self.cache.as_ref().map(|(_, from)| from.clone()).unwrap_or_default()
    }

    fn backward(&mut self, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, from) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("maxpool backward called before forward".into()))?;
        if dzdy.len() != from.len() {
            return Err(Error::dim(format!(
                "maxpool backward got {} upstream values for {} outputs",
                dzdy.len(),
                from.len()
            )));
        }
        scatter_accumulate(shape, from, dzdy.data())
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (h, w, _) = spatial_split(input)?;
        let oh = pooled_extent(h, self.pad.top, self.pad.bottom, self.window.0, self.stride.0);
        let ow = pooled_extent(w, self.pad.left, self.pad.right, self.window.1, self.stride.1);
        match (oh, ow, input.len() >= 2) {
            (Some(a), Some(b), true) => {
                let mut s = vec![a, b];
                s.extend_from_slice(&input[2..]);
                Ok(s)
            }
            _ => Err(Error::dim(format!(
                "pool window {:?} does not fit input {input:?} with padding {:?}",
                self.window, self.pad
            ))),
        }
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
