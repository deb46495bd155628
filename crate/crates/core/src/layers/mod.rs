//! Layers with hand-written forward and backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, so
//! `backward` must follow a `forward` on the same instance. Parameter
//! gradients are summed over the batch; the `1/B` factor lives in the loss.

mod activation;
mod conv;
mod linear;
mod loss;
mod pool;

pub use activation::{sigmoid, Activation, ActivationLayer, Flatten};
pub use conv::ConvLayer;
pub use linear::LinearLayer;
pub use loss::{argmax_columns, softmax_columns, SoftmaxLogLoss};
pub use pool::MaxPoolLayer;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::patches::Padding;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor together with the gradient from the latest backward.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

pub trait Layer<T: Scalar>: Send {
    fn spec(&self) -> LayerSpec;

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>>;

    /// Input gradient; parameter gradients are stored on the layer.
    fn backward(&mut self, dzdy: &Tensor<T>) -> Result<Tensor<T>>;

    /// Output shape for a given input shape, without running the layer.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn params(&self) -> &[Parameter<T>] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut []
    }

    /// Re-draws parameters. `feeds_relu` selects the `√(2/fan_in)` scale.
    fn init(&mut self, _rng: &mut SeededRng, _feeds_relu: bool) {}

    /// Discrete choices of the last forward pass (relu signs, pool
    /// winners). Finite differences only hold while these stay fixed.
    fn branch_pattern(&self) -> Vec<i64> {
        Vec::new()
    }

    fn clone_box(&self) -> Box<dyn Layer<T>>;
}

impl<T: Scalar> Clone for Box<dyn Layer<T>> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Serializable description of a layer, used to build models and to record
/// architectures in configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        input: usize,
        output: usize,
    },
    Conv {
        kernel: (usize, usize),
        in_maps: usize,
        out_maps: usize,
        pad: Padding,
        stride: (usize, usize),
    },
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
        pad: Padding,
    },
    Relu,
    Sigmoid,
    Tanh,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Instantiates the layer with zero parameters; call `init` afterwards.
    pub fn build<T: Scalar>(&self) -> Result<Box<dyn Layer<T>>> {
        Ok(match *self {
            LayerSpec::Linear { input, output } => Box::new(LinearLayer::zeros(input, output)?),
            LayerSpec::Conv {
                kernel,
                in_maps,
                out_maps,
                pad,
                stride,
            } => Box::new(ConvLayer::zeros(kernel, in_maps, out_maps, pad, stride)?),
            LayerSpec::MaxPool { window, stride, pad } => Box::new(MaxPoolLayer::new(window, stride, pad)?),
            LayerSpec::Relu => Box::new(ActivationLayer::new(Activation::Relu)),
            LayerSpec::Sigmoid => Box::new(ActivationLayer::new(Activation::Sigmoid)),
            LayerSpec::Tanh => Box::new(ActivationLayer::new(Activation::Tanh)),
            LayerSpec::Flatten => Box::new(Flatten::default()),
        })
    }
}

/// `x` must be a matrix `[rows × batch]` with the expected row count.
pub(crate) fn expect_rows<T: Scalar>(x: &Tensor<T>, rows: usize, what: &str) -> Result<usize> {
    match x.shape() {
        [r, b] if *r == rows => Ok(*b),
        s => Err(crate::Error::Dimension(format!(
            "{what} expects [{rows} x batch], got {s:?}"
        ))),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    //! Central-difference checks shared by the layer tests.

    use super::*;

    /// Max relative error between the analytic input gradient and central
    /// differences of `z = Σ w ⊙ layer(x)` for a fixed random `w`.
    pub fn input_grad_error(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, seed: u64) -> f64 {
        let mut rng = SeededRng::new(seed);
        let y = layer.forward(x, true).unwrap();
        let w = Tensor::<f64>::gaussian(y.shape(), 1.0, &mut rng);
        let analytic = layer.backward(&w).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let zp = layer.forward(&xp, true).unwrap().mul(&w).unwrap().sum();
            let zm = layer.forward(&xm, true).unwrap().mul(&w).unwrap().sum();
            let cd = (zp - zm) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max(rel(a, cd));
        }
        worst
    }

    /// Same, for every coordinate of every parameter.
    pub fn param_grad_error(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, seed: u64) -> f64 {
        let mut rng = SeededRng::new(seed);
        let y = layer.forward(x, true).unwrap();
        let w = Tensor::<f64>::gaussian(y.shape(), 1.0, &mut rng);
        layer.backward(&w).unwrap();
        let grads: Vec<Tensor<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (pi, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let orig = layer.params()[pi].value.data()[i];
                layer.params_mut()[pi].value.data_mut()[i] = orig + h;
                let zp = layer.forward(x, true).unwrap().mul(&w).unwrap().sum();
                layer.params_mut()[pi].value.data_mut()[i] = orig - h;
                let zm = layer.forward(x, true).unwrap().mul(&w).unwrap().sum();
                layer.params_mut()[pi].value.data_mut()[i] = orig;
                let cd = (zp - zm) / (2.0 * h);
                worst = worst.max(rel(g.data()[i], cd));
            }
        }
        worst
    }

    pub fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }
}
