use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// `dz/dx` given the upstream gradient, the input and the output.
    /// The relu subgradient at exactly 0 is 0.
    pub fn derivative<T: Scalar>(self, dzdy: T, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    dzdy
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => dzdy * y * (T::one() - y),
            Activation::Tanh => dzdy * (T::one() - y * y),
        }
    }
}

/// Logistic function, split on the sign of `x` so `exp` never overflows.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationLayer<T: Scalar> {
    kind: Activation,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ActivationLayer<T> {
    pub fn new(kind: Activation) -> Self {
        Self { kind, cache: None }
    }

    pub fn kind(&self) -> Activation {
        self.kind
    }
}

impl<T: Scalar> Layer<T> for ActivationLayer<T> {
    fn spec(&self) -> LayerSpec {
        match self.kind {
            Activation::Relu => LayerSpec::Relu,
            Activation::Sigmoid => LayerSpec::Sigmoid,
            Activation::Tanh => LayerSpec::Tanh,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let kind = self.kind;
        let y = x.map(|v| kind.apply(v));
        self.cache = Some((x.clone(), y.clone()));
        Ok(y)
    }

    fn branch_pattern(&self) -> Vec<i64> {
        match (&self.cache, self.kind) {
            (Some((x, _)), Activation::Relu) => x.data().iter().map(|&v| i64::from(v > T::zero())).collect(),
            _ => Vec::new(),
        }
    }

    fn backward(&mut self, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, y) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("activation backward called before forward".into()))?;
        if dzdy.shape() != x.shape() {
            return Err(Error::dim(format!(
                "activation backward: upstream {:?} vs input {:?}",
                dzdy.shape(),
                x.shape()
            )));
        }
        let kind = self.kind;
        let data = dzdy
            .data()
            .iter()
            .zip(x.data())
            .zip(y.data())
            .map(|((&g, &xv), &yv)| kind.derivative(g, xv, yv))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}

/// Collapses `[d0 × … × dk × B]` to `[d0·…·dk × B]`. Free in row-major.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Layer<T> for Flatten {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Flatten
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let shape = <Self as Layer<T>>::output_shape(self, x.shape())?;
        self.input_shape = Some(x.shape().to_vec());
        x.reshaped(&shape)
    }

    fn backward(&mut self, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| Error::State("flatten backward called before forward".into()))?;
        dzdy.reshaped(shape)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input.split_last() {
            Some((&b, rest)) if !rest.is_empty() => Ok(vec![rest.iter().product(), b]),
            _ => Err(Error::dim(format!("cannot flatten shape {input:?}"))),
        }
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
