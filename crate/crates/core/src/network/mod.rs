//! Sequential models, the training loop, gradient checking and checkpoints.

mod checkpoint;
mod gradcheck;
mod metrics;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, LayerCheck, GRAD_FLOOR};
pub use metrics::{format_g9, EpochRecord, Metrics, METRICS_HEADER};
pub use train::{classify_step, evaluate, TrainConfig, Trainer};

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec, Parameter};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layers applied in order. The per-sample input shape is fixed at
/// construction and every layer is checked against it.
#[derive(Clone)]
pub struct SequentialModel<T: Scalar> {
    layers: Vec<Box<dyn Layer<T>>>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> std::fmt::Debug for SequentialModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SequentialModel")
            .field("input_shape", &self.input_shape)
            .field("layers", &self.specs())
            .finish()
    }
}

impl<T: Scalar> SequentialModel<T> {
    /// Builds zero-initialized layers from specs; call [`Self::init`] next.
    pub fn from_specs(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Self> {
        let layers = specs.iter().map(|s| s.build()).collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, input_shape)
    }

    pub fn from_layers(layers: Vec<Box<dyn Layer<T>>>, input_shape: &[usize]) -> Result<Self> {
        let model = Self {
            layers,
            input_shape: input_shape.to_vec(),
        };
        model.output_shape(1)?;
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut Box<dyn Layer<T>>> {
        self.layers.get_mut(index)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    /// Shape produced for a batch of `batch` samples.
    pub fn output_shape(&self, batch: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        shape.push(batch);
        for (i, l) in self.layers.iter().enumerate() {
            shape = l.output_shape(&shape).map_err(|e| at_layer(i, l.spec().kind(), e))?;
        }
        Ok(shape)
    }

    /// Scaled-gaussian initialization; a layer followed by relu gets the
    /// `√(2/fan_in)` scale, every other layer `√(1/fan_in)`.
    pub fn init(&mut self, rng: &mut SeededRng) {
        let n = self.layers.len();
        for i in 0..n {
            let feeds_relu = self
                .layers
                .get(i + 1)
                .is_some_and(|next| next.spec() == LayerSpec::Relu);
            self.layers[i].init(rng, feeds_relu);
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            cur = l.forward(&cur, train).map_err(|e| at_layer(i, l.spec().kind(), e))?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = dzdy.clone();
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            cur = l.backward(&cur).map_err(|e| at_layer(i, l.spec().kind(), e))?;
        }
        Ok(cur)
    }

    /// Parameters in layer order, named `layer{i}.{name}`.
    pub fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params().iter().map(move |p| {
                    let prefix = format!("layer{i}.");
                    let name = if p.name.starts_with(&prefix) {
                        p.name.clone()
                    } else {
                        prefix + &p.name
                    };
                    (name, p)
                })
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().iter_mut()).collect()
    }

    /// Parameters with their names qualified by layer index, for the
    /// optimizer (which reports them in errors).
    pub fn qualified_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for p in l.params_mut() {
                if !p.name.starts_with("layer") {
                    p.name = format!("layer{i}.{}", p.name);
                }
            }
        }
        self.params_mut()
    }

    pub fn param_values(&self) -> Vec<Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.params().iter().map(|p| p.value.clone()))
            .collect()
    }

    pub fn set_param_values(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::dim(format!(
                "model has {} parameters, got {} values",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim(format!(
                    "parameter `{}` is {:?}, value is {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Concatenated [`Layer::branch_pattern`] of every layer.
    pub fn branch_pattern(&self) -> Vec<i64> {
        self.layers.iter().flat_map(|l| l.branch_pattern()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.value.len()).sum()
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Result<SequentialModel<U>> {
        let mut out = SequentialModel::<U>::from_specs(&self.specs(), &self.input_shape)?;
        let values: Vec<Tensor<U>> = self.param_values().iter().map(|t| t.cast()).collect();
        out.set_param_values(&values)?;
        Ok(out)
    }

    /// Test hook: wraps layer `index` so its backward pass returns negated
    /// gradients, for fault-injection checks of the gradient checker.
    pub fn corrupt_backward(&mut self, index: usize) -> Result<()> {
        if index >= self.layers.len() {
            return Err(Error::Index(format!(
                "no layer {index} in a {}-layer model",
                self.layers.len()
            )));
        }
        let inner = self.layers[index].clone_box();
        self.layers[index] = Box::new(SignFlipped { inner });
        Ok(())
    }
}

fn at_layer(index: usize, kind: &str, e: Error) -> Error {
    match e {
        Error::Dimension(m) => Error::Dimension(format!("layer {index} ({kind}): {m}")),
        Error::State(m) => Error::State(format!("layer {index} ({kind}): {m}")),
        other => other,
    }
}

#[derive(Clone)]
struct SignFlipped<T: Scalar> {
    inner: Box<dyn Layer<T>>,
}

impl<T: Scalar> Layer<T> for SignFlipped<T> {
    fn spec(&self) -> LayerSpec {
        self.inner.spec()
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        self.inner.forward(x, train)
    }

    fn backward(&mut self, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
        let dx = self.inner.backward(dzdy)?;
        for p in self.inner.params_mut() {
            p.grad = p.grad.scale(-T::one());
        }
        Ok(dx.scale(-T::one()))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.inner.output_shape(input)
    }

    fn params(&self) -> &[Parameter<T>] {
        self.inner.params()
    }

    fn branch_pattern(&self) -> Vec<i64> {
        self.inner.branch_pattern()
    }

    fn params_mut(&mut self) -> &mut [Parameter<T>] {
        self.inner.params_mut()
    }

    fn init(&mut self, rng: &mut SeededRng, feeds_relu: bool) {
        self.inner.init(rng, feeds_relu)
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LinearLayer;

    #[test]
    fn empty_model_is_identity() {
        let mut m = SequentialModel::<f64>::from_specs(&[], &[3]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(m.forward(&x, true).unwrap(), x);
    }

    #[test]
    fn identity_linear_passes_input() {
        let w = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = LinearLayer::from_parts(w, Tensor::zeros(&[2])).unwrap();
        let mut m = SequentialModel::from_layers(vec![Box::new(l)], &[2]).unwrap();
        let x = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(m.forward(&x, false).unwrap(), x);
    }

    #[test]
    fn shape_break_names_layer() {
        let specs = [
            LayerSpec::Linear { input: 4, output: 3 },
            LayerSpec::Relu,
            LayerSpec::Linear { input: 5, output: 2 },
        ];
        let e = SequentialModel::<f32>::from_specs(&specs, &[4])
            .unwrap_err()
            .to_string();
        assert!(e.contains("layer 2 (linear)"), "{e}");
    }

    #[test]
    fn init_scales_follow_next_layer() {
        let specs = [
            LayerSpec::Linear {
                input: 400,
                output: 300,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                input: 300,
                output: 200,
            },
        ];
        let mut m = SequentialModel::<f64>::from_specs(&specs, &[400]).unwrap();
        m.init(&mut SeededRng::new(1));
        let std = |t: &Tensor<f64>| (t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        let p = m.named_params();
        assert_eq!(p[0].0, "layer0.W");
        assert!((std(&p[0].1.value) / (2.0f64 / 400.0).sqrt() - 1.0).abs() < 0.02);
        assert!((std(&p[2].1.value) / (1.0f64 / 300.0).sqrt() - 1.0).abs() < 0.02);
        assert_eq!(p[1].1.value.sum(), 0.0);
    }

    #[test]
    fn qualified_names_are_not_prefixed_twice() {
        let specs = [LayerSpec::Linear { input: 2, output: 2 }];
        let mut m = SequentialModel::<f32>::from_specs(&specs, &[2]).unwrap();
        let before: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        m.qualified_params_mut();
        let after: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(before, after);
        assert_eq!(after[0], "layer0.W");
    }

    #[test]
    fn cast_preserves_architecture() {
        let specs = [LayerSpec::Linear { input: 3, output: 2 }, LayerSpec::Tanh];
        let mut m = SequentialModel::<f32>::from_specs(&specs, &[3]).unwrap();
        m.init(&mut SeededRng::new(2));
        let d = m.cast::<f64>().unwrap();
        assert_eq!(d.specs(), m.specs());
        assert_eq!(d.param_values()[0].data()[0], m.param_values()[0].data()[0] as f64);
    }
}
