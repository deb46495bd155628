use crate::error::{Error, Result};
use crate::layers::{expect_rows, Layer, LayerSpec, Parameter};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// `y = W·x + b` on column batches `x: [in × B]`.
#[derive(Debug, Clone)]
pub struct LinearLayer<T: Scalar> {
    params: [Parameter<T>; 2],
    input: Option<Tensor<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn zeros(input: usize, output: usize) -> Result<Self> {
        Self::from_parts(Tensor::zeros(&[output, input]), Tensor::zeros(&[output]))
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, inp) = weight.as_matrix("linear weight")?;
        if out == 0 || inp == 0 || bias.shape() != [out] {
            return Err(Error::dim(format!(
                "linear layer needs W [out × in] with out, in ≥ 1 and b [out]; got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            params: [Parameter::new("W", weight), Parameter::new("b", bias)],
            input: None,
        })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.params[0].value
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.params[1].value
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.params[0].value.shape();
        (s[0], s[1])
    }
}

impl<T: Scalar> Layer<T> for LinearLayer<T> {
    fn spec(&self) -> LayerSpec {
        let (output, input) = self.dims();
        LayerSpec::Linear { input, output }
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let (out, inp) = self.dims();
        expect_rows(x, inp, "linear layer")?;
        let y = matmul(&self.params[0].value, x)?;
        let b = self.params[1].value.reshaped(&[out, 1])?;
        let y = y.add_broadcast(&b)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("linear backward called before forward".into()))?;
        let (out, _) = self.dims();
        let batch = expect_rows(dzdy, out, "linear backward")?;
        if batch != x.shape()[1] {
            return Err(Error::dim(format!(
                "upstream gradient batch {batch} differs from forward batch {}",
                x.shape()[1]
            )));
        }
        // dz/dx = Wᵀ·dz/dy, dz/dW = dz/dy·xᵀ, dz/db = Σ_batch dz/dy
        let dzdx = matmul_tn(&self.params[0].value, dzdy)?;
        self.params[0].grad = matmul_nt(dzdy, x)?;
        let db: Vec<T> = dzdy
            .data()
            .chunks(batch.max(1))
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        self.params[1].grad = Tensor::new(vec![out], db)?;
        Ok(dzdx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (out, inp) = self.dims();
        match input {
            [r, b] if *r == inp => Ok(vec![out, *b]),
            s => Err(Error::dim(format!("linear layer expects [{inp} x batch], got {s:?}"))),
        }
    }

    fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    fn init(&mut self, rng: &mut SeededRng, feeds_relu: bool) {
        let (out, inp) = self.dims();
        let gain = if feeds_relu { 2.0 } else { 1.0 };
        let std = (gain / inp as f64).sqrt();
        self.params[0].value = Tensor::gaussian(&[out, inp], std, rng);
        self.params[1].value = Tensor::zeros(&[out]);
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
