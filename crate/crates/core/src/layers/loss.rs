use crate::error::{Error, Result};
use crate::layers::expect_rows;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax followed by the mean negative log-likelihood of the labels.
///
/// Logits are `[K × B]` (classes down, batch across). The backward pass is
/// `(softmax − onehot) / B`.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxLogLoss<T: Scalar> {
    probs: Option<Tensor<T>>,
    labels: Vec<usize>,
}

impl<T: Scalar> SoftmaxLogLoss<T> {
    pub fn new() -> Self {
        Self {
            probs: None,
            labels: Vec::new(),
        }
    }

    pub fn forward(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let k = logits.shape().first().copied().unwrap_or(0);
        let b = expect_rows(logits, k, "softmax log-loss")?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside [0, {k})")));
        }
        let probs = softmax_columns(logits);
        let mut total = T::zero();
        let d = logits.data();
        for (j, &l) in labels.iter().enumerate() {
            // log softmax directly from logits: -(x_l - max - log Σ exp(x - max))
            let max = (0..k).map(|i| d[i * b + j]).fold(T::neg_infinity(), T::max);
            let lse = (0..k)
                .map(|i| (d[i * b + j] - max).exp())
                .fold(T::zero(), |a, v| a + v)
                .ln();
            total += -(d[l * b + j] - max - lse);
        }
        self.probs = Some(probs);
        self.labels = labels.to_vec();
        Ok(total / T::from_usize(b.max(1)).expect("batch fits"))
    }

    pub fn backward(&self) -> Result<Tensor<T>> {
        let probs = self
            .probs
            .as_ref()
            .ok_or_else(|| Error::State("loss backward called before forward".into()))?;
        let b = probs.shape()[1];
        let inv_b = T::one() / T::from_usize(b.max(1)).expect("batch fits");
        let mut g = probs.clone();
        for (j, &l) in self.labels.iter().enumerate() {
            g.data_mut()[l * b + j] -= T::one();
        }
        Ok(g.scale(inv_b))
    }

    pub fn probabilities(&self) -> Option<&Tensor<T>> {
        self.probs.as_ref()
    }

    /// Top-1 misclassifications in the last batch.
    pub fn errors(&self) -> usize {
        let Some(p) = &self.probs else { return 0 };
        let pred = argmax_columns(p);
        pred.iter().zip(&self.labels).filter(|(a, b)| a != b).count()
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (k, b) = (logits.shape()[0], logits.shape()[1]);
    let d = logits.data();
    let mut out = vec![T::zero(); k * b];
    for j in 0..b {
        let max = (0..k).map(|i| d[i * b + j]).fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for i in 0..k {
            let e = (d[i * b + j] - max).exp();
            out[i * b + j] = e;
            s += e;
        }
        for i in 0..k {
            out[i * b + j] /= s;
        }
    }
    Tensor::new(vec![k, b], out).expect("same shape")
}

/// Row index of the largest entry in each column; ties go to the lowest row.
pub fn argmax_columns<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
    let (k, b) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    (0..b)
        .map(|j| {
            let mut best = 0;
            for i in 1..k {
                if d[i * b + j] > d[best * b + j] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::rel;
    use crate::rng::SeededRng;

    #[test]
    fn uniform_logits_give_log_k() {
        let mut l = SoftmaxLogLoss::<f64>::new();
        let z = l.forward(&Tensor::zeros(&[10, 3]), &[0, 4, 9]).unwrap();
        assert!((z - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_true_logit_gives_zero_loss() {
        let mut l = SoftmaxLogLoss::<f32>::new();
        let x = Tensor::from_rows(&[&[1e4], &[0.0], &[-3.0]]);
        let z = l.forward(&x, &[0]).unwrap();
        assert!(z.abs() < 1e-6 && z.is_finite());
        // and the other way round stays finite too
        let z = l.forward(&x, &[2]).unwrap();
        assert!(z.is_finite() && z > 1e3);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::<f64>::gaussian(&[7, 5], 10.0, &mut rng);
        let p = softmax_columns(&x);
        for j in 0..5 {
            let s: f64 = (0..7).map(|i| p.data()[i * 5 + j]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn label_out_of_range_is_index_error() {
        let mut l = SoftmaxLogLoss::<f64>::new();
        assert!(matches!(l.forward(&Tensor::zeros(&[3, 1]), &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::<f64>::gaussian(&[6, 4], 2.0, &mut rng);
        let labels = [0, 5, 2, 2];
        let mut l = SoftmaxLogLoss::new();
        l.forward(&x, &labels).unwrap();
        let g = l.backward().unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let cd = (l.forward(&xp, &labels).unwrap() - l.forward(&xm, &labels).unwrap()) / (2.0 * h);
            assert!(rel(g.data()[i], cd) < 1e-6 || (g.data()[i] - cd).abs() < 1e-10);
        }
    }

    #[test]
    fn error_count() {
        let mut l = SoftmaxLogLoss::<f64>::new();
        let x = Tensor::from_rows(&[&[2.0, 0.0, 1.0], &[1.0, 3.0, 1.0]]);
        l.forward(&x, &[0, 0, 1]).unwrap();
        // predictions: 0, 1, 0 (tie → lowest)
        assert_eq!(l.errors(), 2);
    }
}
