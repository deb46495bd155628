use std::fmt;

use crate::error::Result;
use crate::layers::SoftmaxLogLoss;
use crate::network::train::classify_step;
use crate::network::SequentialModel;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Worst sampled coordinate of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub name: String,
    pub coords: usize,
    /// Coordinates passed over because a perturbation crossed a relu or
    /// max-pool kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<LayerCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> Vec<&LayerCheck> {
        self.checks
            .iter()
            .filter(|c| c.max_rel_error > self.tolerance)
            .collect()
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.max_rel_error <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            write!(
                f,
                "{:<24} coords={:<4} max_rel_err={:.3e} {verdict}",
                c.name, c.coords, c.max_rel_error
            )?;
            if c.skipped > 0 {
                write!(f, " (skipped {} at kinks)", c.skipped)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Gradients smaller than this are compared absolutely. Central differences
/// at `h = 1e-5` on a loss of order 10 carry up to about `2e-10` of
/// cancellation noise, so relative error is meaningless for near-zero
/// gradients (dead relu or pool paths, weakly coupled recurrent weights).
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a − cd| / max(|a|, |cd|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn loss_of(model: &mut SequentialModel<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let logits = model.forward(x, true)?;
    SoftmaxLogLoss::new().forward(&logits, labels)
}

/// Compares analytic parameter gradients of the mean softmax log-loss with
/// central differences at up to `coords_per_layer` sampled coordinates of
/// each parameterized layer. Coordinates whose perturbation flips a relu or
/// changes a pool winner are replaced by fresh ones.
pub fn grad_check(
    model: &mut SequentialModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    coords_per_layer: usize,
    h: f64,
    tolerance: f64,
    rng: &mut SeededRng,
) -> Result<GradCheckReport> {
    classify_step(model, x, labels)?;
    let branches = model.branch_pattern();
    let mut checks = Vec::new();
    for li in 0..model.len() {
        // (param, element, analytic)
        let coords: Vec<(usize, usize, f64)> = model.layers()[li]
            .params()
            .iter()
            .enumerate()
            .flat_map(|(pi, p)| p.grad.data().iter().enumerate().map(move |(e, &g)| (pi, e, g)))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let mut worst: f64 = 0.0;
        let (mut used, mut skipped) = (0, 0);
        for i in rng.permutation(coords.len()) {
            if used == coords_per_layer {
                break;
            }
            let (pi, e, analytic) = coords[i];
            let orig = model.layers()[li].params()[pi].value.data()[e];
            let set = |m: &mut SequentialModel<f64>, v: f64| {
                m.layer_mut(li).expect("layer exists").params_mut()[pi].value.data_mut()[e] = v;
            };
            set(model, orig + h);
            let zp = loss_of(model, x, labels)?;
            let kink_p = model.branch_pattern() != branches;
            set(model, orig - h);
            let zm = loss_of(model, x, labels)?;
            let kink_m = model.branch_pattern() != branches;
            set(model, orig);
            if kink_p || kink_m {
                skipped += 1;
                continue;
            }
            used += 1;
            worst = worst.max(relative_error(analytic, (zp - zm) / (2.0 * h)));
        }
        checks.push(LayerCheck {
            name: format!("layer{li}.{}", model.layers()[li].spec().kind()),
            coords: used,
            skipped,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { checks, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;

    fn data(rows: usize, b: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::gaussian(&[rows, b], 1.0, &mut rng);
        let labels = (0..b).map(|i| i % 3).collect();
        (x, labels)
    }

    #[test]
    fn linear_only_model_is_tight() {
        let specs = [
            LayerSpec::Linear { input: 5, output: 4 },
            LayerSpec::Linear { input: 4, output: 3 },
        ];
        let mut m = SequentialModel::from_specs(&specs, &[5]).unwrap();
        m.init(&mut SeededRng::new(1));
        let (x, l) = data(5, 4, 2);
        let r = grad_check(&mut m, &x, &l, 100, 1e-5, 1e-7, &mut SeededRng::new(3)).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.checks.len(), 2);
    }

    #[test]
    fn relu_model_passes() {
        let specs = [
            LayerSpec::Linear { input: 6, output: 8 },
            LayerSpec::Relu,
            LayerSpec::Linear { input: 8, output: 3 },
        ];
        let mut m = SequentialModel::from_specs(&specs, &[6]).unwrap();
        m.init(&mut SeededRng::new(4));
        let (x, l) = data(6, 5, 5);
        let r = grad_check(&mut m, &x, &l, 30, 1e-5, 1e-4, &mut SeededRng::new(6)).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        let specs = [
            LayerSpec::Linear { input: 6, output: 8 },
            LayerSpec::Tanh,
            LayerSpec::Linear { input: 8, output: 3 },
        ];
        let mut m = SequentialModel::from_specs(&specs, &[6]).unwrap();
        m.init(&mut SeededRng::new(4));
        m.corrupt_backward(2).unwrap();
        let (x, l) = data(6, 5, 5);
        let r = grad_check(&mut m, &x, &l, 30, 1e-5, 1e-4, &mut SeededRng::new(6)).unwrap();
        assert!(!r.passed());
        assert!(r.failures().iter().any(|c| c.name == "layer2.linear"));
    }
}
