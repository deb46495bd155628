//! The four reference experiments: architectures, default settings, and
//! reduced-size instances for gradient checking.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::lstm::{lstm_grad_check, Lstm, StepInput};
use crate::network::{grad_check, relative_error, GradCheckReport, LayerCheck, SequentialModel, TrainConfig};
use crate::optim::{OptimHyper, OptimizerKind, SelectiveSgdConfig};
use crate::patches::Padding;
use crate::rl::{masked_q_loss, qnet_specs, CartPoleState, Transition};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    MlpMnist,
    CnnCifar10,
    LstmChar,
    QnetCartpole,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::MlpMnist,
        Experiment::CnnCifar10,
        Experiment::LstmChar,
        Experiment::QnetCartpole,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::MlpMnist => "mlp-mnist",
            Experiment::CnnCifar10 => "cnn-cifar10",
            Experiment::LstmChar => "lstm-char",
            Experiment::QnetCartpole => "qnet-cartpole",
        }
    }

    /// Training defaults for the classifier experiments.
    pub fn default_train_config(self) -> TrainConfig {
        let base = TrainConfig::default();
        match self {
            Experiment::MlpMnist => TrainConfig {
                epochs: 10,
                batch_size: 100,
                optimizer: OptimizerKind::Sgd,
                hyper: OptimHyper {
                    momentum: 0.9,
                    ..OptimHyper::with_lr(0.01)
                },
                ..base
            },
            Experiment::CnnCifar10 => TrainConfig {
                epochs: 10,
                batch_size: 50,
                optimizer: OptimizerKind::Sgd,
                hyper: OptimHyper {
                    momentum: 0.9,
                    ..OptimHyper::with_lr(0.01)
                },
                ..base
            },
            Experiment::LstmChar | Experiment::QnetCartpole => base,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.as_str()).collect();
            Error::Config(format!(
                "unknown experiment `{s}` (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

/// 784-128-128-10 with relu hidden layers.
pub fn mlp_mnist_specs() -> Vec<LayerSpec> {
    mlp_specs(&[784, 128, 128, 10])
}

pub fn mlp_specs(widths: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (k, w) in widths.windows(2).enumerate() {
        specs.push(LayerSpec::Linear {
            input: w[0],
            output: w[1],
        });
        if k + 2 < widths.len() {
            specs.push(LayerSpec::Relu);
        }
    }
    specs
}

fn conv(k: usize, i: usize, o: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernel: (k, k),
        in_maps: i,
        out_maps: o,
        pad: Padding::uniform(pad),
        stride: (1, 1),
    }
}

/// Overlapping 3×3 / stride 2 pooling that halves an even extent.
fn pool() -> LayerSpec {
    LayerSpec::MaxPool {
        window: (3, 3),
        stride: (2, 2),
        pad: Padding::new(0, 1, 0, 1),
    }
}

/// 32×32×3 input: three 5×5 convolutions (32, 32, 64 maps) each followed by
/// relu and pooling, a final 4×4 convolution with 64 maps and relu, then a
/// linear layer to the 10 classes.
pub fn cnn_cifar10_specs() -> Vec<LayerSpec> {
    vec![
        conv(5, 3, 32, 2),
        LayerSpec::Relu,
        pool(),
        conv(5, 32, 32, 2),
        LayerSpec::Relu,
        pool(),
        conv(5, 32, 64, 2),
        LayerSpec::Relu,
        pool(),
        conv(4, 64, 64, 0),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Linear { input: 64, output: 10 },
    ]
}

pub const CIFAR_INPUT: [usize; 3] = [32, 32, 3];
pub const MNIST_INPUT: [usize; 1] = [784];

/// Selective-SGD defaults used by `--selective-sgd`.
pub fn default_selective_sgd() -> SelectiveSgdConfig {
    SelectiveSgdConfig::default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradArch {
    Mlp,
    Cnn,
    Lstm,
    Qnet,
}

impl GradArch {
    pub const ALL: [GradArch; 4] = [GradArch::Mlp, GradArch::Cnn, GradArch::Lstm, GradArch::Qnet];

    pub fn as_str(self) -> &'static str {
        match self {
            GradArch::Mlp => "mlp",
            GradArch::Cnn => "cnn",
            GradArch::Lstm => "lstm",
            GradArch::Qnet => "qnet",
        }
    }
}

impl FromStr for GradArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradArch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected mlp, cnn, lstm or qnet)")))
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Reduced CNN with the same layer sequence on an 8×8×3 input.
pub fn small_cnn_specs() -> Vec<LayerSpec> {
    vec![
        conv(5, 3, 4, 2),
        LayerSpec::Relu,
        pool(),
        conv(5, 4, 4, 2),
        LayerSpec::Relu,
        pool(),
        conv(2, 4, 6, 0),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Linear { input: 6, output: 10 },
    ]
}

fn corrupt_kind(model: &mut SequentialModel<f64>, kind: &str) -> Result<()> {
    let index = model
        .specs()
        .iter()
        .position(|s| s.kind() == kind)
        .ok_or_else(|| Error::Config(format!("no `{kind}` layer to corrupt")))?;
    model.corrupt_backward(index)
}

/// Gradient check of a reduced instance of `arch` (64-bit). `corrupt` names
/// a layer kind (or, for the LSTM, a parameter) whose gradient is negated.
pub fn run_gradcheck(arch: GradArch, seed: u64, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let classify = |specs: Vec<LayerSpec>, input: &[usize], batch: usize, rng: &mut SeededRng| {
        let mut m = SequentialModel::<f64>::from_specs(&specs, input)?;
        m.init(&mut rng.fork(1));
        if let Some(kind) = corrupt {
            corrupt_kind(&mut m, kind)?;
        }
        let mut shape = input.to_vec();
        shape.push(batch);
        let x = Tensor::gaussian(&shape, 1.0, rng);
        let labels: Vec<usize> = (0..batch).map(|_| rng.below(10)).collect();
        grad_check(&mut m, &x, &labels, 40, GRADCHECK_STEP, GRADCHECK_TOLERANCE, rng)
    };
    match arch {
        GradArch::Mlp => classify(mlp_specs(&[20, 16, 12, 10]), &[20], 4, &mut rng),
        GradArch::Cnn => classify(small_cnn_specs(), &[8, 8, 3], 2, &mut rng),
        GradArch::Lstm => {
            let (v, hidden, t_len) = (6, 5, 6);
            let mut l = Lstm::<f64>::zeros(v, hidden, v)?;
            l.init(&mut rng.fork(1));
            let xs: Vec<StepInput<f64>> = (0..t_len)
                .map(|_| StepInput::Tokens(vec![rng.below(v), rng.below(v)]))
                .collect();
            let ys: Vec<Vec<usize>> = (0..t_len).map(|_| vec![rng.below(v), rng.below(v)]).collect();
            lstm_grad_check(
                &mut l,
                &xs,
                &ys,
                40,
                GRADCHECK_STEP,
                GRADCHECK_TOLERANCE,
                &mut rng,
                corrupt,
            )
        }
        GradArch::Qnet => qnet_gradcheck(&mut rng, corrupt),
    }
}

/// Masked squared TD loss with frozen targets against central differences.
fn qnet_gradcheck(rng: &mut SeededRng, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let mut m = SequentialModel::<f64>::from_specs(&qnet_specs(&[8]), &[4])?;
    m.init(&mut rng.fork(1));
    if let Some(kind) = corrupt {
        corrupt_kind(&mut m, kind)?;
    }
    let batch: Vec<Transition> = (0..6)
        .map(|_| {
            let mut s = || CartPoleState {
                x: rng.uniform_range(-1.0, 1.0),
                x_dot: rng.uniform_range(-1.0, 1.0),
                theta: rng.uniform_range(-0.2, 0.2),
                theta_dot: rng.uniform_range(-1.0, 1.0),
            };
            let (state_old, state_new) = (s(), s());
            Transition {
                state_old,
                act: rng.below(2),
                reward: 1.0,
                state_new,
                terminal: false,
            }
        })
        .collect();
    // Fold the targets into terminal rewards so they stay constant under
    // perturbation, as in training.
    let gamma = 0.9;
    let q_new = crate::rl::q_values(&mut m, &batch.iter().map(|t| t.state_new).collect::<Vec<_>>())?;
    let frozen: Vec<Transition> = batch
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let col = [q_new.data()[j], q_new.data()[batch.len() + j]];
            Transition {
                reward: crate::rl::q_target(t, &col, gamma),
                terminal: true,
                ..*t
            }
        })
        .collect();
    let (_, dzdy) = masked_q_loss(&mut m, &frozen, gamma)?;
    m.backward(&dzdy)?;
    let mut checks = Vec::new();
    let n_layers = m.len();
    for li in 0..n_layers {
        let grads: Vec<Vec<f64>> = m.layers()[li].params().iter().map(|p| p.grad.data().to_vec()).collect();
        if grads.is_empty() {
            continue;
        }
        let mut worst: f64 = 0.0;
        let (mut coords, mut skipped) = (0, 0);
        let branches = m.branch_pattern();
        for (pi, g) in grads.iter().enumerate() {
            let mut used = 0;
            for e in rng.permutation(g.len()) {
                if used == 20 {
                    break;
                }
                let set = |m: &mut SequentialModel<f64>, v: f64| {
                    m.layer_mut(li).expect("layer").params_mut()[pi].value.data_mut()[e] = v;
                };
                let orig = m.layers()[li].params()[pi].value.data()[e];
                set(&mut m, orig + GRADCHECK_STEP);
                let zp = masked_q_loss(&mut m, &frozen, gamma)?.0;
                let kink_p = m.branch_pattern() != branches;
                set(&mut m, orig - GRADCHECK_STEP);
                let zm = masked_q_loss(&mut m, &frozen, gamma)?.0;
                let kink_m = m.branch_pattern() != branches;
                set(&mut m, orig);
                if kink_p || kink_m {
                    skipped += 1;
                    continue;
                }
                worst = worst.max(relative_error(g[e], (zp - zm) / (2.0 * GRADCHECK_STEP)));
                used += 1;
            }
            coords += used;
        }
        checks.push(LayerCheck {
            name: format!("layer{li}.{}", m.layers()[li].spec().kind()),
            coords,
            skipped,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        checks,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
        }
        assert!(matches!("resnet".parse::<Experiment>(), Err(Error::Config(_))));
    }

    #[test]
    fn reference_architectures_have_expected_shapes() {
        let m = SequentialModel::<f32>::from_specs(&mlp_mnist_specs(), &MNIST_INPUT).unwrap();
        assert_eq!(m.output_shape(7).unwrap(), vec![10, 7]);
        assert_eq!(m.num_params(), 784 * 128 + 128 + 128 * 128 + 128 + 128 * 10 + 10);
        let c = SequentialModel::<f32>::from_specs(&cnn_cifar10_specs(), &CIFAR_INPUT).unwrap();
        assert_eq!(c.output_shape(2).unwrap(), vec![10, 2]);
        let small = SequentialModel::<f32>::from_specs(&small_cnn_specs(), &[8, 8, 3]).unwrap();
        assert_eq!(small.output_shape(2).unwrap(), vec![10, 2]);
    }

    #[test]
    fn every_reduced_architecture_passes() {
        for a in GradArch::ALL {
            let r = run_gradcheck(a, 1, None).unwrap();
            assert!(r.passed(), "{}:\n{r}", a.as_str());
        }
    }

    #[test]
    fn corruption_is_detected() {
        assert!(!run_gradcheck(GradArch::Cnn, 1, Some("conv")).unwrap().passed());
        assert!(!run_gradcheck(GradArch::Mlp, 1, Some("linear")).unwrap().passed());
        assert!(!run_gradcheck(GradArch::Lstm, 1, Some("W_fh")).unwrap().passed());
        assert!(matches!(
            run_gradcheck(GradArch::Mlp, 1, Some("conv")),
            Err(Error::Config(_))
        ));
    }
}
