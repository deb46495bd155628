//! SGD-family optimizers and the Selective-SGD learning-rate search.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameter;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Rmsprop,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adagrad,
        OptimizerKind::Rmsprop,
        OptimizerKind::Adam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown optimizer `{s}` (sgd, adagrad, rmsprop, adam)")))
    }
}

/// Hyperparameters shared by all optimizers; each uses the subset it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub learning_rate: f64,
    /// SGD heavy-ball momentum.
    pub momentum: f64,
    /// RMSProp squared-gradient decay.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 term added to the gradient before the update.
    pub weight_decay: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.0,
            decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimHyper {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (
                self.learning_rate > 0.0 && self.learning_rate.is_finite(),
                "learning_rate > 0",
            ),
            ((0.0..1.0).contains(&self.momentum), "momentum in [0, 1)"),
            (self.decay > 0.0 && self.decay < 1.0, "decay in (0, 1)"),
            (self.beta1 > 0.0 && self.beta1 < 1.0, "beta1 in (0, 1)"),
            (self.beta2 > 0.0 && self.beta2 < 1.0, "beta2 in (0, 1)"),
            (self.epsilon > 0.0, "epsilon > 0"),
            (self.weight_decay >= 0.0, "weight_decay >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(Error::Config(format!(
                "optimizer hyperparameter violates {what}: {self:?}"
            ))),
            None => Ok(()),
        }
    }
}

/// Plain or momentum SGD: `v ← μv − lr·g; w ← w + v`.
pub fn sgd_step<T: Scalar>(w: &mut [T], g: &[T], velocity: &mut [T], h: &OptimHyper) {
    let lr: T = lit(h.learning_rate);
    let mu: T = lit(h.momentum);
    for ((w, &g), v) in w.iter_mut().zip(g).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * g;
        *w += *v;
    }
}

/// Adagrad: `G ← G + g²; w ← w − lr·g/(√G + ε)`.
pub fn adagrad_step<T: Scalar>(w: &mut [T], g: &[T], sum_sq: &mut [T], h: &OptimHyper) {
    let lr: T = lit(h.learning_rate);
    let eps: T = lit(h.epsilon);
    for ((w, &g), s) in w.iter_mut().zip(g).zip(sum_sq.iter_mut()) {
        *s += g * g;
        *w -= lr * g / (s.sqrt() + eps);
    }
}

/// RMSProp: `E ← ρE + (1−ρ)g²; w ← w − lr·g/(√E + ε)`.
pub fn rmsprop_step<T: Scalar>(w: &mut [T], g: &[T], mean_sq: &mut [T], h: &OptimHyper) {
    let lr: T = lit(h.learning_rate);
    let eps: T = lit(h.epsilon);
    let rho: T = lit(h.decay);
    for ((w, &g), e) in w.iter_mut().zip(g).zip(mean_sq.iter_mut()) {
        *e = rho * *e + (T::one() - rho) * g * g;
        *w -= lr * g / (e.sqrt() + eps);
    }
}

/// Adam with bias-corrected moments; `t` is the 1-based step number.
pub fn adam_step<T: Scalar>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, h: &OptimHyper) {
    let lr: T = lit(h.learning_rate);
    let eps: T = lit(h.epsilon);
    let b1: T = lit(h.beta1);
    let b2: T = lit(h.beta2);
    let c1: T = lit(1.0 - h.beta1.powf(t as f64));
    let c2: T = lit(1.0 - h.beta2.powf(t as f64));
    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *w -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Per-parameter accumulators. `first` is the velocity (SGD), squared-sum
/// (Adagrad), squared EMA (RMSProp) or first moment (Adam); `second` is
/// Adam's second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T: Scalar> {
    pub first: Tensor<T>,
    pub second: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub slots: Vec<Slot<T>>,
    /// Number of completed steps.
    pub step: u64,
}

impl<T: Scalar> Default for OptimState<T> {
    fn default() -> Self {
        Self {
            slots: Vec::new(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    hyper: OptimHyper,
    state: OptimState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, hyper: OptimHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            kind,
            hyper,
            state: OptimState::default(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn hyper(&self) -> &OptimHyper {
        &self.hyper
    }

    pub fn learning_rate(&self) -> f64 {
        self.hyper.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        let hyper = OptimHyper {
            learning_rate: lr,
            ..self.hyper
        };
        hyper.validate()?;
        self.hyper = hyper;
        Ok(())
    }

    pub fn state(&self) -> &OptimState<T> {
        &self.state
    }

    pub fn set_state(&mut self, state: OptimState<T>) {
        self.state = state;
    }

    pub fn reset(&mut self) {
        self.state = OptimState::default();
    }

    fn ensure_slots(&mut self, params: &[&mut Parameter<T>]) -> Result<()> {
        if self.state.slots.is_empty() {
            self.state.slots = params
                .iter()
                .map(|p| Slot {
                    first: Tensor::zeros(p.value.shape()),
                    second: (self.kind == OptimizerKind::Adam).then(|| Tensor::zeros(p.value.shape())),
                })
                .collect();
        }
        if self.state.slots.len() != params.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, got {}",
                self.state.slots.len(),
                params.len()
            )));
        }
        for (slot, p) in self.state.slots.iter().zip(params) {
            if slot.first.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "parameter `{}` {:?} / gradient {:?} / accumulator {:?} disagree",
                    p.name,
                    p.value.shape(),
                    p.grad.shape(),
                    slot.first.shape()
                )));
            }
        }
        Ok(())
    }

    /// One update of every parameter from its stored gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        self.ensure_slots(params)?;
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::Numeric {
                name: p.name.clone(),
                detail: "non-finite gradient".into(),
            });
        }
        let t = self.state.step + 1;
        let h = self.hyper;
        let wd: T = lit(h.weight_decay);
        for (p, slot) in params.iter_mut().zip(self.state.slots.iter_mut()) {
            let decayed;
            let g: &[T] = if h.weight_decay > 0.0 {
                decayed = p.grad.zip_map(&p.value, |g, w| g + wd * w)?;
                decayed.data()
            } else {
                p.grad.data()
            };
            let w = p.value.data_mut();
            let first = slot.first.data_mut();
            match self.kind {
                OptimizerKind::Sgd => sgd_step(w, g, first, &h),
                OptimizerKind::Adagrad => adagrad_step(w, g, first, &h),
                OptimizerKind::Rmsprop => rmsprop_step(w, g, first, &h),
                OptimizerKind::Adam => {
                    let second = slot
                        .second
                        .as_mut()
                        .ok_or_else(|| Error::State("Adam slot missing second moment".into()))?;
                    adam_step(w, g, first, second.data_mut(), t, &h)
                }
            }
        }
        self.state.step = t;
        Ok(())
    }
}

/// Settings for the learning-rate search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveSgdConfig {
    pub candidate_rates: Vec<f64>,
    pub trial_iterations: usize,
    /// Re-run the search every this many epochs (rates ≤ current only).
    pub reselect_every: Option<usize>,
    /// Weight of the newest loss in the smoothed trial loss.
    pub smoothing: f64,
}

impl Default for SelectiveSgdConfig {
    fn default() -> Self {
        Self {
            candidate_rates: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            trial_iterations: 50,
            reselect_every: None,
            smoothing: 0.1,
        }
    }
}

impl SelectiveSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_rates.is_empty() {
            return Err(Error::Config("selective SGD needs at least one candidate rate".into()));
        }
        if self.candidate_rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!(
                "candidate rates must be positive: {:?}",
                self.candidate_rates
            )));
        }
        if self.trial_iterations == 0 {
            return Err(Error::Config("trial_iterations must be ≥ 1".into()));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::Config("smoothing must be in (0, 1]".into()));
        }
        if self.reselect_every == Some(0) {
            return Err(Error::Config("reselect_every must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Something that can be snapshotted and trained for a few steps at a
/// given learning rate.
pub trait LrTrial {
    type Snapshot;

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: &Self::Snapshot);

    /// Runs trial step `iteration` at `lr` and returns its training loss.
    /// Implementations must feed the same data for the same `iteration`
    /// regardless of the rate.
    fn trial_step(&mut self, iteration: usize, lr: f64) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub rate: f64,
    /// Smoothed loss at the end of the trial; `None` if it went non-finite.
    pub smoothed_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    pub chosen: f64,
    pub trials: Vec<TrialOutcome>,
}

/// Tries every candidate rate (optionally only those ≤ `max_rate`) from the
/// same snapshot and returns the one with the lowest smoothed loss; ties go
/// to the larger rate. The model is restored to the snapshot afterwards.
pub fn selective_sgd_search<M: LrTrial>(
    model: &mut M,
    config: &SelectiveSgdConfig,
    max_rate: Option<f64>,
) -> Result<SearchReport> {
    config.validate()?;
    let mut rates: Vec<f64> = config
        .candidate_rates
        .iter()
        .copied()
        .filter(|&r| max_rate.is_none_or(|m| r <= m))
        .collect();
    if rates.is_empty() {
        // Nothing below the cap: keep the smallest candidate.
        let min = config.candidate_rates.iter().copied().fold(f64::INFINITY, f64::min);
        rates.push(min);
    }
    if rates.len() == 1 {
        return Ok(SearchReport {
            chosen: rates[0],
            trials: vec![],
        });
    }

    let snapshot = model.snapshot();
    let mut trials = Vec::with_capacity(rates.len());
    let mut best: Option<(f64, f64)> = None;
    for &rate in &rates {
        model.restore(&snapshot);
        let mut smoothed: Option<f64> = None;
        let mut diverged = false;
        for it in 0..config.trial_iterations {
            let loss = match model.trial_step(it, rate) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::Numeric { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => {
                    model.restore(&snapshot);
                    return Err(e);
                }
            };
            smoothed = Some(match smoothed {
                None => loss,
                Some(s) => (1.0 - config.smoothing) * s + config.smoothing * loss,
            });
        }
        let outcome = if diverged {
            None
        } else {
            smoothed.filter(|s| s.is_finite())
        };
        if let Some(loss) = outcome {
            let better = match best {
                None => true,
                Some((bl, br)) => loss < bl || (loss == bl && rate > br),
            };
            if better {
                best = Some((loss, rate));
            }
        }
        trials.push(TrialOutcome {
            rate,
            smoothed_loss: outcome,
        });
    }
    model.restore(&snapshot);
    match best {
        Some((_, chosen)) => Ok(SearchReport { chosen, trials }),
        None => Err(Error::Search(format!(
            "every candidate rate diverged ({rates:?}); try smaller candidates"
        ))),
    }
}
