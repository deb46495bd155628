use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::layers::SoftmaxLogLoss;
use crate::network::checkpoint::{bits, unbits, Checkpoint};
use crate::network::metrics::{EpochRecord, Metrics};
use crate::network::SequentialModel;
use crate::optim::{
    selective_sgd_search, LrTrial, OptimHyper, OptimState, Optimizer, OptimizerKind, SelectiveSgdConfig,
};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub hyper: OptimHyper,
    pub selective_sgd: Option<SelectiveSgdConfig>,
    pub seed: u64,
    pub eval_every: usize,
    /// Record real epoch durations in the metrics; off keeps the CSV
    /// reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            optimizer: OptimizerKind::Sgd,
            hyper: OptimHyper::default(),
            selective_sgd: None,
            seed: 0,
            eval_every: 1,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be ≥ 1".into()));
        }
        self.hyper.validate()?;
        if let Some(s) = &self.selective_sgd {
            s.validate()?;
        }
        Ok(())
    }
}

/// Forward, softmax log-loss and backward on one batch. Leaves gradients on
/// the model and returns (mean loss, misclassified count).
pub fn classify_step<T: Scalar>(
    model: &mut SequentialModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, usize)> {
    let logits = model.forward(x, true)?;
    let mut loss = SoftmaxLogLoss::new();
    let z = loss.forward(&logits, labels)?;
    let g = loss.backward()?;
    model.backward(&g)?;
    Ok((z.as_f64(), loss.errors()))
}

/// Mean loss and top-1 error rate over a dataset, in order.
pub fn evaluate<T: Scalar>(
    model: &mut SequentialModel<T>,
    data: &LabeledDataset<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = data.len();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut errors = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.forward(&x, false)?;
        let mut loss = SoftmaxLogLoss::new();
        total += loss.forward(&logits, &labels)?.as_f64() * chunk.len() as f64;
        errors += loss.errors();
    }
    Ok((total / n as f64, errors as f64 / n as f64))
}

/// Owns the model and optimizer for one training stream. Progress is kept
/// at batch granularity so a checkpoint can be taken between any two steps.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: SequentialModel<T>,
    pub optimizer: Optimizer<T>,
    config: TrainConfig,
    rng: SeededRng,
    epoch: usize,
    epoch_rng_state: u64,
    order: Vec<usize>,
    pos: usize,
    step: u64,
    loss_sum: f64,
    err_count: usize,
    nonfinite_evals: usize,
    chosen_rates: Vec<(usize, f64)>,
    metrics: Metrics,
    timings: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    /// The model is used as given; initialize it beforehand.
    pub fn new(model: SequentialModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, config.hyper)?;
        let rng = SeededRng::new(config.seed);
        Ok(Self {
            model,
            optimizer,
            epoch_rng_state: rng.state(),
            rng,
            config,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
            step: 0,
            loss_sum: 0.0,
            err_count: 0,
            nonfinite_evals: 0,
            chosen_rates: Vec::new(),
            metrics: Metrics::default(),
            timings: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    /// Wall-clock seconds per completed epoch, whether or not they are
    /// written into the metrics.
    pub fn timings(&self) -> &[f64] {
        &self.timings
    }

    /// `(epoch, rate)` for every Selective-SGD search run so far.
    pub fn chosen_rates(&self) -> &[(usize, f64)] {
        &self.chosen_rates
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn search_due(&self) -> bool {
        let Some(s) = &self.config.selective_sgd else {
            return false;
        };
        self.pos == 0
            && (self.epoch == 0 || s.reselect_every.is_some_and(|k| self.epoch.is_multiple_of(k)))
            && !self.chosen_rates.iter().any(|&(e, _)| e == self.epoch)
    }

    fn run_search(&mut self, train: &LabeledDataset<T>) -> Result<()> {
        let cfg = self.config.selective_sgd.clone().expect("search_due checked");
        // Trial data comes from its own stream so the search leaves the
        // training shuffle untouched.
        let mut rng = SeededRng::new(self.config.seed ^ 0x5E1E_C7ED).fork(self.epoch as u64);
        let n = train.len();
        let mut order = rng.permutation(n);
        let mut batches = Vec::with_capacity(cfg.trial_iterations);
        let mut at = 0;
        for _ in 0..cfg.trial_iterations {
            if at + self.config.batch_size > n && at > 0 {
                order = rng.permutation(n);
                at = 0;
            }
            let end = (at + self.config.batch_size).min(n);
            batches.push(order[at..end].to_vec());
            at = end;
        }
        let cap = (self.epoch > 0).then(|| self.optimizer.learning_rate());
        let current = self.optimizer.learning_rate();
        let mut trial = Trial {
            model: &mut self.model,
            optimizer: &mut self.optimizer,
            data: train,
            batches,
        };
        let report = selective_sgd_search(&mut trial, &cfg, cap);
        // Trials change the rate; put back whatever was there before.
        self.optimizer.set_learning_rate(current)?;
        let report = report?;
        self.optimizer.set_learning_rate(report.chosen)?;
        self.chosen_rates.push((self.epoch, report.chosen));
        Ok(())
    }

    /// One optimizer step on the next batch of the current epoch. Returns the
    /// batch loss and whether that batch ended the epoch.
    pub fn train_step(&mut self, train: &LabeledDataset<T>) -> Result<(f64, bool)> {
        let n = train.len();
        if n == 0 {
            return Err(Error::Data("empty training set".into()));
        }
        if self.search_due() {
            self.run_search(train)?;
        }
        if self.order.is_empty() {
            if self.pos == 0 {
                self.epoch_rng_state = self.rng.state();
                self.order = self.rng.permutation(n);
            } else {
                // resumed mid-epoch: replay the shuffle without touching rng
                self.order = SeededRng::from_state(self.epoch_rng_state).permutation(n);
            }
        }
        if self.order.len() != n {
            return Err(Error::State(format!(
                "trainer holds a permutation of {} samples, dataset has {n}",
                self.order.len()
            )));
        }
        let end = (self.pos + self.config.batch_size).min(n);
        let (x, labels) = train.batch(&self.order[self.pos..end])?;
        let (loss, errors) = classify_step(&mut self.model, &x, &labels)?;
        let grads_finite = self.model.params_mut().iter().all(|p| p.grad.all_finite());
        if loss.is_finite() && grads_finite {
            let mut params = self.model.qualified_params_mut();
            self.optimizer.step(&mut params)?;
        }
        self.loss_sum += loss * labels.len() as f64;
        self.err_count += errors;
        self.pos = end;
        self.step += 1;
        Ok((loss, end == n))
    }

    fn finish_epoch(&mut self, n: usize, test: Option<&LabeledDataset<T>>, seconds: f64) -> Result<()> {
        let train_loss = self.loss_sum / n as f64;
        let train_err = self.err_count as f64 / n as f64;
        self.epoch += 1;
        self.order.clear();
        self.pos = 0;
        self.loss_sum = 0.0;
        self.err_count = 0;
        self.timings.push(seconds);
        let last = self.epoch == self.config.epochs;
        if !self.epoch.is_multiple_of(self.config.eval_every) && !last {
            return Ok(());
        }
        let (test_loss, test_err) = match test {
            Some(t) => evaluate(&mut self.model, t, self.config.batch_size.max(100))?,
            None => (f64::NAN, f64::NAN),
        };
        self.metrics.push(EpochRecord {
            epoch: self.epoch,
            train_loss,
            train_err,
            test_loss,
            test_err,
            seconds: if self.config.wall_clock { seconds } else { 0.0 },
        });
        let bad = !train_loss.is_finite() || (test.is_some() && !test_loss.is_finite());
        self.nonfinite_evals = if bad { self.nonfinite_evals + 1 } else { 0 };
        if self.nonfinite_evals >= 3 {
            return Err(Error::Diverged(format!(
                "non-finite loss at 3 consecutive evaluations (epoch {})",
                self.epoch
            )));
        }
        Ok(())
    }

    /// Finishes the current epoch (starting one if none is in progress).
    pub fn run_epoch(&mut self, train: &LabeledDataset<T>, test: Option<&LabeledDataset<T>>) -> Result<()> {
        let start = Instant::now();
        loop {
            let (_, done) = self.train_step(train)?;
            if done {
                break;
            }
        }
        self.finish_epoch(train.len(), test, start.elapsed().as_secs_f64())
    }

    /// Runs the remaining epochs and returns the metrics.
    pub fn fit(&mut self, train: &LabeledDataset<T>, test: Option<&LabeledDataset<T>>) -> Result<&Metrics> {
        while self.epoch < self.config.epochs {
            self.run_epoch(train, test)?;
        }
        Ok(&self.metrics)
    }

    /// Model, optimizer state, generator, loop position and the metrics so
    /// far.
    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::new(self.rng.state(), self.step);
        ck.put_model(&self.model)?;
        ck.put_optimizer(&self.optimizer);
        let meta = [
            ("trainer.epoch", self.epoch.to_string()),
            ("trainer.epoch_rng_state", self.epoch_rng_state.to_string()),
            ("trainer.pos", self.pos.to_string()),
            ("trainer.loss_sum", bits(self.loss_sum)),
            ("trainer.err_count", self.err_count.to_string()),
            ("trainer.nonfinite_evals", self.nonfinite_evals.to_string()),
            (
                "trainer.metrics",
                self.metrics
                    .records
                    .iter()
                    .map(|r| {
                        let vals = [r.train_loss, r.train_err, r.test_loss, r.test_err, r.seconds];
                        let mut f = vec![r.epoch.to_string()];
                        f.extend(vals.iter().map(|v| bits(*v)));
                        f.join(":")
                    })
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "trainer.timings",
                self.timings.iter().map(|t| bits(*t)).collect::<Vec<_>>().join(","),
            ),
            (
                "trainer.chosen_rates",
                self.chosen_rates
                    .iter()
                    .map(|(e, r)| format!("{e}:{}", bits(*r)))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        for (k, v) in meta {
            ck.meta.insert(k.into(), v);
        }
        Ok(ck)
    }

    /// Restores everything [`Self::to_checkpoint`] wrote. The trainer must
    /// have been built with the same architecture and config.
    pub fn restore(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        ck.load_model_params(&mut self.model)?;
        ck.load_optimizer(&mut self.optimizer)?;
        self.rng = SeededRng::from_state(ck.rng_state);
        self.step = ck.step;
        self.epoch = ck.meta_parse("trainer.epoch")?;
        self.epoch_rng_state = ck.meta_parse("trainer.epoch_rng_state")?;
        self.pos = ck.meta_parse("trainer.pos")?;
        self.loss_sum = unbits(ck.meta_str("trainer.loss_sum")?)?;
        self.err_count = ck.meta_parse("trainer.err_count")?;
        self.nonfinite_evals = ck.meta_parse("trainer.nonfinite_evals")?;
        self.chosen_rates = ck
            .meta_str("trainer.chosen_rates")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (e, r) = s
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad chosen-rate entry `{s}`")))?;
                Ok((
                    e.parse().map_err(|_| Error::Config(format!("bad epoch `{e}`")))?,
                    unbits(r)?,
                ))
            })
            .collect::<Result<_>>()?;
        self.metrics = Metrics::default();
        for entry in ck.meta_str("trainer.metrics")?.split(',').filter(|s| !s.is_empty()) {
            let f: Vec<&str> = entry.split(':').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!("bad metrics entry `{entry}`")));
            }
            self.metrics.push(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad epoch `{}`", f[0])))?,
                train_loss: unbits(f[1])?,
                train_err: unbits(f[2])?,
                test_loss: unbits(f[3])?,
                test_err: unbits(f[4])?,
                seconds: unbits(f[5])?,
            });
        }
        self.timings = ck
            .meta_str("trainer.timings")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(unbits)
            .collect::<Result<_>>()?;
        self.order.clear();
        Ok(())
    }
}

struct Trial<'a, T: Scalar> {
    model: &'a mut SequentialModel<T>,
    optimizer: &'a mut Optimizer<T>,
    data: &'a LabeledDataset<T>,
    batches: Vec<Vec<usize>>,
}

impl<T: Scalar> LrTrial for Trial<'_, T> {
    type Snapshot = (Vec<Tensor<T>>, OptimState<T>);

    fn snapshot(&self) -> Self::Snapshot {
        (self.model.param_values(), self.optimizer.state().clone())
    }

    fn restore(&mut self, s: &Self::Snapshot) {
        self.model
            .set_param_values(&s.0)
            .expect("snapshot taken from this model");
        self.optimizer.set_state(s.1.clone());
    }

    fn trial_step(&mut self, iteration: usize, lr: f64) -> Result<f64> {
        self.optimizer.set_learning_rate(lr)?;
        let (x, labels) = self.data.batch(&self.batches[iteration])?;
        let (loss, _) = classify_step(self.model, &x, &labels)?;
        if loss.is_finite() {
            let mut params = self.model.qualified_params_mut();
            self.optimizer.step(&mut params)?;
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;

    fn blobs(n: usize, seed: u64) -> LabeledDataset<f64> {
        // Three gaussian clusters in 2-D.
        let mut rng = SeededRng::new(seed);
        let centers = [(-2.0, 0.0), (2.0, 0.0), (0.0, 2.5)];
        let mut x = vec![0.0; 2 * n];
        let mut labels = vec![0; n];
        for i in 0..n {
            let c = i % 3;
            labels[i] = c;
            x[i] = centers[c].0 + 0.5 * rng.gaussian();
            x[n + i] = centers[c].1 + 0.5 * rng.gaussian();
        }
        LabeledDataset::new(Tensor::new(vec![2, n], x).unwrap(), labels, 3).unwrap()
    }

    fn mlp(seed: u64) -> SequentialModel<f64> {
        let specs = [
            LayerSpec::Linear { input: 2, output: 8 },
            LayerSpec::Relu,
            LayerSpec::Linear { input: 8, output: 3 },
        ];
        let mut m = SequentialModel::from_specs(&specs, &[2]).unwrap();
        m.init(&mut SeededRng::new(seed));
        m
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
            hyper: OptimHyper {
                momentum: 0.9,
                ..OptimHyper::with_lr(0.05)
            },
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let data = blobs(30, 1);
        let m = mlp(2);
        let before = m.param_values();
        let mut t = Trainer::new(m, config(0)).unwrap();
        assert!(t.fit(&data, Some(&data)).unwrap().is_empty());
        assert_eq!(t.model.param_values(), before);
    }

    #[test]
    fn training_separates_blobs() {
        let train = blobs(300, 1);
        let test = blobs(150, 2);
        let mut t = Trainer::new(mlp(3), config(10)).unwrap();
        let m = t.fit(&train, Some(&test)).unwrap();
        assert_eq!(m.records.len(), 10);
        let last = m.last().unwrap();
        assert!(last.test_err < 0.05, "{last:?}");
        assert!(m.records[0].train_loss > last.train_loss);
    }

    #[test]
    fn fixed_seed_gives_identical_metrics() {
        let train = blobs(100, 1);
        let run = || {
            let mut t = Trainer::new(mlp(3), config(3)).unwrap();
            t.fit(&train, Some(&train)).unwrap().to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn selective_search_records_choice_and_reselects_downwards() {
        let train = blobs(120, 4);
        let mut cfg = config(3);
        cfg.selective_sgd = Some(SelectiveSgdConfig {
            trial_iterations: 10,
            reselect_every: Some(2),
            candidate_rates: vec![10.0, 1.0, 0.1, 0.01],
            ..Default::default()
        });
        let mut t = Trainer::new(mlp(3), cfg).unwrap();
        t.fit(&train, None).unwrap();
        let rates = t.chosen_rates().to_vec();
        assert_eq!(rates.len(), 2);
        assert_eq!(rates[0].0, 0);
        assert_eq!(rates[1].0, 2);
        assert!(rates[1].1 <= rates[0].1);
        assert_eq!(t.optimizer.learning_rate(), rates[1].1);
    }

    #[test]
    fn exploding_rate_aborts_as_divergence() {
        let train = blobs(60, 4);
        let mut cfg = config(10);
        cfg.hyper = OptimHyper::with_lr(1e30);
        let mut t = Trainer::new(mlp(3), cfg).unwrap();
        match t.fit(&train, Some(&train)) {
            Err(Error::Diverged(_)) => {}
            other => panic!("{other:?}"),
        }
    }
}
