//! Cart-pole environment and a Q-network learner.
//!
//! The environment always runs in `f64`; the network is generic.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, Parameter};
use crate::network::{format_g9, SequentialModel};
use crate::optim::{OptimHyper, Optimizer, OptimizerKind};
use crate::rng::SeededRng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const FORCE: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const NUM_ACTIONS: usize = 2;
pub const EPISODE_LOG_HEADER: &str = "episode,steps,total_reward,epsilon,mean_loss";

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn is_terminal(&self) -> bool {
        !(self.x.abs() <= X_LIMIT && self.theta.abs() <= THETA_LIMIT)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }
}

/// Each component uniform in [−0.05, 0.05].
pub fn env_reset(rng: &mut SeededRng) -> CartPoleState {
    let mut u = || rng.uniform_range(-0.05, 0.05);
    CartPoleState {
        x: u(),
        x_dot: u(),
        theta: u(),
        theta_dot: u(),
    }
}

/// One Euler step of the equations of motion under a horizontal `force`.
pub fn integrate(s: &CartPoleState, force: f64) -> CartPoleState {
    let total_mass = CART_MASS + POLE_MASS;
    let pml = POLE_MASS * POLE_HALF_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
    let x_acc = temp - pml * theta_acc * cos / total_mass;
    CartPoleState {
        x: s.x + TAU * s.x_dot,
        x_dot: s.x_dot + TAU * x_acc,
        theta: s.theta + TAU * s.theta_dot,
        theta_dot: s.theta_dot + TAU * theta_acc,
    }
}

/// Action 0 pushes left, 1 pushes right. Reward is 1 unless the step ends
/// the episode.
pub fn env_step(s: &CartPoleState, act: usize) -> Result<(CartPoleState, f64, bool)> {
    if act >= NUM_ACTIONS {
        return Err(Error::Index(format!("action {act} outside {{0, 1}}")));
    }
    if s.is_terminal() {
        return Err(Error::State("step called on a terminal cart-pole state".into()));
    }
    let next = integrate(s, if act == 1 { FORCE } else { -FORCE });
    let terminal = next.is_terminal();
    Ok((next, if terminal { 0.0 } else { 1.0 }, terminal))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state_old: CartPoleState,
    pub act: usize,
    pub reward: f64,
    pub state_new: CartPoleState,
    pub terminal: bool,
}

/// `reward + γ·max_a q_new[a]`, or just `reward` for a terminal transition.
pub fn q_target<T: Scalar>(t: &Transition, q_values_new: &[T], gamma: f64) -> f64 {
    if t.terminal {
        return t.reward;
    }
    let best = q_values_new
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    t.reward + gamma * best
}

/// Lowest index among the maxima.
pub fn greedy<T: Scalar>(q: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

pub fn epsilon_greedy<T: Scalar>(q: &[T], epsilon: f64, rng: &mut SeededRng) -> usize {
    if epsilon > 0.0 && rng.uniform() < epsilon {
        rng.below(q.len())
    } else {
        greedy(q)
    }
}

fn states_tensor<T: Scalar>(states: impl ExactSizeIterator<Item = CartPoleState>) -> Tensor<T> {
    let b = states.len();
    let mut data = vec![T::zero(); 4 * b];
    for (j, s) in states.enumerate() {
        for (r, v) in s.to_array().into_iter().enumerate() {
            data[r * b + j] = T::from_f64_lossy(v);
        }
    }
    Tensor::new(vec![4, b], data).expect("4 x b")
}

fn column<T: Scalar>(t: &Tensor<T>, j: usize) -> Vec<T> {
    let b = t.shape()[1];
    (0..t.shape()[0]).map(|r| t.data()[r * b + j]).collect()
}

/// Q-values `[actions × B]` for a batch of states.
pub fn q_values<T: Scalar>(model: &mut SequentialModel<T>, states: &[CartPoleState]) -> Result<Tensor<T>> {
    model.forward(&states_tensor(states.iter().copied()), false)
}

/// Mean squared TD error over the batch, and its gradient w.r.t. the
/// network outputs: non-zero only at each transition's taken action.
/// Leaves the model's forward cache on the `state_old` batch.
pub fn masked_q_loss<T: Scalar>(
    model: &mut SequentialModel<T>,
    batch: &[Transition],
    gamma: f64,
) -> Result<(f64, Tensor<T>)> {
    if batch.is_empty() {
        return Err(Error::Config("q training batch is empty".into()));
    }
    let q_new = model.forward(&states_tensor(batch.iter().map(|t| t.state_new)), false)?;
    let targets: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(j, t)| q_target(t, &column(&q_new, j), gamma))
        .collect();
    let q = model.forward(&states_tensor(batch.iter().map(|t| t.state_old)), true)?;
    let b = batch.len();
    let mut dzdy = Tensor::zeros(q.shape());
    let mut loss = 0.0;
    for (j, t) in batch.iter().enumerate() {
        if t.act >= q.shape()[0] {
            return Err(Error::Index(format!("action {} outside network outputs", t.act)));
        }
        let diff = q.data()[t.act * b + j].as_f64() - targets[j];
        loss += diff * diff;
        dzdy.data_mut()[t.act * b + j] = lit(2.0 * diff / b as f64);
    }
    Ok((loss / b as f64, dzdy))
}

/// One optimizer step on the masked squared TD loss; returns the loss.
pub fn q_train_step<T: Scalar>(
    model: &mut SequentialModel<T>,
    batch: &[Transition],
    gamma: f64,
    optimizer: &mut Optimizer<T>,
) -> Result<f64> {
    let (loss, dzdy) = masked_q_loss(model, batch, gamma)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            name: "q-loss".into(),
            detail: format!("non-finite loss {loss}"),
        });
    }
    model.backward(&dzdy)?;
    let mut params: Vec<&mut Parameter<T>> = model.qualified_params_mut();
    optimizer.step(&mut params)?;
    Ok(loss)
}

/// Ring buffer of transitions, sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be ≥ 1".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Vec<Transition> {
        (0..n).map(|_| self.items[rng.below(self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Multiplicative decay applied after every episode.
    pub epsilon_decay: f64,
    pub hidden: Vec<usize>,
    pub replay: Option<ReplayConfig>,
    pub max_episodes: usize,
    pub max_steps: usize,
    /// Mean greedy episode length counted as solved.
    pub success_threshold: f64,
    pub eval_episodes: usize,
    /// Greedy evaluation period in episodes; 0 disables evaluation.
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
    pub hyper: OptimHyper,
}

impl Default for QNetConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.995,
            hidden: vec![64],
            replay: Some(ReplayConfig {
                capacity: 10_000,
                batch_size: 32,
            }),
            max_episodes: 2000,
            max_steps: 200,
            success_threshold: 195.0,
            eval_episodes: 100,
            eval_every: 10,
            optimizer: OptimizerKind::Adam,
            hyper: OptimHyper::with_lr(1e-3),
        }
    }
}

impl QNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {e}")));
            }
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon_decay must be in (0, 1], got {}",
                self.epsilon_decay
            )));
        }
        if let Some(r) = self.replay {
            if r.capacity == 0 || r.batch_size == 0 {
                return Err(Error::Config("replay capacity and batch size must be ≥ 1".into()));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be ≥ 1".into()));
        }
        self.hyper.validate()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        qnet_specs(&self.hidden)
    }
}

/// 4 inputs, relu hidden layers, one output per action.
pub fn qnet_specs(hidden: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = 4;
    for &h in hidden {
        specs.push(LayerSpec::Linear { input: prev, output: h });
        specs.push(LayerSpec::Relu);
        prev = h;
    }
    specs.push(LayerSpec::Linear {
        input: prev,
        output: NUM_ACTIONS,
    });
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: usize,
    pub total_reward: f64,
    pub epsilon: f64,
    /// NaN when no training step ran during the episode.
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<EpisodeRecord>,
}

impl EpisodeLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EPISODE_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.episode,
                r.steps,
                format_g9(r.total_reward),
                format_g9(r.epsilon),
                format_g9(r.mean_loss)
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct QRun<T: Scalar> {
    pub model: SequentialModel<T>,
    pub log: EpisodeLog,
    /// (episodes completed, mean greedy episode length).
    pub evaluations: Vec<(usize, f64)>,
    /// Episodes completed when the success threshold was first met.
    pub solved_at: Option<usize>,
    pub train_steps: usize,
    pub replay: Option<ReplayBuffer>,
}

/// Lengths of `episodes` greedy episodes capped at `max_steps`, run in
/// lockstep so the network sees one batch per timestep.
pub fn greedy_episode_lengths<T: Scalar>(
    model: &mut SequentialModel<T>,
    episodes: usize,
    max_steps: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let mut states: Vec<CartPoleState> = (0..episodes).map(|_| env_reset(rng)).collect();
    let mut lengths = vec![0usize; episodes];
    let mut alive: Vec<usize> = (0..episodes).collect();
    for _ in 0..max_steps {
        if alive.is_empty() {
            break;
        }
        let batch: Vec<CartPoleState> = alive.iter().map(|&k| states[k]).collect();
        let q = q_values(model, &batch)?;
        let mut still = Vec::with_capacity(alive.len());
        for (j, &k) in alive.iter().enumerate() {
            let (next, _, terminal) = env_step(&states[k], greedy(&column(&q, j)))?;
            states[k] = next;
            lengths[k] += 1;
            if !terminal {
                still.push(k);
            }
        }
        alive = still;
    }
    Ok(lengths)
}

/// Mean greedy episode length; 0 for no episodes.
pub fn greedy_evaluation<T: Scalar>(
    model: &mut SequentialModel<T>,
    episodes: usize,
    max_steps: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let lengths = greedy_episode_lengths(model, episodes, max_steps, rng)?;
    Ok(lengths.iter().sum::<usize>() as f64 / episodes.max(1) as f64)
}

/// Episode loop: ε-greedy acting, one training step per environment step
/// (from replay once it holds a batch, else on the latest transition), and
/// greedy evaluation every `eval_every` episodes. Stops early once an
/// evaluation meets the success threshold.
pub fn run_training<T: Scalar>(config: &QNetConfig, seed: u64) -> Result<QRun<T>> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut eval_rng = SeededRng::new(seed ^ 0xE7A1_0000_0000_0001);
    let mut model = SequentialModel::<T>::from_specs(&config.specs(), &[4])?;
    model.init(&mut rng.fork(1));
    let mut optimizer = Optimizer::<T>::new(config.optimizer, config.hyper)?;
    let mut replay = config.replay.map(|r| ReplayBuffer::new(r.capacity)).transpose()?;
    let mut log = EpisodeLog::default();
    let mut evaluations = Vec::new();
    let mut solved_at = None;
    let mut train_steps = 0;
    let mut epsilon = config.epsilon_start;
    for episode in 1..=config.max_episodes {
        let mut state = env_reset(&mut rng);
        let (mut steps, mut total_reward, mut loss_sum, mut loss_n) = (0, 0.0, 0.0, 0);
        while steps < config.max_steps {
            let q = q_values(&mut model, &[state])?;
            let act = epsilon_greedy(q.data(), epsilon, &mut rng);
            let (next, reward, terminal) = env_step(&state, act)?;
            let t = Transition {
                state_old: state,
                act,
                reward,
                state_new: next,
                terminal,
            };
            let batch = match (&mut replay, config.replay) {
                (Some(buf), Some(rc)) => {
                    buf.push(t);
                    (buf.len() >= rc.batch_size).then(|| buf.sample(rc.batch_size, &mut rng))
                }
                _ => Some(vec![t]),
            };
            if let Some(batch) = batch {
                let loss = q_train_step(&mut model, &batch, config.gamma, &mut optimizer).map_err(|e| match e {
                    Error::Numeric { name, detail } => Error::Numeric {
                        name,
                        detail: format!("episode {episode}: {detail}"),
                    },
                    other => other,
                })?;
                loss_sum += loss;
                loss_n += 1;
                train_steps += 1;
            }
            steps += 1;
            total_reward += reward;
            state = next;
            if terminal {
                break;
            }
        }
        log.records.push(EpisodeRecord {
            episode,
            steps,
            total_reward,
            epsilon,
            mean_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
        });
        epsilon = (epsilon * config.epsilon_decay).max(config.epsilon_end);
        if config.eval_every > 0 && episode % config.eval_every == 0 {
            let mean = greedy_evaluation(&mut model, config.eval_episodes, config.max_steps, &mut eval_rng)?;
            evaluations.push((episode, mean));
            if mean >= config.success_threshold {
                solved_at = Some(episode);
                break;
            }
        }
    }
    Ok(QRun {
        model,
        log,
        evaluations,
        solved_at,
        train_steps,
        replay,
    })
}
