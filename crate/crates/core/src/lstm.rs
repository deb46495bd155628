//! Single-layer LSTM with a softmax output head, back-propagation through
//! time, and the character language model built on it.
//!
//! Gates per step (all on column batches `[· × B]`):
//!
//! ```text
//! i = σ(W_ix x + W_ih h + b_i)    o = σ(W_ox x + W_oh h + b_o)
//! f = σ(W_fx x + W_fh h + b_f)    g = tanh(W_gx x + W_gh h + b_g)
//! c' = f ⊙ c + i ⊙ g              h' = o ⊙ tanh(c')
//! z_t = mean_b −log softmax(W_y h' + b_y)[target]
//! ```

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::layers::{argmax_columns, sigmoid, softmax_columns, Parameter};
use crate::network::{relative_error, Checkpoint, EpochRecord, GradCheckReport, LayerCheck, Metrics};
use crate::optim::{OptimHyper, Optimizer, OptimizerKind};
use crate::rng::SeededRng;
use crate::scalar::{lit, Scalar};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

pub const PARAM_NAMES: [&str; 14] = [
    "W_ih", "W_ix", "W_oh", "W_ox", "W_fh", "W_fx", "W_gh", "W_gx", "b_i", "b_o", "b_f", "b_g", "W_y", "b_y",
];

// Gate order i, o, f, g throughout.
const WH: [usize; 4] = [0, 2, 4, 6];
const WX: [usize; 4] = [1, 3, 5, 7];
const B: [usize; 4] = [8, 9, 10, 11];
const WY: usize = 12;
const BY: usize = 13;

/// Step inputs: dense columns `[input × B]`, or token indices standing for
/// one-hot columns (same maths, without the multiply by zeros).
#[derive(Debug, Clone)]
pub enum StepInput<T: Scalar> {
    Dense(Tensor<T>),
    Tokens(Vec<usize>),
}

impl<T: Scalar> StepInput<T> {
    fn batch(&self) -> usize {
        match self {
            StepInput::Dense(t) => t.shape().get(1).copied().unwrap_or(0),
            StepInput::Tokens(v) => v.len(),
        }
    }
}

/// Activations of one timestep, kept for the backward sweep.
#[derive(Debug, Clone)]
pub struct StepCache<T: Scalar> {
    pub x: StepInput<T>,
    pub i: Tensor<T>,
    pub o: Tensor<T>,
    pub f: Tensor<T>,
    pub g: Tensor<T>,
    pub c: Tensor<T>,
    pub h: Tensor<T>,
    pub tanh_c: Tensor<T>,
    pub probs: Tensor<T>,
    pub targets: Vec<usize>,
    pub loss: T,
}

#[derive(Debug, Clone)]
pub struct LstmCache<T: Scalar> {
    pub h0: Tensor<T>,
    pub c0: Tensor<T>,
    pub steps: Vec<StepCache<T>>,
}

impl<T: Scalar> LstmCache<T> {
    /// Σ_t z_t, summed in time order.
    pub fn total_loss(&self) -> T {
        self.steps.iter().fold(T::zero(), |a, s| a + s.loss)
    }

    /// Correct top-1 next-step predictions and the number of predictions.
    pub fn correct(&self) -> (usize, usize) {
        let mut hit = 0;
        let mut total = 0;
        for s in &self.steps {
            let pred = argmax_columns(&s.probs);
            hit += pred.iter().zip(&s.targets).filter(|(a, b)| a == b).count();
            total += s.targets.len();
        }
        (hit, total)
    }
}

#[derive(Debug, Clone)]
pub struct Lstm<T: Scalar> {
    pub params: Vec<Parameter<T>>,
    input: usize,
    hidden: usize,
    vocab: usize,
}

impl<T: Scalar> Lstm<T> {
    pub fn zeros(input: usize, hidden: usize, vocab: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || vocab == 0 {
            return Err(Error::dim(format!(
                "lstm extents must be ≥ 1 (input {input}, hidden {hidden}, vocab {vocab})"
            )));
        }
        let params = PARAM_NAMES
            .iter()
            .map(|&name| {
                let shape = match name {
                    "W_y" => vec![vocab, hidden],
                    "b_y" => vec![vocab],
                    n if n.starts_with("b_") => vec![hidden],
                    n if n.ends_with('h') => vec![hidden, hidden],
                    _ => vec![hidden, input],
                };
                Parameter::new(name, Tensor::zeros(&shape))
            })
            .collect();
        Ok(Self {
            params,
            input,
            hidden,
            vocab,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Gaussian weights with std `1/√fan_in`, zero biases except the forget
    /// gate, which starts at 1 so early memory is kept.
    pub fn init(&mut self, rng: &mut SeededRng) {
        for p in &mut self.params {
            let shape = p.value.shape().to_vec();
            p.value = if p.name.starts_with("W_") {
                Tensor::gaussian(&shape, 1.0 / (shape[1] as f64).sqrt(), rng)
            } else if p.name == "b_f" {
                Tensor::filled(&shape, T::one())
            } else {
                Tensor::zeros(&shape)
            };
        }
    }

    fn x_term(&self, w: usize, x: &StepInput<T>) -> Result<Tensor<T>> {
        let wt = &self.params[w].value;
        match x {
            StepInput::Dense(t) => {
                if t.shape().first() != Some(&self.input) {
                    return Err(Error::dim(format!(
                        "lstm input expects [{} x batch], got {:?}",
                        self.input,
                        t.shape()
                    )));
                }
                matmul(wt, t)
            }
            StepInput::Tokens(tok) => {
                if let Some(&bad) = tok.iter().find(|&&k| k >= self.input) {
                    return Err(Error::Index(format!("input token {bad} outside [0, {})", self.input)));
                }
                let b = tok.len();
                let mut out = vec![T::zero(); self.hidden * b];
                for r in 0..self.hidden {
                    let row = &wt.data()[r * self.input..(r + 1) * self.input];
                    for (j, &k) in tok.iter().enumerate() {
                        out[r * b + j] = row[k];
                    }
                }
                Tensor::new(vec![self.hidden, b], out)
            }
        }
    }

    /// One cell update; returns (i, o, f, g, c, tanh c, h).
    #[allow(clippy::type_complexity)]
    fn cell(
        &self,
        x: &StepInput<T>,
        h: &Tensor<T>,
        c: &Tensor<T>,
    ) -> Result<(
        Tensor<T>,
        Tensor<T>,
        Tensor<T>,
        Tensor<T>,
        Tensor<T>,
        Tensor<T>,
        Tensor<T>,
    )> {
        let b = x.batch();
        let mut gates = Vec::with_capacity(4);
        for k in 0..4 {
            let bias = self.params[B[k]].value.reshaped(&[self.hidden, 1])?;
            let a = self
                .x_term(WX[k], x)?
                .add(&matmul(&self.params[WH[k]].value, h)?)?
                .add_broadcast(&bias)?;
            gates.push(if k == 3 { a.map(|v| v.tanh()) } else { a.map(sigmoid) });
        }
        let g = gates.pop().expect("4 gates");
        let f = gates.pop().expect("4 gates");
        let o = gates.pop().expect("4 gates");
        let i = gates.pop().expect("4 gates");
        let c_new = f.mul(c)?.add(&i.mul(&g)?)?;
        let tanh_c = c_new.map(|v| v.tanh());
        let h_new = o.mul(&tanh_c)?;
        debug_assert_eq!(h_new.shape(), &[self.hidden, b]);
        Ok((i, o, f, g, c_new, tanh_c, h_new))
    }

    fn logits(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let by = self.params[BY].value.reshaped(&[self.vocab, 1])?;
        matmul(&self.params[WY].value, h)?.add_broadcast(&by)
    }

    /// Runs the sequence from `(h0, c0)` and scores each step against its
    /// targets. `targets[t][b]` is the class expected after input `t`.
    pub fn forward(
        &self,
        xs: &[StepInput<T>],
        targets: &[Vec<usize>],
        h0: &Tensor<T>,
        c0: &Tensor<T>,
    ) -> Result<(T, LstmCache<T>)> {
        if xs.is_empty() {
            return Err(Error::dim("lstm sequence must be non-empty"));
        }
        if targets.len() != xs.len() {
            return Err(Error::dim(format!(
                "{} inputs but {} target steps",
                xs.len(),
                targets.len()
            )));
        }
        let b = xs[0].batch();
        if h0.shape() != [self.hidden, b] || c0.shape() != [self.hidden, b] {
            return Err(Error::dim(format!(
                "initial state must be [{} x {b}], got {:?} / {:?}",
                self.hidden,
                h0.shape(),
                c0.shape()
            )));
        }
        let inv_b: T = lit(1.0 / b as f64);
        let mut steps = Vec::with_capacity(xs.len());
        let (mut h, mut c) = (h0.clone(), c0.clone());
        for (x, tgt) in xs.iter().zip(targets) {
            if x.batch() != b || tgt.len() != b {
                return Err(Error::dim("batch size changes within the sequence"));
            }
            if let Some(&bad) = tgt.iter().find(|&&t| t >= self.vocab) {
                return Err(Error::Index(format!(
                    "target {bad} outside vocabulary of {}",
                    self.vocab
                )));
            }
            let (i, o, f, g, c_new, tanh_c, h_new) = self.cell(x, &h, &c)?;
            let logits = self.logits(&h_new)?;
            let loss = nll_sum(&logits, tgt) * inv_b;
            steps.push(StepCache {
                x: x.clone(),
                i,
                o,
                f,
                g,
                c: c_new.clone(),
                h: h_new.clone(),
                tanh_c,
                probs: softmax_columns(&logits),
                targets: tgt.clone(),
                loss,
            });
            h = h_new;
            c = c_new;
        }
        let cache = LstmCache {
            h0: h0.clone(),
            c0: c0.clone(),
            steps,
        };
        Ok((cache.total_loss(), cache))
    }

    /// Reverse-time sweep. Parameter gradients (accumulated over all steps)
    /// are written to `params[*].grad`; returns `(dz/dh0, dz/dc0)`.
    pub fn backward(&mut self, cache: &LstmCache<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let Some(first) = cache.steps.first() else {
            return Err(Error::State("lstm backward needs a forward cache".into()));
        };
        let b = first.targets.len();
        let hs = self.hidden;
        let inv_b: T = lit(1.0 / b as f64);
        let mut grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut dh_next = Tensor::zeros(&[hs, b]);
        let mut dc_next = Tensor::zeros(&[hs, b]);
        for t in (0..cache.steps.len()).rev() {
            let s = &cache.steps[t];
            let (h_prev, c_prev) = if t == 0 {
                (&cache.h0, &cache.c0)
            } else {
                (&cache.steps[t - 1].h, &cache.steps[t - 1].c)
            };
            // softmax head
            let mut dlog = s.probs.clone();
            for (j, &k) in s.targets.iter().enumerate() {
                dlog.data_mut()[k * b + j] -= T::one();
            }
            let dlog = dlog.scale(inv_b);
            grads[WY].axpy(T::one(), &matmul_nt(&dlog, &s.h)?)?;
            add_row_sums(&mut grads[BY], &dlog);
            let dh = matmul_tn(&self.params[WY].value, &dlog)?.add(&dh_next)?;
            // h = o ⊙ tanh(c): the cell gradient gathers this step's term and
            // the carry from the next step through f.
            let d_o = dh.mul(&s.tanh_c)?;
            let dc = dh
                .zip_map(&s.o, |a, o| a * o)?
                .zip_map(&s.tanh_c, |a, tc| a * (T::one() - tc * tc))?
                .add(&dc_next)?;
            let di = dc.mul(&s.g)?;
            let dg = dc.mul(&s.i)?;
            let df = dc.mul(c_prev)?;
            let sig = |d: &Tensor<T>, y: &Tensor<T>| d.zip_map(y, |d, y| d * y * (T::one() - y));
            let da = [
                sig(&di, &s.i)?,
                sig(&d_o, &s.o)?,
                sig(&df, &s.f)?,
                dg.zip_map(&s.g, |d, g| d * (T::one() - g * g))?,
            ];
            let mut dh_prev = Tensor::zeros(&[hs, b]);
            for k in 0..4 {
                grads[WH[k]].axpy(T::one(), &matmul_nt(&da[k], h_prev)?)?;
                add_row_sums(&mut grads[B[k]], &da[k]);
                match &s.x {
                    StepInput::Dense(x) => grads[WX[k]].axpy(T::one(), &matmul_nt(&da[k], x)?)?,
                    StepInput::Tokens(tok) => {
                        let gw = grads[WX[k]].data_mut();
                        for r in 0..hs {
                            for (j, &tk) in tok.iter().enumerate() {
                                gw[r * self.input + tk] += da[k].data()[r * b + j];
                            }
                        }
                    }
                }
                dh_prev.axpy(T::one(), &matmul_tn(&self.params[WH[k]].value, &da[k])?)?;
            }
            dh_next = dh_prev;
            dc_next = dc.mul(&s.f)?;
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = g;
        }
        Ok((dh_next, dc_next))
    }

    /// One step of free-running generation from a single token.
    pub fn step_token(&self, token: usize, h: &Tensor<T>, c: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (_, _, _, _, c_new, _, h_new) = self.cell(&StepInput::Tokens(vec![token]), h, c)?;
        let logits = self.logits(&h_new)?;
        Ok((h_new, c_new, logits))
    }

    pub fn zero_state(&self, batch: usize) -> (Tensor<T>, Tensor<T>) {
        (
            Tensor::zeros(&[self.hidden, batch]),
            Tensor::zeros(&[self.hidden, batch]),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Lstm<U> {
        Lstm {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
            input: self.input,
            hidden: self.hidden,
            vocab: self.vocab,
        }
    }
}

fn nll_sum<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> T {
    let (k, b) = (logits.shape()[0], logits.shape()[1]);
    let d = logits.data();
    let mut total = T::zero();
    for (j, &t) in targets.iter().enumerate() {
        let max = (0..k).map(|i| d[i * b + j]).fold(T::neg_infinity(), T::max);
        let lse = (0..k)
            .map(|i| (d[i * b + j] - max).exp())
            .fold(T::zero(), |a, v| a + v)
            .ln();
        total += lse - (d[t * b + j] - max);
    }
    total
}

fn add_row_sums<T: Scalar>(target: &mut Tensor<T>, m: &Tensor<T>) {
    let b = m.shape()[1];
    for (t, row) in target.data_mut().iter_mut().zip(m.data().chunks(b.max(1))) {
        *t += row.iter().fold(T::zero(), |a, &v| a + v);
    }
}

/// Checks every parameter gradient of `z = Σ_t z_t` against central
/// differences, up to `coords` sampled coordinates per parameter. `flip`
/// names a parameter whose analytic gradient is negated (fault injection).
#[allow(clippy::too_many_arguments)]
pub fn lstm_grad_check(
    lstm: &mut Lstm<f64>,
    xs: &[StepInput<f64>],
    targets: &[Vec<usize>],
    coords: usize,
    h: f64,
    tolerance: f64,
    rng: &mut SeededRng,
    flip: Option<&str>,
) -> Result<GradCheckReport> {
    let b = xs.first().map(|x| x.batch()).unwrap_or(0);
    let (h0, c0) = lstm.zero_state(b);
    let (_, cache) = lstm.forward(xs, targets, &h0, &c0)?;
    lstm.backward(&cache)?;
    if let Some(name) = flip {
        let p = lstm
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("no lstm parameter `{name}`")))?;
        p.grad = p.grad.scale(-1.0);
    }
    let mut checks = Vec::new();
    for pi in 0..lstm.params.len() {
        let n = lstm.params[pi].value.len();
        let picks: Vec<usize> = rng.permutation(n).into_iter().take(coords).collect();
        let mut worst: f64 = 0.0;
        for &e in &picks {
            let analytic = lstm.params[pi].grad.data()[e];
            let orig = lstm.params[pi].value.data()[e];
            lstm.params[pi].value.data_mut()[e] = orig + h;
            let zp = lstm.forward(xs, targets, &h0, &c0)?.0;
            lstm.params[pi].value.data_mut()[e] = orig - h;
            let zm = lstm.forward(xs, targets, &h0, &c0)?.0;
            lstm.params[pi].value.data_mut()[e] = orig;
            worst = worst.max(relative_error(analytic, (zp - zm) / (2.0 * h)));
        }
        checks.push(LayerCheck {
            name: format!("lstm.{}", lstm.params[pi].name),
            coords: picks.len(),
            skipped: 0,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { checks, tolerance })
}

/// Sorted set of the distinct characters of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Result<Self> {
        let set: BTreeSet<char> = text.chars().collect();
        if set.is_empty() {
            return Err(Error::Data("empty text has no vocabulary".into()));
        }
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i)).collect()
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }
}

/// Input indices and next-character targets of one window.
pub type Window = (Vec<usize>, Vec<usize>);

/// Input/target windows over a corpus.
#[derive(Debug, Clone)]
pub struct CharDataset {
    pub vocab: Vocab,
    pub windows: Vec<Window>,
}

impl CharDataset {
    /// Splits off the last `fraction` of the windows (at least one when
    /// there are two or more) as a held-out set.
    pub fn split(&self, fraction: f64) -> (Vec<Window>, Vec<Window>) {
        let n = self.windows.len();
        let k = if n >= 2 {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        (self.windows[..n - k].to_vec(), self.windows[n - k..].to_vec())
    }
}

/// Consecutive windows of `seq_len` characters, each paired with the next
/// character at every position; windows do not overlap.
pub fn char_dataset(text: &str, seq_len: usize) -> Result<CharDataset> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be ≥ 1".into()));
    }
    let vocab = Vocab::from_text(text)?;
    let ids = vocab.encode(text)?;
    let windows = (0..ids.len().saturating_sub(1) / seq_len)
        .map(|k| {
            let s = k * seq_len;
            (ids[s..s + seq_len].to_vec(), ids[s + 1..s + seq_len + 1].to_vec())
        })
        .collect();
    Ok(CharDataset { vocab, windows })
}

/// Draws from `softmax(logits / temperature)`; temperature 0 is argmax
/// (ties to the lowest index).
pub fn sample_index<T: Scalar>(logits: &[T], temperature: f64, rng: &mut SeededRng) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    };
    if temperature <= 0.0 {
        return argmax();
    }
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|v| ((v.as_f64() - max) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return argmax();
    }
    let mut u = rng.uniform() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    argmax()
}

/// Generates `length` characters after `seed` (which primes the state and is
/// not repeated in the output).
pub fn sample<T: Scalar>(
    lstm: &Lstm<T>,
    vocab: &Vocab,
    seed: &str,
    length: usize,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<String> {
    let prime = vocab.encode(seed)?;
    let Some((&last, head)) = prime.split_last() else {
        return Err(Error::Config("sampling needs at least one seed character".into()));
    };
    let (mut h, mut c) = lstm.zero_state(1);
    for &t in head {
        let (h2, c2, _) = lstm.step_token(t, &h, &c)?;
        h = h2;
        c = c2;
    }
    let mut cur = last;
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        let (h2, c2, logits) = lstm.step_token(cur, &h, &c)?;
        h = h2;
        c = c2;
        cur = sample_index(logits.data(), temperature, rng);
        out.push(cur);
    }
    Ok(vocab.decode(&out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharModelConfig {
    pub hidden: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub hyper: OptimHyper,
    /// Elementwise gradient clip; `None` disables it.
    pub clip: Option<f64>,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for CharModelConfig {
    fn default() -> Self {
        Self {
            hidden: 30,
            seq_len: 50,
            batch_size: 16,
            epochs: 10,
            optimizer: OptimizerKind::Rmsprop,
            hyper: OptimHyper::with_lr(0.02),
            clip: Some(5.0),
            holdout: 0.1,
            seed: 0,
        }
    }
}

type Windows = [Window];

fn window_batch<T: Scalar>(windows: &Windows, idx: &[usize]) -> (Vec<StepInput<T>>, Vec<Vec<usize>>) {
    let t_len = windows[idx[0]].0.len();
    let xs = (0..t_len)
        .map(|t| StepInput::Tokens(idx.iter().map(|&w| windows[w].0[t]).collect()))
        .collect();
    let ys = (0..t_len)
        .map(|t| idx.iter().map(|&w| windows[w].1[t]).collect())
        .collect();
    (xs, ys)
}

/// Per-character loss and error rate over windows, state reset per window.
pub fn evaluate_windows<T: Scalar>(lstm: &Lstm<T>, windows: &Windows, batch_size: usize) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let idx: Vec<usize> = (0..windows.len()).collect();
    let (mut loss, mut hit, mut total) = (0.0, 0, 0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (xs, ys) = window_batch::<T>(windows, chunk);
        let (h0, c0) = lstm.zero_state(chunk.len());
        let (z, cache) = lstm.forward(&xs, &ys, &h0, &c0)?;
        loss += z.as_f64() * chunk.len() as f64;
        let (h, n) = cache.correct();
        hit += h;
        total += n;
    }
    Ok((loss / total as f64, 1.0 - hit as f64 / total as f64))
}

/// Accuracy of always predicting the most frequent training target.
pub fn majority_baseline(train: &Windows, test: &Windows, vocab: usize) -> f64 {
    let mut counts = vec![0usize; vocab];
    for (_, y) in train {
        for &t in y {
            counts[t] += 1;
        }
    }
    let mut top = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[top] {
            top = i;
        }
    }
    let (hit, total) = test.iter().fold((0, 0), |(h, n), (_, y)| {
        (h + y.iter().filter(|&&t| t == top).count(), n + y.len())
    });
    hit as f64 / total.max(1) as f64
}

#[derive(Debug, Clone)]
pub struct CharRun<T: Scalar> {
    pub lstm: Lstm<T>,
    pub vocab: Vocab,
    pub metrics: Metrics,
    pub baseline_accuracy: f64,
    pub train_windows: usize,
    pub test_windows: usize,
    /// Wall-clock seconds per epoch (kept out of the metrics).
    pub timings: Vec<f64>,
}

/// Trains the character model on `text`; one metrics row per epoch with
/// per-character losses and error rates (held-out split as "test").
pub fn train_char_model<T: Scalar>(text: &str, cfg: &CharModelConfig) -> Result<CharRun<T>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let data = char_dataset(text, cfg.seq_len)?;
    let (train, test) = data.split(cfg.holdout);
    if train.is_empty() {
        return Err(Error::Data(format!(
            "text too short for a single window of {} characters",
            cfg.seq_len
        )));
    }
    let v = data.vocab.len();
    let mut rng = SeededRng::new(cfg.seed);
    let mut lstm = Lstm::<T>::zeros(v, cfg.hidden, v)?;
    lstm.init(&mut rng.fork(1));
    let mut opt = Optimizer::<T>::new(cfg.optimizer, cfg.hyper)?;
    let clip: Option<T> = cfg.clip.map(lit);
    let mut metrics = Metrics::default();
    let mut timings = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = std::time::Instant::now();
        let order = rng.permutation(train.len());
        let (mut loss, mut hit, mut total) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (xs, ys) = window_batch::<T>(&train, chunk);
            let (h0, c0) = lstm.zero_state(chunk.len());
            let (z, cache) = lstm.forward(&xs, &ys, &h0, &c0)?;
            if !z.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            loss += z.as_f64() * chunk.len() as f64;
            let (h, n) = cache.correct();
            hit += h;
            total += n;
            lstm.backward(&cache)?;
            if let Some(c) = clip {
                for p in &mut lstm.params {
                    p.grad = p.grad.map(|g| g.max(-c).min(c));
                }
            }
            let mut params: Vec<&mut Parameter<T>> = lstm.params.iter_mut().collect();
            opt.step(&mut params)?;
        }
        let (test_loss, test_err) = evaluate_windows(&lstm, &test, 256)?;
        metrics.push(EpochRecord {
            epoch,
            train_loss: loss / total as f64,
            train_err: 1.0 - hit as f64 / total as f64,
            test_loss,
            test_err,
            seconds: 0.0,
        });
        timings.push(start.elapsed().as_secs_f64());
    }
    Ok(CharRun {
        baseline_accuracy: majority_baseline(&train, &test, v),
        lstm,
        vocab: data.vocab,
        metrics,
        train_windows: train.len(),
        test_windows: test.len(),
        timings,
    })
}

/// Parameters plus the vocabulary, so `sample` can rebuild the model.
pub fn lstm_checkpoint<T: Scalar>(lstm: &Lstm<T>, vocab: &Vocab, seed: u64) -> Checkpoint<T> {
    let mut ck = Checkpoint::new(seed, 0);
    ck.meta.insert("model".into(), "lstm".into());
    ck.meta.insert("lstm.hidden".into(), lstm.hidden.to_string());
    ck.meta.insert("lstm.vocab".into(), vocab.as_string());
    for p in &lstm.params {
        ck.put(format!("lstm/{}", p.name), p.value.clone());
    }
    ck
}

pub fn lstm_from_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<(Lstm<T>, Vocab)> {
    let vocab = Vocab::from_chars(ck.meta_str("lstm.vocab")?.chars().collect());
    let hidden: usize = ck.meta_parse("lstm.hidden")?;
    let mut lstm = Lstm::zeros(vocab.len(), hidden, vocab.len())?;
    for p in &mut lstm.params {
        p.value = ck.tensor_shaped(&format!("lstm/{}", p.name), p.value.shape())?.clone();
    }
    Ok((lstm, vocab))
}
