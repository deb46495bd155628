//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `PLAINNET_DATA`: dataset root (default `<workspace>/data`), holding
//!   `mnist/`, `cifar-10-batches-bin/` and `shakespeare/shakespeare.txt`.
//! - `PLAINNET_QUICK=1`: skip the full-scale MNIST and text-corpus runs
//!   (their criteria then report FAIL as not run).
//! - `PLAINNET_STRICT=1`: exit with status 1 if any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{build, data_root, fft_conv_error, layer_grad_errors, off_kink, resume_trace, tie_free};
use plainnet::datasets::{load_cifar10, load_mnist, LabeledDataset};
use plainnet::experiments::{
    cnn_cifar10_specs, default_selective_sgd, mlp_mnist_specs, run_gradcheck, Experiment, GradArch, CIFAR_INPUT,
    MNIST_INPUT,
};
use plainnet::fft::{conv2_fft, direct_conv2, ConvGeometry};
use plainnet::layers::LayerSpec;
use plainnet::lstm::{train_char_model, CharModelConfig};
use plainnet::network::{SequentialModel, TrainConfig, Trainer};
use plainnet::optim::{selective_sgd_search, LrTrial, OptimHyper, OptimizerKind, SelectiveSgdConfig};
use plainnet::patches::Padding;
use plainnet::rl::{run_training, QNetConfig};
use plainnet::{Result, SeededRng, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| !v.is_empty() && v != "0")
}

// ---------------------------------------------------------------- 1

fn layer_cases() -> Vec<(LayerSpec, Vec<usize>)> {
    let conv = |k: (usize, usize), cin, cout, pad, stride| LayerSpec::Conv {
        kernel: k,
        in_maps: cin,
        out_maps: cout,
        pad,
        stride,
    };
    vec![
        (LayerSpec::Linear { input: 7, output: 5 }, vec![7]),
        (conv((3, 3), 2, 3, Padding::uniform(1), (1, 1)), vec![6, 6, 2]),
        (conv((5, 4), 2, 2, Padding::new(2, 1, 0, 2), (2, 3)), vec![7, 8, 2]),
        (conv((5, 5), 3, 4, Padding::uniform(2), (1, 1)), vec![8, 8, 3]),
        (
            LayerSpec::MaxPool {
                window: (3, 3),
                stride: (2, 2),
                pad: Padding::new(0, 1, 0, 1),
            },
            vec![7, 7, 2],
        ),
        (
            LayerSpec::MaxPool {
                window: (2, 2),
                stride: (2, 2),
                pad: Padding::NONE,
            },
            vec![6, 6, 3],
        ),
        (LayerSpec::Relu, vec![5, 4]),
        (LayerSpec::Sigmoid, vec![5, 4]),
        (LayerSpec::Tanh, vec![5, 4]),
        (LayerSpec::Flatten, vec![3, 3, 2]),
    ]
}

fn criterion_gradients() -> Result<Verdict> {
    let start = Instant::now();
    let tol = 1e-4;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for (spec, sample) in layer_cases() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let mut layer = build(&spec, &mut rng);
            let mut shape = sample.clone();
            shape.push(3);
            let x = match spec {
                LayerSpec::MaxPool { .. } => tie_free(&shape, &mut rng),
                _ => off_kink(&shape, &mut rng),
            };
            let (ex, ep) = layer_grad_errors(layer.as_mut(), &x, 30, &mut rng);
            worst = worst.max(ex).max(ep);
            if ex > tol || ep > tol {
                failures.push(format!("{} seed {seed}", spec.kind()));
            }
        }
    }
    for arch in [GradArch::Mlp, GradArch::Cnn, GradArch::Lstm, GradArch::Qnet] {
        for seed in 0..5 {
            let report = run_gradcheck(arch, seed, None)?;
            worst = worst.max(report.max_error());
            if !report.passed() {
                failures.push(format!("{} seed {seed}", arch.as_str()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        failures.is_empty() && secs < 120.0,
        format!(
            "10 layer configurations and 4 reduced architectures x 5 seeds, max relative error {worst:.2e} \
             (limit {tol:.0e}), {secs:.1} s (limit 120 s){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_fft() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = SeededRng::new(0xFF7);
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for _ in 0..200 {
        let (h, w) = (1 + rng.below(32), 1 + rng.below(32));
        let p: Vec<usize> = (0..4).map(|_| rng.below(4)).collect();
        let kh = 1 + rng.below((h + p[0] + p[1]).min(16));
        let kw = 1 + rng.below((w + p[2] + p[3]).min(16));
        let geom = ConvGeometry {
            input: (h, w),
            kernel: (kh, kw),
            pad: Padding::new(p[0], p[1], p[2], p[3]),
            stride: (1 + rng.below(3), 1 + rng.below(3)),
        };
        let x = Tensor::<f32>::gaussian(&[h, w], 1.0, &mut rng);
        let k = Tensor::<f32>::gaussian(&[kh, kw], 1.0, &mut rng);
        let a = conv2_fft(&x, &k, &geom)?;
        let b = direct_conv2(&x, &k, &geom)?;
        let e = if a.shape() == b.shape() {
            fft_conv_error(&a, &b, &x, &k)
        } else {
            f64::INFINITY
        };
        worst = worst.max(e);
        if e >= 1e-5 {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        bad == 0 && secs < 60.0,
        format!("200 random cases in f32, {bad} over 1e-5, worst {worst:.2e}, {secs:.2} s (limit 60 s)"),
    ))
}

// ---------------------------------------------------------------- 3, 4

fn flatten(d: LabeledDataset<f32>) -> Result<LabeledDataset<f32>> {
    let n = d.len();
    let features: usize = d.sample_shape().iter().product();
    let norm = d.normalization.clone();
    let mut out = LabeledDataset::new(d.inputs.reshape(&[features, n])?, d.labels, d.classes)?;
    out.normalization = norm;
    Ok(out)
}

struct ClassifierRun {
    test_err: f64,
    test_loss: f64,
    csv: String,
    secs: f64,
}

fn train_classifier(
    specs: &[LayerSpec],
    input: &[usize],
    train: &LabeledDataset<f32>,
    test: &LabeledDataset<f32>,
    mut config: TrainConfig,
    subset: Option<usize>,
    epochs: usize,
) -> Result<ClassifierRun> {
    let start = Instant::now();
    let seed = config.seed;
    let sub;
    let train = match subset {
        Some(n) if n < train.len() => {
            sub = train.subset(n, &mut SeededRng::new(seed).fork(0x5AB5))?;
            &sub
        }
        _ => train,
    };
    config.epochs = epochs;
    let mut model = SequentialModel::<f32>::from_specs(specs, input)?;
    model.init(&mut SeededRng::new(seed).fork(0x1417));
    let mut t = Trainer::new(model, config)?;
    t.fit(train, Some(test))?;
    let last = t.metrics().last().cloned().expect("at least one epoch");
    Ok(ClassifierRun {
        test_err: last.test_err,
        test_loss: last.test_loss,
        csv: t.metrics().to_csv(),
        secs: start.elapsed().as_secs_f64(),
    })
}

fn mnist_config() -> TrainConfig {
    TrainConfig {
        selective_sgd: Some(default_selective_sgd()),
        ..Experiment::MlpMnist.default_train_config()
    }
}

fn criterion_mnist(root: &Path, quick: bool, desk_csv: &mut Option<String>) -> Result<Verdict> {
    let dir = root.join("mnist");
    let (train, test) = match load_mnist::<f32>(&dir) {
        Ok((a, b)) => (flatten(a)?, flatten(b)?),
        Err(e) => return Ok(verdict(false, format!("MNIST not available: {e}"))),
    };
    let desk = train_classifier(
        &mlp_mnist_specs(),
        &MNIST_INPUT,
        &train,
        &test,
        mnist_config(),
        Some(10_000),
        10,
    )?;
    *desk_csv = Some(desk.csv.clone());
    let desk_ok = desk.test_err <= 0.08;
    let mut detail = format!(
        "desk 10k/10 epochs test error {:.4} (limit 0.08) in {:.0} s",
        desk.test_err, desk.secs
    );
    if quick {
        detail += "; full-data run not run (PLAINNET_QUICK)";
        return Ok(verdict(false, detail));
    }
    let full = train_classifier(
        &mlp_mnist_specs(),
        &MNIST_INPUT,
        &train,
        &test,
        mnist_config(),
        None,
        20,
    )?;
    detail += &format!(
        "; full 60k/20 epochs test error {:.4} (limit 0.03) in {:.0} s",
        full.test_err, full.secs
    );
    Ok(verdict(desk_ok && full.test_err <= 0.03, detail))
}

fn criterion_cifar(root: &Path) -> Result<Verdict> {
    let dir = root.join("cifar-10-batches-bin");
    let (train, test) = match load_cifar10::<f32>(&dir) {
        Ok(d) => d,
        Err(e) => return Ok(verdict(false, format!("CIFAR-10 not available: {e}"))),
    };
    let fixed = Experiment::CnnCifar10.default_train_config();
    let selective = TrainConfig {
        selective_sgd: Some(default_selective_sgd()),
        ..fixed.clone()
    };
    let specs = cnn_cifar10_specs();
    let base = train_classifier(&specs, &CIFAR_INPUT, &train, &test, fixed, Some(5_000), 10)?;
    let sel = train_classifier(&specs, &CIFAR_INPUT, &train, &test, selective, Some(5_000), 10)?;
    let acc = 1.0 - sel.test_err;
    Ok(verdict(
        acc >= 0.5 && sel.test_loss <= base.test_loss,
        format!(
            "5k/10 epochs: Selective-SGD accuracy {acc:.4} (limit 0.50), test loss {:.4} vs fixed lr 1e-2 {:.4}; \
             {:.0} s",
            sel.test_loss,
            base.test_loss,
            base.secs + sel.secs
        ),
    ))
}

// ---------------------------------------------------------------- 5

/// Plain gradient descent on w².
struct Quadratic {
    w: f64,
}

impl LrTrial for Quadratic {
    type Snapshot = f64;

    fn snapshot(&self) -> f64 {
        self.w
    }

    fn restore(&mut self, s: &f64) {
        self.w = *s;
    }

    fn trial_step(&mut self, _iteration: usize, lr: f64) -> Result<f64> {
        self.w -= lr * 2.0 * self.w;
        Ok(self.w * self.w)
    }
}

fn criterion_selective() -> Result<Verdict> {
    let start = Instant::now();
    let candidates = vec![1.5, 0.1, 1e-6];
    // Each step multiplies w by (1 − 2·lr); the smallest factor wins.
    let oracle = candidates
        .iter()
        .copied()
        .min_by(|a: &f64, b: &f64| (1.0 - 2.0 * a).abs().total_cmp(&(1.0 - 2.0 * b).abs()))
        .expect("non-empty");
    let cfg = SelectiveSgdConfig {
        candidate_rates: candidates,
        ..Default::default()
    };
    let mut ok = true;
    let mut chosen = Vec::new();
    for w0 in [0.7, -3.25, 1e-3] {
        let mut q = Quadratic { w: w0 };
        let report = selective_sgd_search(&mut q, &cfg, None)?;
        ok &= report.chosen == oracle && q.w.to_bits() == w0.to_bits();
        chosen.push(report.chosen);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        ok && oracle == 0.1 && secs < 1.0,
        format!("chose {chosen:?} (contraction oracle {oracle}), parameters restored bit-exactly, {secs:.4} s"),
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_lstm(root: &Path, quick: bool, desk_csv: &mut Option<String>) -> Result<Verdict> {
    let path = root.join("shakespeare").join("shakespeare.txt");
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return Ok(verdict(false, format!("corpus {} not available: {e}", path.display()))),
    };
    let excerpt: String = text.chars().take(200_000).collect();
    let start = Instant::now();
    let desk_cfg = CharModelConfig {
        epochs: 5,
        ..CharModelConfig::default()
    };
    let desk = train_char_model::<f32>(&excerpt, &desk_cfg)?;
    *desk_csv = Some(desk.metrics.to_csv());
    let desk_acc = 1.0 - desk.metrics.last().map_or(1.0, |m| m.test_err);
    let desk_ok = desk_acc >= 3.0 * desk.baseline_accuracy;
    let mut detail = format!(
        "desk 200k chars/5 epochs accuracy {desk_acc:.4} vs 3x baseline {:.4} in {:.0} s",
        3.0 * desk.baseline_accuracy,
        start.elapsed().as_secs_f64()
    );
    if quick {
        detail += "; full-corpus run not run (PLAINNET_QUICK)";
        return Ok(verdict(false, detail));
    }
    let start = Instant::now();
    let full = train_char_model::<f32>(&text, &CharModelConfig::default())?;
    let full_acc = 1.0 - full.metrics.last().map_or(1.0, |m| m.test_err);
    detail += &format!(
        "; full corpus ({} chars)/10 epochs accuracy {full_acc:.4} (limit 0.55) in {:.0} s",
        text.chars().count(),
        start.elapsed().as_secs_f64()
    );
    Ok(verdict(desk_ok && full_acc >= 0.55, detail))
}

// ---------------------------------------------------------------- 7

fn criterion_cartpole(log0: &mut Option<String>) -> Result<Verdict> {
    let start = Instant::now();
    let cfg = QNetConfig::default();
    let mut solved = Vec::new();
    for seed in 0..5 {
        let run = run_training::<f32>(&cfg, seed)?;
        if seed == 0 {
            *log0 = Some(run.log.to_csv());
        }
        solved.push(run.solved_at);
    }
    let within = |limit: usize| solved.iter().filter(|s| s.is_some_and(|e| e <= limit)).count();
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        within(2000) >= 3 && within(500) >= 1 && secs <= 600.0,
        format!(
            "episodes to mean greedy length >= 195 for seeds 0-4: {solved:?}; {}/5 within 2000 (need 3), \
             {}/5 within 500 (need 1); {secs:.1} s",
            within(2000),
            within(500)
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_determinism(
    root: &Path,
    mnist: Option<&str>,
    lstm: Option<&str>,
    cartpole: Option<&str>,
) -> Result<Verdict> {
    let mut checked = Vec::new();
    let mut mismatched = Vec::new();
    if let Some(first) = mnist {
        let (train, test) = load_mnist::<f32>(&root.join("mnist"))?;
        let again = train_classifier(
            &mlp_mnist_specs(),
            &MNIST_INPUT,
            &flatten(train)?,
            &flatten(test)?,
            mnist_config(),
            Some(10_000),
            10,
        )?;
        checked.push("mlp-mnist desk");
        if again.csv != first {
            mismatched.push("mlp-mnist");
        }
    }
    if let Some(first) = lstm {
        let text = std::fs::read_to_string(root.join("shakespeare").join("shakespeare.txt"))
            .map_err(|e| plainnet::Error::Data(e.to_string()))?;
        let excerpt: String = text.chars().take(200_000).collect();
        let cfg = CharModelConfig {
            epochs: 5,
            ..CharModelConfig::default()
        };
        checked.push("lstm-char desk");
        if train_char_model::<f32>(&excerpt, &cfg)?.metrics.to_csv() != first {
            mismatched.push("lstm-char");
        }
    }
    if let Some(first) = cartpole {
        checked.push("qnet-cartpole seed 0");
        if run_training::<f32>(&QNetConfig::default(), 0)?.log.to_csv() != first {
            mismatched.push("qnet-cartpole");
        }
    }
    // 64-bit classifier on synthetic data.
    let mut rng = SeededRng::new(8);
    let x = Tensor::<f64>::gaussian(&[20, 120], 1.0, &mut rng);
    let labels = (0..120).map(|_| rng.below(10)).collect();
    let d64 = LabeledDataset::new(x, labels, 10)?;
    let run64 = || -> Result<String> {
        let mut m = SequentialModel::<f64>::from_specs(&plainnet::experiments::mlp_specs(&[20, 16, 10]), &[20])?;
        m.init(&mut SeededRng::new(3));
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            hyper: OptimHyper::with_lr(0.01),
            seed: 3,
            ..Default::default()
        };
        let mut t = Trainer::new(m, cfg)?;
        Ok(t.fit(&d64, Some(&d64))?.to_csv())
    };
    checked.push("64-bit synthetic classifier");
    if run64()? != run64()? {
        mismatched.push("64-bit classifier");
    }
    let all_experiments = mnist.is_some() && lstm.is_some() && cartpole.is_some();
    Ok(verdict(
        mismatched.is_empty() && all_experiments,
        format!(
            "byte-identical metrics.csv on rerun: {}{}{}",
            checked.join(", "),
            if mismatched.is_empty() {
                String::new()
            } else {
                format!("; differing: {}", mismatched.join(", "))
            },
            if all_experiments {
                ""
            } else {
                "; some experiments could not be rerun (missing data)"
            }
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_resume() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = SeededRng::new(12);
    let x = Tensor::<f64>::gaussian(&[784, 200], 1.0, &mut rng);
    let labels = (0..200).map(|_| rng.below(10)).collect();
    let data = LabeledDataset::new(x, labels, 10)?;
    let dir = tempfile::TempDir::new().map_err(|e| plainnet::Error::Data(e.to_string()))?;
    let mut ok = true;
    let mut tried = Vec::new();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 20,
            optimizer: kind,
            hyper: OptimHyper {
                momentum: if kind == OptimizerKind::Sgd { 0.9 } else { 0.0 },
                ..OptimHyper::with_lr(0.01)
            },
            seed: 5,
            ..Default::default()
        };
        let plain = resume_trace(&mlp_mnist_specs(), &MNIST_INPUT, &data, &cfg, (1, 4, 5), None);
        let ck = dir.path().join(format!("{}.bin", kind.as_str()));
        let resumed = resume_trace(&mlp_mnist_specs(), &MNIST_INPUT, &data, &cfg, (1, 4, 5), Some(&ck));
        ok &= plain.0.len() == 5 && plain == resumed;
        tried.push(kind.as_str());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        ok && secs < 60.0,
        format!(
            "784-128-128-10 in f64 ({}), checkpoint file mid-epoch, parameters bit-identical for 5 steps \
             and metrics identical to the end of the epoch, {secs:.1} s",
            tried.join(", ")
        ),
    ))
}

fn main() {
    let root = data_root();
    let quick = flag("PLAINNET_QUICK");
    let strict = flag("PLAINNET_STRICT");
    println!("acceptance report (data root {})", root.display());

    let (mut mnist_csv, mut lstm_csv, mut cart_csv) = (None, None, None);
    let mut results: Vec<(usize, Result<Verdict>)> = Vec::new();
    let mut report = |n: usize, r: Result<Verdict>| {
        match &r {
            Ok(v) => println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail),
            Err(e) => println!("criterion {n}: FAIL error: {e}"),
        }
        results.push((n, r));
    };
    report(1, criterion_gradients());
    report(2, criterion_fft());
    report(3, criterion_mnist(&root, quick, &mut mnist_csv));
    report(4, criterion_cifar(&root));
    report(5, criterion_selective());
    report(6, criterion_lstm(&root, quick, &mut lstm_csv));
    report(7, criterion_cartpole(&mut cart_csv));
    report(
        8,
        criterion_determinism(&root, mnist_csv.as_deref(), lstm_csv.as_deref(), cart_csv.as_deref()),
    );
    report(9, criterion_resume());

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, r)| !matches!(r, Ok(v) if v.pass))
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {}/{} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {failed:?}")
        }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
