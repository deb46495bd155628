use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use plainnet::datasets::{load_cifar10, load_mnist, LabeledDataset};
use plainnet::experiments::{
    cnn_cifar10_specs, mlp_mnist_specs, run_gradcheck, Experiment, GradArch, CIFAR_INPUT, MNIST_INPUT,
};
use plainnet::lstm::{lstm_checkpoint, lstm_from_checkpoint, sample, train_char_model, CharModelConfig};
use plainnet::network::{format_g9, Checkpoint, SequentialModel, TrainConfig, Trainer};
use plainnet::optim::{OptimHyper, SelectiveSgdConfig};
use plainnet::rl::{greedy_episode_lengths, run_training, QNetConfig, ReplayConfig};
use plainnet::{Error, Result, Scalar, SeededRng, Tensor};

use crate::settings::{Precision, Resolved};

const SUBSET_TAG: u64 = 0x5AB5;
const INIT_TAG: u64 = 0x1417;

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn hyper(r: &Resolved) -> OptimHyper {
    OptimHyper {
        momentum: r.momentum,
        ..OptimHyper::with_lr(r.lr)
    }
}

fn timing_csv(t: &[f64]) -> String {
    let mut out = String::from("epoch,seconds\n");
    for (i, s) in t.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, format_g9(*s));
    }
    out
}

/// Runs the configured experiment and writes its outputs into `out_dir`.
pub fn train(r: &Resolved) -> Result<()> {
    fs::create_dir_all(&r.out_dir).map_err(|source| Error::Io {
        path: r.out_dir.clone(),
        source,
    })?;
    match (r.experiment, r.precision) {
        (Experiment::MlpMnist | Experiment::CnnCifar10, Precision::F32) => train_classifier::<f32>(r),
        (Experiment::MlpMnist | Experiment::CnnCifar10, Precision::F64) => train_classifier::<f64>(r),
        (Experiment::LstmChar, Precision::F32) => train_lstm::<f32>(r),
        (Experiment::LstmChar, Precision::F64) => train_lstm::<f64>(r),
        (Experiment::QnetCartpole, Precision::F32) => train_cartpole::<f32>(r),
        (Experiment::QnetCartpole, Precision::F64) => train_cartpole::<f64>(r),
    }
}

fn flatten<T: Scalar>(d: LabeledDataset<T>) -> Result<LabeledDataset<T>> {
    let n = d.len();
    let features: usize = d.sample_shape().iter().product();
    let norm = d.normalization.clone();
    let mut out = LabeledDataset::new(d.inputs.reshape(&[features, n])?, d.labels, d.classes)?;
    out.normalization = norm;
    Ok(out)
}

fn train_classifier<T: Scalar>(r: &Resolved) -> Result<()> {
    let (specs, input, (train, test)) = match r.experiment {
        Experiment::MlpMnist => {
            let (a, b) = load_mnist::<T>(&r.data_dir)?;
            (mlp_mnist_specs(), MNIST_INPUT.to_vec(), (flatten(a)?, flatten(b)?))
        }
        _ => (
            cnn_cifar10_specs(),
            CIFAR_INPUT.to_vec(),
            load_cifar10::<T>(&r.data_dir)?,
        ),
    };
    let train = match r.subset {
        Some(n) if n < train.len() => train.subset(n, &mut SeededRng::new(r.seed).fork(SUBSET_TAG))?,
        _ => train,
    };
    let mut model = SequentialModel::<T>::from_specs(&specs, &input)?;
    model.init(&mut SeededRng::new(r.seed).fork(INIT_TAG));
    let config = TrainConfig {
        epochs: r.epochs,
        batch_size: r.batch_size,
        optimizer: r.optimizer,
        hyper: hyper(r),
        selective_sgd: r.selective_sgd.then(|| SelectiveSgdConfig {
            trial_iterations: r.trial_iterations,
            ..SelectiveSgdConfig::default()
        }),
        seed: r.seed,
        eval_every: 1,
        wall_clock: r.wall_clock,
    };
    let mut trainer = Trainer::new(model, config)?;
    let outcome = (|| {
        while trainer.epochs_done() < r.epochs {
            trainer.run_epoch(&train, Some(&test))?;
            let m = trainer.metrics().last().expect("epoch recorded");
            eprintln!(
                "epoch {:>3}  train_loss {:.4}  train_err {:.4}  test_loss {:.4}  test_err {:.4}",
                m.epoch, m.train_loss, m.train_err, m.test_loss, m.test_err
            );
        }
        Ok(())
    })();
    let chosen = trainer.chosen_rates().last().map(|&(_, lr)| lr);
    write(&r.out_dir.join("metrics.csv"), &trainer.metrics().to_csv())?;
    write(&r.out_dir.join("timing.csv"), &timing_csv(trainer.timings()))?;
    write(&r.out_dir.join("config.toml"), &r.to_settings(chosen).to_toml())?;
    let mut ck = trainer.to_checkpoint()?;
    ck.meta.insert("model".into(), r.experiment.as_str().into());
    ck.save(&r.out_dir.join("checkpoint.bin"))?;
    if let Some(lr) = chosen {
        eprintln!("selective SGD chose lr {lr}");
    }
    outcome
}

fn read_corpus(path: &Path) -> Result<String> {
    let file = if path.is_dir() {
        path.join("shakespeare.txt")
    } else {
        path.to_path_buf()
    };
    if !file.is_file() {
        return Err(Error::Data(format!("text corpus {} not found", file.display())));
    }
    fs::read_to_string(&file).map_err(|e| Error::Parse {
        path: file,
        detail: e.to_string(),
    })
}

fn train_lstm<T: Scalar>(r: &Resolved) -> Result<()> {
    let mut text = read_corpus(&r.data_dir)?;
    if let Some(n) = r.subset {
        if let Some((cut, _)) = text.char_indices().nth(n) {
            text.truncate(cut);
        }
    }
    let cfg = CharModelConfig {
        hidden: r.hidden,
        seq_len: r.seq_len,
        batch_size: r.batch_size,
        epochs: r.epochs,
        optimizer: r.optimizer,
        hyper: hyper(r),
        seed: r.seed,
        ..CharModelConfig::default()
    };
    let run = train_char_model::<T>(&text, &cfg)?;
    write(&r.out_dir.join("metrics.csv"), &run.metrics.to_csv())?;
    write(&r.out_dir.join("timing.csv"), &timing_csv(&run.timings))?;
    write(&r.out_dir.join("config.toml"), &r.to_settings(None).to_toml())?;
    lstm_checkpoint(&run.lstm, &run.vocab, r.seed).save(&r.out_dir.join("checkpoint.bin"))?;
    eprintln!(
        "vocab {}  windows {}/{}  baseline accuracy {:.4}",
        run.vocab.len(),
        run.train_windows,
        run.test_windows,
        run.baseline_accuracy
    );
    if let Some(m) = run.metrics.last() {
        eprintln!("held-out accuracy {:.4}", 1.0 - m.test_err);
    }
    Ok(())
}

fn train_cartpole<T: Scalar>(r: &Resolved) -> Result<()> {
    let cfg = QNetConfig {
        hidden: vec![r.hidden],
        max_episodes: r.episodes,
        optimizer: r.optimizer,
        hyper: hyper(r),
        replay: Some(ReplayConfig {
            capacity: 10_000,
            batch_size: r.batch_size,
        }),
        ..QNetConfig::default()
    };
    let run = run_training::<T>(&cfg, r.seed)?;
    write(&r.out_dir.join("metrics.csv"), &run.log.to_csv())?;
    let mut evals = String::from("episode,mean_length\n");
    for (e, m) in &run.evaluations {
        let _ = writeln!(evals, "{e},{}", format_g9(*m));
    }
    write(&r.out_dir.join("evaluations.csv"), &evals)?;
    write(&r.out_dir.join("config.toml"), &r.to_settings(None).to_toml())?;
    let mut ck = Checkpoint::<T>::new(r.seed, run.train_steps as u64);
    ck.put_model(&run.model)?;
    ck.meta.insert("model".into(), "qnet-cartpole".into());
    ck.save(&r.out_dir.join("checkpoint.bin"))?;
    match run.solved_at {
        Some(e) => eprintln!("solved after {e} episodes"),
        None => eprintln!("not solved within {} episodes", r.episodes),
    }
    Ok(())
}

/// Prints the per-layer report; true when every layer passes.
pub fn gradcheck(arch: &str, seed: u64, corrupt: Option<&str>) -> Result<bool> {
    let arch: GradArch = arch.parse()?;
    let report = run_gradcheck(arch, seed, corrupt)?;
    print!("{report}");
    println!(
        "{}: max relative error {:.3e} (tolerance {:.0e})",
        if report.passed() { "PASS" } else { "FAIL" },
        report.max_error(),
        report.tolerance
    );
    Ok(report.passed())
}

fn read_checkpoint(path: &Path) -> Result<(Vec<u8>, String)> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let precision = Checkpoint::<f32>::precision_of(&bytes)?;
    Ok((bytes, precision))
}

fn expect_model<T: Scalar>(ck: &Checkpoint<T>, want: &str) -> Result<()> {
    let found = ck.meta_str("model")?;
    if found != want {
        return Err(Error::Config(format!(
            "checkpoint holds a `{found}` model, expected `{want}`"
        )));
    }
    Ok(())
}

pub fn sample_text(path: &Path, seed_text: &str, length: usize, temperature: f64, seed: u64) -> Result<String> {
    fn go<T: Scalar>(bytes: &[u8], seed_text: &str, length: usize, temperature: f64, seed: u64) -> Result<String> {
        let ck = Checkpoint::<T>::from_bytes(bytes)?;
        expect_model(&ck, "lstm")?;
        let (lstm, vocab) = lstm_from_checkpoint(&ck)?;
        sample(&lstm, &vocab, seed_text, length, temperature, &mut SeededRng::new(seed))
    }
    let (bytes, precision) = read_checkpoint(path)?;
    if precision == "f64" {
        go::<f64>(&bytes, seed_text, length, temperature, seed)
    } else {
        go::<f32>(&bytes, seed_text, length, temperature, seed)
    }
}

pub fn play_cartpole(path: &Path, episodes: usize, seed: u64) -> Result<Vec<usize>> {
    fn go<T: Scalar>(bytes: &[u8], episodes: usize, seed: u64) -> Result<Vec<usize>> {
        let ck = Checkpoint::<T>::from_bytes(bytes)?;
        expect_model(&ck, "qnet-cartpole")?;
        let mut model = ck.model()?;
        let probe = model.forward(&Tensor::zeros(&[4, 1]), false)?;
        if probe.shape() != [2, 1] {
            return Err(Error::Config(
                "checkpoint network does not map 4 inputs to 2 actions".into(),
            ));
        }
        greedy_episode_lengths(&mut model, episodes, 200, &mut SeededRng::new(seed))
    }
    let (bytes, precision) = read_checkpoint(path)?;
    if precision == "f64" {
        go::<f64>(&bytes, episodes, seed)
    } else {
        go::<f32>(&bytes, episodes, seed)
    }
}
