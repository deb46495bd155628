//! Run settings: a flat key-value file overlaid by command-line flags, then
//! resolved against per-experiment defaults.

use std::path::{Path, PathBuf};

use plainnet::experiments::Experiment;
use plainnet::optim::OptimizerKind;
use plainnet::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every key is optional; names match the command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    pub experiment: Option<String>,
    pub epochs: Option<usize>,
    pub episodes: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub optimizer: Option<String>,
    pub selective_sgd: Option<bool>,
    pub trial_iterations: Option<usize>,
    pub seed: Option<u64>,
    pub subset: Option<usize>,
    pub precision: Option<u32>,
    pub hidden: Option<usize>,
    pub seq_len: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub wall_clock: Option<bool>,
    /// Written into run snapshots; ignored when read back.
    pub chosen_lr: Option<f64>,
}

impl Settings {
    /// Reads a TOML file of flat keys. Underscores and dashes are both
    /// accepted in key names.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|detail| Error::Parse {
            path: path.to_path_buf(),
            detail,
        })
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
        let normalized: toml::Table = table.into_iter().map(|(k, v)| (k.replace('_', "-"), v)).collect();
        let mut s = Settings::deserialize(toml::Value::Table(normalized)).map_err(|e| e.message().to_string())?;
        s.chosen_lr = None;
        Ok(s)
    }

    /// Fields set in `top` win.
    pub fn overlay(self, top: Settings) -> Settings {
        macro_rules! pick {
            ($($f:ident),*) => { Settings { $($f: top.$f.or(self.$f)),* } };
        }
        pick!(
            experiment,
            epochs,
            episodes,
            batch_size,
            lr,
            momentum,
            optimizer,
            selective_sgd,
            trial_iterations,
            seed,
            subset,
            precision,
            hidden,
            seq_len,
            data_dir,
            out_dir,
            wall_clock,
            chosen_lr
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat settings serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Fully specified run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub experiment: Experiment,
    pub epochs: usize,
    pub episodes: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub selective_sgd: bool,
    pub trial_iterations: usize,
    pub seed: u64,
    pub subset: Option<usize>,
    pub precision: Precision,
    pub hidden: usize,
    pub seq_len: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub wall_clock: bool,
}

struct Defaults {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    optimizer: OptimizerKind,
    data_dir: &'static str,
}

fn defaults(e: Experiment) -> Defaults {
    match e {
        Experiment::MlpMnist => Defaults {
            epochs: 10,
            batch_size: 100,
            lr: 0.01,
            optimizer: OptimizerKind::Sgd,
            data_dir: "data/mnist",
        },
        Experiment::CnnCifar10 => Defaults {
            epochs: 10,
            batch_size: 50,
            lr: 0.01,
            optimizer: OptimizerKind::Sgd,
            data_dir: "data/cifar-10-batches-bin",
        },
        Experiment::LstmChar => Defaults {
            epochs: 10,
            batch_size: 16,
            lr: 0.02,
            optimizer: OptimizerKind::Rmsprop,
            data_dir: "data/shakespeare",
        },
        Experiment::QnetCartpole => Defaults {
            epochs: 0,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            data_dir: "",
        },
    }
}

impl Resolved {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let experiment: Experiment = s
            .experiment
            .as_deref()
            .ok_or_else(|| Error::Config("no experiment given".into()))?
            .parse()?;
        let d = defaults(experiment);
        let precision = match s.precision.unwrap_or(32) {
            32 => Precision::F32,
            64 => Precision::F64,
            p => return Err(Error::Config(format!("precision must be 32 or 64, got {p}"))),
        };
        let optimizer = match &s.optimizer {
            Some(o) => o.parse()?,
            None => d.optimizer,
        };
        let r = Resolved {
            experiment,
            epochs: s.epochs.unwrap_or(d.epochs),
            episodes: s.episodes.unwrap_or(2000),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            lr: s.lr.unwrap_or(d.lr),
            momentum: s
                .momentum
                .unwrap_or(if optimizer == OptimizerKind::Sgd { 0.9 } else { 0.0 }),
            optimizer,
            selective_sgd: s.selective_sgd.unwrap_or(false),
            trial_iterations: s.trial_iterations.unwrap_or(50),
            seed: s.seed.unwrap_or(0),
            subset: s.subset,
            precision,
            hidden: s
                .hidden
                .unwrap_or(if experiment == Experiment::QnetCartpole { 64 } else { 30 }),
            seq_len: s.seq_len.unwrap_or(50),
            data_dir: s.data_dir.clone().unwrap_or_else(|| PathBuf::from(d.data_dir)),
            out_dir: s
                .out_dir
                .clone()
                .unwrap_or_else(|| Path::new("runs").join(experiment.as_str())),
            wall_clock: s.wall_clock.unwrap_or(false),
        };
        if r.batch_size == 0 {
            return Err(Error::Config("batch-size must be ≥ 1".into()));
        }
        if !(r.lr.is_finite() && r.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", r.lr)));
        }
        Ok(r)
    }

    /// Snapshot with every value spelled out; feeding it back through
    /// `--config` reproduces the run.
    pub fn to_settings(&self, chosen_lr: Option<f64>) -> Settings {
        let classifier = matches!(self.experiment, Experiment::MlpMnist | Experiment::CnnCifar10);
        let lstm = self.experiment == Experiment::LstmChar;
        let cartpole = self.experiment == Experiment::QnetCartpole;
        Settings {
            experiment: Some(self.experiment.as_str().into()),
            epochs: (!cartpole).then_some(self.epochs),
            episodes: cartpole.then_some(self.episodes),
            batch_size: Some(self.batch_size),
            lr: Some(self.lr),
            momentum: Some(self.momentum),
            optimizer: Some(self.optimizer.as_str().into()),
            selective_sgd: classifier.then_some(self.selective_sgd),
            trial_iterations: (classifier && self.selective_sgd).then_some(self.trial_iterations),
            seed: Some(self.seed),
            subset: self.subset,
            precision: Some(match self.precision {
                Precision::F32 => 32,
                Precision::F64 => 64,
            }),
            hidden: (lstm || cartpole).then_some(self.hidden),
            seq_len: lstm.then_some(self.seq_len),
            data_dir: (!cartpole).then(|| self.data_dir.clone()),
            out_dir: Some(self.out_dir.clone()),
            wall_clock: Some(self.wall_clock),
            chosen_lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file = Settings::from_toml("epochs = 3\nbatch_size = 7\nlr = 0.5\n").unwrap();
        let flags = Settings {
            epochs: Some(1),
            ..Default::default()
        };
        let s = file.overlay(flags);
        assert_eq!((s.epochs, s.batch_size, s.lr), (Some(1), Some(7), Some(0.5)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Settings::from_toml("epochz = 3").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let s = Settings {
            experiment: Some("mlp-mnist".into()),
            seed: Some(9),
            ..Default::default()
        };
        let r = Resolved::from_settings(&s).unwrap();
        let text = r.to_settings(Some(0.1)).to_toml();
        assert!(text.contains("chosen-lr = 0.1"));
        let back = Resolved::from_settings(&Settings::from_toml(&text).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let base = Settings {
            experiment: Some("mlp-mnist".into()),
            ..Default::default()
        };
        for bad in [
            Settings {
                precision: Some(16),
                ..base.clone()
            },
            Settings {
                optimizer: Some("lbfgs".into()),
                ..base.clone()
            },
            Settings {
                batch_size: Some(0),
                ..base.clone()
            },
            Settings {
                experiment: Some("gan".into()),
                ..base.clone()
            },
        ] {
            assert!(matches!(Resolved::from_settings(&bad), Err(Error::Config(_))));
        }
    }
}
