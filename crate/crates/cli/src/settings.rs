//! Effective run settings: defaults, then the config file, then flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use olnmt::config::KeyValues;
use olnmt::model::ModelConfig;
use olnmt::optim::{Algorithm, OptimizerConfig};
use olnmt::sim::TrainConfig;

use crate::CliError;

pub const OUT_DIR_ENV: &str = "OLNMT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "olnmt-out";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Looks keys up in the merged input and remembers every value it hands
/// out, defaults included, so the effective config can be written back.
pub struct Settings {
    input: KeyValues,
    resolved: KeyValues,
}

impl Settings {
    pub fn new(file: Option<&Path>, flags: KeyValues) -> Result<Self, CliError> {
        let mut input = match file {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::new(),
        };
        input.merge(&flags);
        Ok(Self {
            input,
            resolved: KeyValues::new(),
        })
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        let v = self.input.get_parsed(key)?.unwrap_or(default);
        self.resolved.set(key, &v);
        Ok(v)
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        let v: Option<T> = self.input.get_parsed(key)?;
        if let Some(v) = &v {
            self.resolved.set(key, v);
        }
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str) -> Result<T, CliError> {
        self.opt(key)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{}", key.replace('_', "-"))))
    }

    pub fn path(&mut self, key: &str) -> Result<PathBuf, CliError> {
        self.require::<String>(key).map(PathBuf::from)
    }

    pub fn opt_path(&mut self, key: &str) -> Result<Option<PathBuf>, CliError> {
        Ok(self.opt::<String>(key)?.map(PathBuf::from))
    }

    /// Comma-separated list.
    pub fn list(&mut self, key: &str) -> Result<Vec<String>, CliError> {
        Ok(self
            .opt::<String>(key)?
            .map(|s| {
                s.split(',')
                    .map(|x| x.trim().to_string())
                    .filter(|x| !x.is_empty())
                    .collect()
            })
            .unwrap_or_default())
    }

    pub fn out_dir(&mut self) -> Result<PathBuf, CliError> {
        let default = std::env::var(OUT_DIR_ENV).unwrap_or_else(|_| DEFAULT_OUT_DIR.to_string());
        let dir = PathBuf::from(self.get::<String>("out_dir", default)?);
        std::fs::create_dir_all(&dir).map_err(|e| olnmt::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok(dir)
    }

    pub fn seed(&mut self) -> Result<u64, CliError> {
        self.get("seed", 1u64)
    }

    /// Online optimizer from `optimizer` and its hyperparameter keys.
    pub fn optimizer(&mut self, default: Algorithm) -> Result<OptimizerConfig, CliError> {
        let mut kv = self.input.clone();
        if kv.get("optimizer").is_none() {
            kv.set("optimizer", default);
        }
        let cfg = OptimizerConfig::from_key_values(&kv)?;
        self.resolved.merge(&cfg.to_key_values());
        Ok(cfg)
    }

    /// Every algorithm named in the comma-separated `optimizer` key, each
    /// with the shared overrides.
    pub fn optimizers(&mut self) -> Result<Vec<OptimizerConfig>, CliError> {
        let names = self.list("optimizer")?;
        let names = if names.is_empty() {
            vec!["adam".to_string()]
        } else {
            names
        };
        let mut out = Vec::new();
        for n in &names {
            let mut kv = self.input.clone();
            kv.set("optimizer", n);
            let cfg = OptimizerConfig::from_key_values(&kv)?;
            for (k, v) in cfg.to_key_values().iter() {
                if k != "optimizer" {
                    self.resolved.set(format!("{}.{k}", cfg.algorithm), v);
                }
                if let Some(given) = self.input.get(k) {
                    self.resolved.set(k, given);
                }
            }
            out.push(cfg);
        }
        Ok(out)
    }

    pub fn model(&mut self) -> Result<ModelConfig, CliError> {
        let d = ModelConfig::default();
        Ok(ModelConfig {
            src_vocab_size: 0,
            tgt_vocab_size: 0,
            embedding_dim: self.get("embedding_dim", d.embedding_dim)?,
            hidden_dim: self.get("hidden_dim", d.hidden_dim)?,
            attention_dim: self.get("attention_dim", d.attention_dim)?,
            deep_output_dim: self.get("deep_output_dim", d.deep_output_dim)?,
            weight_noise_sigma: self.get("weight_noise", d.weight_noise_sigma)?,
            beam_size: self.get("beam_size", d.beam_size)?,
            max_output_length: self.get("max_output_length", d.max_output_length)?,
        })
    }

    /// Offline training settings; `prefix` selects e.g. `fine_tune_` keys,
    /// which fall back to the unprefixed ones.
    pub fn train(&mut self, prefix: &str, seed: u64, noise: f64) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let pick = |s: &mut Self, key: &str, dflt: usize| -> Result<usize, CliError> {
            let base = s.get(key, dflt)?;
            if prefix.is_empty() {
                Ok(base)
            } else {
                s.get(&format!("{prefix}{key}"), base)
            }
        };
        let max_updates = pick(self, "max_updates", d.max_updates)?;
        let eval_every = pick(self, "eval_every", d.eval_every)?;
        let patience = pick(self, "patience", d.patience)?;
        let dev_limit = pick(self, "dev_limit", d.dev_limit)?;
        let eval_beam_size = self.get("eval_beam_size", d.eval_beam_size)?;
        let alg: Algorithm = self.get("train_optimizer", d.optimizer.algorithm)?;
        let mut optimizer = OptimizerConfig::new(alg);
        let default_lr = if alg == Algorithm::Adadelta {
            d.optimizer.learning_rate
        } else {
            optimizer.learning_rate
        };
        optimizer.learning_rate = self.get("train_lr", default_lr)?;
        optimizer.clip_norm = self.get("train_clip_norm", d.optimizer.clip_norm)?;
        let cfg = TrainConfig {
            optimizer,
            max_updates,
            eval_every,
            patience,
            dev_limit,
            eval_beam_size,
            weight_noise_sigma: noise,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `bpe_merges`, where 0 or absence disables subwords.
    pub fn bpe_merges(&mut self) -> Result<Option<usize>, CliError> {
        Ok(Some(self.get("bpe_merges", 0usize)?).filter(|&n| n > 0))
    }

    /// Keys of the input that no lookup asked for.
    pub fn unused(&self) -> Vec<String> {
        self.input
            .keys()
            .filter(|k| self.resolved.get(k).is_none())
            .map(str::to_string)
            .collect()
    }

    /// Writes `config.txt` with the command, tool version and every
    /// resolved value.
    pub fn write(&mut self, dir: &Path, command: &str) -> Result<(), CliError> {
        for k in self.unused() {
            log::warn!("ignoring unused setting {k}");
        }
        let mut out = self.resolved.clone();
        out.set("command", command);
        out.set("version", VERSION);
        let p = dir.join("config.txt");
        std::fs::write(&p, out.to_string()).map_err(|e| olnmt::Error::Io { path: p, source: e })?;
        Ok(())
    }
}
