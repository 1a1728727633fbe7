//! Online update rules: four gradient optimizers and two passive-aggressive
//! variants, plus the hyperparameter grid they were tuned over.

mod gradient;
mod pa;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub use gradient::{adadelta_update, adagrad_update, adam_update, sgd_update, GradientState};
pub use pa::{pa_objective, pas_update, ppas_update, PaConfig, PaObjective, PaOutcome, SentenceMargin};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adagrad,
    Adadelta,
    Adam,
    Pas,
    Ppas,
    /// No update at all: the frozen baseline.
    None,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Sgd,
        Algorithm::Adagrad,
        Algorithm::Adadelta,
        Algorithm::Adam,
        Algorithm::Pas,
        Algorithm::Ppas,
        Algorithm::None,
    ];

    /// The six algorithms that actually update.
    pub const LEARNING: [Algorithm; 6] = [
        Algorithm::Sgd,
        Algorithm::Adagrad,
        Algorithm::Adadelta,
        Algorithm::Adam,
        Algorithm::Pas,
        Algorithm::Ppas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Adagrad => "adagrad",
            Algorithm::Adadelta => "adadelta",
            Algorithm::Adam => "adam",
            Algorithm::Pas => "pas",
            Algorithm::Ppas => "ppas",
            Algorithm::None => "none",
        }
    }

    pub fn is_passive_aggressive(self) -> bool {
        matches!(self, Algorithm::Pas | Algorithm::Ppas)
    }

    /// Tuned learning rate and aggressiveness for online use.
    pub fn default_hyperparameters(self) -> (f64, Option<f64>) {
        match self {
            Algorithm::Sgd => (1e-3, None),
            Algorithm::Adagrad => (1e-4, None),
            Algorithm::Adadelta => (1e-1, None),
            Algorithm::Adam => (1e-3, None),
            Algorithm::Pas => (1.0, Some(1e-2)),
            Algorithm::Ppas => (1e-2, Some(1e-2)),
            Algorithm::None => (0.0, None),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown optimizer {s:?} (expected one of sgd, adagrad, adadelta, adam, pas, ppas, none)"
                ))
            })
    }
}

/// Everything needed to build an optimizer. Unused fields are ignored by
/// algorithms that do not need them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    /// Aggressiveness of the passive-aggressive variants.
    pub c: f64,
    pub k_max: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub ppas_true_projection: bool,
    pub adagrad_eps: f64,
    pub adadelta_decay: f64,
    pub adadelta_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

pub const DEFAULT_K_MAX: usize = 10;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

impl OptimizerConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        let (lr, c) = algorithm.default_hyperparameters();
        Self {
            algorithm,
            learning_rate: lr,
            c: c.unwrap_or(1e-2),
            k_max: DEFAULT_K_MAX,
            clip_norm: DEFAULT_CLIP_NORM,
            ppas_true_projection: false,
            adagrad_eps: 1e-8,
            adadelta_decay: 0.95,
            adadelta_eps: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.algorithm != Algorithm::None && !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.algorithm.is_passive_aggressive() {
            if !(self.c > 0.0 && self.c.is_finite()) {
                return bad(format!("C must be positive, got {}", self.c));
            }
            if self.k_max == 0 {
                return bad("k_max must be at least 1".into());
            }
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip norm must be nonnegative, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.adadelta_decay) {
            return bad(format!("adadelta decay must be in [0, 1), got {}", self.adadelta_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        for (name, eps) in [
            ("adagrad", self.adagrad_eps),
            ("adadelta", self.adadelta_eps),
            ("adam", self.adam_eps),
        ] {
            if !(eps > 0.0) {
                return bad(format!("{name} epsilon must be positive, got {eps}"));
            }
        }
        Ok(())
    }

    /// Builds a config from flat keys. `optimizer` selects the algorithm and
    /// its tuned defaults; any other recognised key overrides one field.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let algorithm = kv.get_parsed::<Algorithm>("optimizer")?.unwrap_or(Algorithm::Adam);
        let mut cfg = Self::new(algorithm);
        if let Some(v) = kv.get_parsed("lr")? {
            cfg.learning_rate = v;
        }
        if let Some(v) = kv.get_parsed("C")? {
            cfg.c = v;
        }
        if let Some(v) = kv.get_parsed("k_max")? {
            cfg.k_max = v;
        }
        if let Some(v) = kv.get_parsed("clip_norm")? {
            cfg.clip_norm = v;
        }
        if let Some(v) = kv.get_parsed("ppas_true_projection")? {
            cfg.ppas_true_projection = v;
        }
        if let Some(v) = kv.get_parsed("adagrad_eps")? {
            cfg.adagrad_eps = v;
        }
        if let Some(v) = kv.get_parsed("adadelta_decay")? {
            cfg.adadelta_decay = v;
        }
        if let Some(v) = kv.get_parsed("adadelta_eps")? {
            cfg.adadelta_eps = v;
        }
        if let Some(v) = kv.get_parsed("adam_beta1")? {
            cfg.adam_beta1 = v;
        }
        if let Some(v) = kv.get_parsed("adam_beta2")? {
            cfg.adam_beta2 = v;
        }
        if let Some(v) = kv.get_parsed("adam_eps")? {
            cfg.adam_eps = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("optimizer", self.algorithm);
        kv.set("lr", self.learning_rate);
        kv.set("C", self.c);
        kv.set("k_max", self.k_max);
        kv.set("clip_norm", self.clip_norm);
        kv.set("ppas_true_projection", self.ppas_true_projection);
        kv.set("adagrad_eps", self.adagrad_eps);
        kv.set("adadelta_decay", self.adadelta_decay);
        kv.set("adadelta_eps", self.adadelta_eps);
        kv.set("adam_beta1", self.adam_beta1);
        kv.set("adam_beta2", self.adam_beta2);
        kv.set("adam_eps", self.adam_eps);
        kv
    }

    pub fn pa_config(&self) -> PaConfig {
        PaConfig {
            learning_rate: self.learning_rate,
            c: self.c,
            k_max: self.k_max,
            clip_norm: self.clip_norm,
            true_projection: self.ppas_true_projection,
        }
    }
}

/// Powers of ten from 1 down to 1e-6.
pub const GRID_VALUES: [f64; 7] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

/// Candidate `(learning_rate, C)` pairs: the full cross product for the
/// passive-aggressive variants, learning rate only for the rest.
pub fn hyperparameter_grid(algorithm: Algorithm) -> Vec<(f64, Option<f64>)> {
    match algorithm {
        Algorithm::None => vec![(0.0, None)],
        a if a.is_passive_aggressive() => GRID_VALUES
            .iter()
            .flat_map(|&lr| GRID_VALUES.iter().map(move |&c| (lr, Some(c))))
            .collect(),
        _ => GRID_VALUES.iter().map(|&lr| (lr, None)).collect(),
    }
}
