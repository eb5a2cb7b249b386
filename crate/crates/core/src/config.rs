//! Training configuration and its canonical `key=value` text form.
//!
//! The text form has one `key=value` pair per line, keys sorted, UTF-8,
//! trailing newline. Floats are written with Rust's shortest round-trip
//! formatting, so parsing the text reproduces the configuration bit-for-bit.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::objective::LossConfig;
use crate::sinkhorn::SinkhornConfig;

/// Value written for "one epoch" defaults.
pub const AUTO: &str = "auto";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Steps during which prototypes receive no update; `None` means one epoch.
    pub prototype_freeze_iterations: Option<u64>,
    pub loss: LossConfig,
    pub k_prototypes: usize,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.03,
            momentum: 0.9,
            prototype_freeze_iterations: None,
            loss: LossConfig {
                queue_length: 256,
                ..LossConfig::default()
            },
            k_prototypes: 16,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be non-negative, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.k_prototypes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 prototypes, got {}",
                self.k_prototypes
            )));
        }
        self.encoder.validate()?;
        self.loss.validate()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("batch_size", self.batch_size.to_string());
        put("base_lr", float(self.base_lr));
        put("encoder.embed_dim", self.encoder.embed_dim.to_string());
        put("encoder.hidden_dims", join(&self.encoder.hidden_dims));
        put("encoder.input_dims", join(&self.encoder.input_dims));
        put("epochs", self.epochs.to_string());
        put("k_prototypes", self.k_prototypes.to_string());
        put("loss.queue_length", self.loss.queue_length.to_string());
        put(
            "loss.queue_start_iteration",
            optional(self.loss.queue_start_iteration),
        );
        put("loss.sinkhorn.epsilon", float(self.loss.sinkhorn.epsilon));
        put(
            "loss.sinkhorn.n_iterations",
            self.loss.sinkhorn.n_iterations.to_string(),
        );
        put(
            "loss.sinkhorn.tolerance",
            float(self.loss.sinkhorn.convergence_tolerance),
        );
        put("loss.temperature", float(self.loss.temperature));
        put("momentum", float(self.momentum));
        put(
            "prototype_freeze_iterations",
            optional(self.prototype_freeze_iterations),
        );
        put("seed", self.seed.to_string());
        m
    }

    pub fn to_canonical_text(&self) -> String {
        render_map(&self.to_map())
    }

    /// Overwrites fields named in `pairs`. Unknown keys are rejected.
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in pairs {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "encoder.embed_dim" => self.encoder.embed_dim = parse(key, value)?,
            "encoder.hidden_dims" => self.encoder.hidden_dims = parse_list(key, value)?,
            "encoder.input_dims" => {
                let dims: Vec<usize> = parse_list(key, value)?;
                self.encoder.input_dims = dims.try_into().map_err(|_| {
                    Error::Config(format!("{key} needs exactly two values, got {value:?}"))
                })?;
            }
            "epochs" => self.epochs = parse(key, value)?,
            "k_prototypes" => self.k_prototypes = parse(key, value)?,
            "loss.queue_length" => self.loss.queue_length = parse(key, value)?,
            "loss.queue_start_iteration" => {
                self.loss.queue_start_iteration = parse_optional(key, value)?
            }
            "loss.sinkhorn.epsilon" => self.loss.sinkhorn.epsilon = parse(key, value)?,
            "loss.sinkhorn.n_iterations" => self.loss.sinkhorn.n_iterations = parse(key, value)?,
            "loss.sinkhorn.tolerance" => {
                self.loss.sinkhorn.convergence_tolerance = parse(key, value)?
            }
            "loss.temperature" => self.loss.temperature = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "prototype_freeze_iterations" => {
                self.prototype_freeze_iterations = parse_optional(key, value)?
            }
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses canonical text; keys not present keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Switches Sinkhorn to the converged mode at the current ε.
    pub fn with_converged_sinkhorn(mut self) -> Self {
        self.loss.sinkhorn = SinkhornConfig::converged(self.loss.sinkhorn.epsilon);
        self
    }
}

pub fn render_map(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Reads `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
        })?;
        if out
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key {:?}",
                n + 1,
                k.trim()
            )));
        }
    }
    Ok(out)
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn optional(v: Option<u64>) -> String {
    v.map_or_else(|| AUTO.to_string(), |n| n.to_string())
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_optional(key: &str, value: &str) -> Result<Option<u64>> {
    if value == AUTO {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}
