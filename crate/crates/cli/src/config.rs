//! Run settings: built-in defaults, overlaid by a flat `key = value` file,
//! overlaid by command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cnnqoe::training::OptimizerKind;
use cnnqoe::{ModelConfig, SplitProtocol, TrainConfig, Variant};

use crate::UsageError;

/// Every key a config file may set.
pub const KEYS: &[&str] = &[
    "kernel_size",
    "blocks",
    "filters",
    "variant",
    "dropout",
    "window",
    "learning_rate",
    "epochs",
    "batch_size",
    "seed",
    "optimizer",
    "patience",
    "traces",
    "val_traces",
    "protocol",
    "train_fraction",
    "out_dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Score the given model on every trace as-is.
    Holdout,
    LeaveOneOut,
    Random8020,
    RandomFraction,
}

impl Protocol {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "holdout" => Some(Self::Holdout),
            "leave_one_out" => Some(Self::LeaveOneOut),
            "random_80_20" => Some(Self::Random8020),
            "random_fraction" => Some(Self::RandomFraction),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Input window length; `None` means the model's receptive field.
    pub window: Option<usize>,
    pub train: TrainConfig,
    pub traces: Option<PathBuf>,
    pub val_traces: Option<PathBuf>,
    pub protocol: Protocol,
    pub train_fraction: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            window: None,
            train: TrainConfig::default(),
            traces: None,
            val_traces: None,
            protocol: Protocol::Holdout,
            train_fraction: 0.8,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| UsageError(format!("`{key}`: cannot parse `{value}`")).into())
}

fn positive(key: &str, value: &str) -> Result<usize> {
    let v: usize = num(key, value)?;
    if v == 0 {
        bail!(UsageError(format!("`{key}` must be at least 1")));
    }
    Ok(v)
}

impl RunConfig {
    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "kernel_size" => self.model.kernel_size = positive(key, value)?,
            "blocks" => self.model.blocks = positive(key, value)?,
            "filters" => self.model.filters = positive(key, value)?,
            "variant" => {
                self.model.variant = value
                    .parse::<Variant>()
                    .map_err(|e| UsageError(format!("`variant`: {e}")))?
            }
            "dropout" => self.model.dropout_p = num(key, value)?,
            "window" => self.window = Some(positive(key, value)?),
            "learning_rate" => self.train.learning_rate = num(key, value)?,
            "epochs" => self.train.epochs = positive(key, value)?,
            "batch_size" => self.train.batch_size = positive(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "optimizer" => {
                self.train.optimizer = value
                    .parse::<OptimizerKind>()
                    .map_err(|e| UsageError(format!("`optimizer`: {e}")))?
            }
            "patience" => self.train.early_stop_patience = Some(positive(key, value)?),
            "traces" => self.traces = Some(PathBuf::from(value)),
            "val_traces" => self.val_traces = Some(PathBuf::from(value)),
            "protocol" => {
                self.protocol = Protocol::parse(value).ok_or_else(|| {
                    UsageError(format!(
                        "`protocol`: unknown `{value}` (holdout, leave_one_out, random_80_20, random_fraction)"
                    ))
                })?
            }
            "train_fraction" => self.train_fraction = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => bail!(UsageError(format!(
                "unknown config key `{other}`; known keys: {}",
                KEYS.join(", ")
            ))),
        }
        Ok(())
    }

    /// Applies every line of a config file. Blank lines and `#` comments
    /// are skipped; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(UsageError(format!("line {}: expected `key = value`", i + 1)));
            };
            let key = key.trim();
            if seen.contains(&key) {
                bail!(UsageError(format!("line {}: `{key}` set twice", i + 1)));
            }
            seen.push(key);
            self.set(key, value)
                .with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.train
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
            bail!(UsageError(format!(
                "`train_fraction` {} must lie in (0, 1)",
                cfg.train_fraction
            )));
        }
        Ok(cfg)
    }

    pub fn split_protocol(&self) -> Option<SplitProtocol> {
        let seed = self.train.seed;
        match self.protocol {
            Protocol::Holdout => None,
            Protocol::LeaveOneOut => Some(SplitProtocol::leave_one_out()),
            Protocol::Random8020 => Some(SplitProtocol::random_80_20(seed)),
            Protocol::RandomFraction => {
                Some(SplitProtocol::random_fraction_per_test(self.train_fraction, seed))
            }
        }
    }

    pub fn traces_dir(&self) -> Result<&Path> {
        self.traces.as_deref().ok_or_else(|| {
            UsageError("no trace directory: set `traces` in the config or pass --traces".into())
                .into()
        })
    }

    /// The resolved settings in config-file syntax.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "kernel_size = {}", m.kernel_size);
        let _ = writeln!(s, "blocks = {}", m.blocks);
        let _ = writeln!(s, "filters = {}", m.filters);
        let _ = writeln!(s, "variant = {}", m.variant);
        let _ = writeln!(s, "dropout = {}", m.dropout_p);
        if let Some(w) = self.window {
            let _ = writeln!(s, "window = {w}");
        }
        let _ = writeln!(s, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "seed = {}", t.seed);
        let opt = match t.optimizer {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        };
        let _ = writeln!(s, "optimizer = {opt}");
        if let Some(p) = t.early_stop_patience {
            let _ = writeln!(s, "patience = {p}");
        }
        if let Some(p) = &self.traces {
            let _ = writeln!(s, "traces = {}", p.display());
        }
        if let Some(p) = &self.val_traces {
            let _ = writeln!(s, "val_traces = {}", p.display());
        }
        let proto = match self.protocol {
            Protocol::Holdout => "holdout",
            Protocol::LeaveOneOut => "leave_one_out",
            Protocol::Random8020 => "random_80_20",
            Protocol::RandomFraction => "random_fraction",
        };
        let _ = writeln!(s, "protocol = {proto}");
        let _ = writeln!(s, "train_fraction = {}", self.train_fraction);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }
}
