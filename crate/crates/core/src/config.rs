//! Flat `key=value` configuration covering the model and its training run.
//!
//! One pair per line; `#` starts a comment. Later assignments win, which is
//! how command-line overrides are layered on a file. The canonical text lists
//! every key in sorted order and is what the config hash is computed over.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::outlook::SoftmaxScope;
use crate::params::fnv1a64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{key}'; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<&'static str> },
    #[error("config key '{key}': invalid value '{value}': {msg}")]
    BadValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the context outlooker sits relative to the global encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Outlooker refines the encoder output.
    #[default]
    GlobalToLocal,
    /// Outlooker runs on embeddings; its output feeds the encoder blocks.
    LocalToGlobal,
    /// Both run on the input and are fused by two linear layers.
    GlobalAndLocal,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::GlobalToLocal => "GlobalToLocal",
            Mode::LocalToGlobal => "LocalToGlobal",
            Mode::GlobalAndLocal => "GlobalAndLocal",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "GlobalToLocal" => Ok(Mode::GlobalToLocal),
            "LocalToGlobal" => Ok(Mode::LocalToGlobal),
            "GlobalAndLocal" => Ok(Mode::GlobalAndLocal),
            other => Err(format!(
                "unknown mode '{other}' (GlobalToLocal, LocalToGlobal, GlobalAndLocal)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaskKind {
    /// Extractive QA: start/end position over the packed sequence.
    #[default]
    Span,
    SeqClass,
    TokenTag,
    MultiChoice,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Span => "span",
            TaskKind::SeqClass => "seq_class",
            TaskKind::TokenTag => "token_tag",
            TaskKind::MultiChoice => "multi_choice",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "span" => Ok(TaskKind::Span),
            "seq_class" => Ok(TaskKind::SeqClass),
            "token_tag" => Ok(TaskKind::TokenTag),
            "multi_choice" => Ok(TaskKind::MultiChoice),
            other => Err(format!(
                "unknown task '{other}' (span, seq_class, token_tag, multi_choice)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub use_conv_block: bool,
    pub conv_widths: Vec<usize>,
    pub conv_filters: usize,
    pub num_outlook_layers: usize,
    pub kernel_size: usize,
    pub softmax_scope: SoftmaxScope,
    pub hidden: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub task: TaskKind,
    /// Classes for `seq_class`/`token_tag`, choices for `multi_choice`.
    pub num_labels: usize,
    pub max_answer_len: usize,
    pub null_threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::GlobalToLocal,
            use_conv_block: true,
            conv_widths: vec![3, 4, 5],
            conv_filters: 100,
            num_outlook_layers: 2,
            kernel_size: 3,
            softmax_scope: SoftmaxScope::PerChannel,
            hidden: 32,
            encoder_blocks: 2,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 512,
            max_len: 64,
            dropout: 0.0,
            task: TaskKind::Span,
            num_labels: 2,
            max_answer_len: 30,
            null_threshold: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel count `F` seen by the outlook layers.
    pub fn channels(&self) -> usize {
        if self.use_conv_block {
            self.conv_widths.len() * self.conv_filters
        } else {
            self.hidden
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden={} is not divisible by heads={}",
                self.hidden, self.heads
            ));
        }
        if self.use_conv_block && (self.conv_widths.is_empty() || self.conv_filters == 0) {
            return fail("conv block needs at least one width and one filter".into());
        }
        if self.conv_widths.contains(&0) {
            return fail("conv widths must be positive".into());
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must cover the 4 reserved ids".into());
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("num_labels", self.num_labels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `0` disables clipping.
    pub grad_clip: f64,
    /// Write an intermediate checkpoint every N steps; `0` only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 7,
            batch_size: 48,
            lr_encoder: 3e-5,
            lr_other: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "beta1",
    "beta2",
    "checkpoint_every",
    "conv_filters",
    "conv_widths",
    "dropout",
    "encoder_blocks",
    "epochs",
    "eps",
    "ffn_dim",
    "grad_clip",
    "heads",
    "hidden",
    "kernel_size",
    "lr_encoder",
    "lr_other",
    "max_answer_len",
    "max_len",
    "mode",
    "null_threshold",
    "num_labels",
    "num_outlook_layers",
    "seed",
    "softmax_scope",
    "task",
    "use_conv_block",
    "vocab_size",
    "weight_decay",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|p| parse_value::<usize>(key, p.trim()))
        .collect()
}

impl Config {
    /// Parses file text on top of the defaults.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: pair.to_string(),
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "mode" => m.mode = parse_value(key, value)?,
            "use_conv_block" => m.use_conv_block = parse_value(key, value)?,
            "conv_widths" => m.conv_widths = parse_list(key, value)?,
            "conv_filters" => m.conv_filters = parse_value(key, value)?,
            "num_outlook_layers" => m.num_outlook_layers = parse_value(key, value)?,
            "kernel_size" => m.kernel_size = parse_value(key, value)?,
            "softmax_scope" => m.softmax_scope = parse_value(key, value)?,
            "hidden" => m.hidden = parse_value(key, value)?,
            "encoder_blocks" => m.encoder_blocks = parse_value(key, value)?,
            "heads" => m.heads = parse_value(key, value)?,
            "ffn_dim" => m.ffn_dim = parse_value(key, value)?,
            "vocab_size" => m.vocab_size = parse_value(key, value)?,
            "max_len" => m.max_len = parse_value(key, value)?,
            "dropout" => m.dropout = parse_value(key, value)?,
            "task" => m.task = parse_value(key, value)?,
            "num_labels" => m.num_labels = parse_value(key, value)?,
            "max_answer_len" => m.max_answer_len = parse_value(key, value)?,
            "null_threshold" => m.null_threshold = parse_value(key, value)?,
            "seed" => m.seed = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "lr_encoder" => t.lr_encoder = parse_value(key, value)?,
            "lr_other" => t.lr_other = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "eps" => t.eps = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "grad_clip" => t.grad_clip = parse_value(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    valid: CONFIG_KEYS.to_vec(),
                })
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        match key {
            "mode" => m.mode.to_string(),
            "use_conv_block" => m.use_conv_block.to_string(),
            "conv_widths" => m
                .conv_widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "conv_filters" => m.conv_filters.to_string(),
            "num_outlook_layers" => m.num_outlook_layers.to_string(),
            "kernel_size" => m.kernel_size.to_string(),
            "softmax_scope" => m.softmax_scope.to_string(),
            "hidden" => m.hidden.to_string(),
            "encoder_blocks" => m.encoder_blocks.to_string(),
            "heads" => m.heads.to_string(),
            "ffn_dim" => m.ffn_dim.to_string(),
            "vocab_size" => m.vocab_size.to_string(),
            "max_len" => m.max_len.to_string(),
            "dropout" => m.dropout.to_string(),
            "task" => m.task.to_string(),
            "num_labels" => m.num_labels.to_string(),
            "max_answer_len" => m.max_answer_len.to_string(),
            "null_threshold" => m.null_threshold.to_string(),
            "seed" => m.seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_encoder" => t.lr_encoder.to_string(),
            "lr_other" => t.lr_other.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            _ => unreachable!("key list out of sync: {key}"),
        }
    }

    /// Every key with its resolved value, sorted by key.
    pub fn canonical_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k)))
            .collect()
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if t.lr_encoder < 0.0 || t.lr_other < 0.0 || t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return Err(ConfigError::Invalid(
                "learning rates, weight decay and grad_clip must be non-negative".into(),
            ));
        }
        Ok(())
    }
}
