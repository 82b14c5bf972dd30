//! Declarative experiment configuration.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, keys are
//! dotted lowercase paths (`section.key`). Unknown keys are rejected with
//! the offending line number. Every command echoes the fully resolved
//! configuration (all defaults filled in, full float precision) next to its
//! outputs, and re-running from that artifact reproduces the outputs byte
//! for byte.
//!
//! Keys accepting `auto`:
//! * `sampler.proposal_std = auto` → 0.5·√T per ladder temperature
//! * `finetune.mode_threshold = auto` → the saddle point of the well term
//! * `pretrain.iters = auto` → finetune.iters / 10

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::losses::{LossConfig, LossKind};
use crate::sampler::PtConfig;
use crate::targets::{DoubleWell, TargetError};
use crate::trainer::OptimizerKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: malformed line (expected key = value): {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: bad value for {key}: {value:?} ({expected})")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProposalStd {
    Auto,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModeThreshold {
    Auto,
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PretrainIters {
    Auto,
    Explicit(usize),
}

/// Fully specified experiment: target, model, sampler, and both training
/// phases.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,

    pub target_dim: usize,
    pub target_a: f64,
    pub target_b: f64,
    pub target_c: f64,
    pub target_sigma_wide: f64,
    pub target_cap_threshold: f64,

    pub model_blocks: usize,
    pub model_hidden: usize,
    pub model_sigma: f64,
    pub model_scale_clamp: f64,
    pub model_celu_alpha: f64,

    pub sampler_temperatures: Vec<f64>,
    pub sampler_steps_per_exchange: usize,
    pub sampler_proposal_std: ProposalStd,
    pub sampler_total_samples: usize,
    pub sampler_burn_in: usize,
    pub sampler_thinning: usize,
    pub sampler_format: DataFormat,

    pub pretrain_iters: PretrainIters,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_optimizer: OptimizerKind,
    pub pretrain_eval_every: usize,
    pub pretrain_n_eval: usize,
    /// Fraction of the (resolved) pre-training iterations actually run;
    /// < 1 gives the partial pre-training runs.
    pub pretrain_fraction: f64,

    pub finetune_iters: usize,
    pub finetune_batch_size: usize,
    pub finetune_learning_rate: f64,
    pub finetune_optimizer: OptimizerKind,
    pub finetune_loss: LossKind,
    pub finetune_detach_k: bool,
    pub finetune_mask: bool,
    pub finetune_self_normalize: bool,
    pub finetune_trick_enabled: bool,
    pub finetune_eval_every: usize,
    pub finetune_n_eval: usize,
    pub finetune_mode_threshold: ModeThreshold,

    pub eval_n: usize,
    pub eval_bins: usize,

    pub pitfall_grid_points: usize,
    pub pitfall_t_horizon: f64,
    pub pitfall_dt: f64,
    pub pitfall_trials: usize,
    pub pitfall_steps: usize,
    pub pitfall_learning_rate: f64,
    pub pitfall_states: usize,
    pub pitfall_batch_size: usize,
    pub pitfall_minibatches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Text,
    Binary,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 20240601,
            output_dir: "out".into(),

            target_dim: 12,
            target_a: 1.0,
            target_b: 6.0,
            target_c: 1.0,
            target_sigma_wide: 10.0,
            target_cap_threshold: f64::INFINITY,

            model_blocks: 32,
            model_hidden: 64,
            model_sigma: 1.0,
            model_scale_clamp: 4.0,
            model_celu_alpha: 1.0,

            sampler_temperatures: (0..6).map(|i| 10f64.powf(i as f64 / 5.0)).collect(),
            sampler_steps_per_exchange: 10,
            sampler_proposal_std: ProposalStd::Auto,
            sampler_total_samples: 100_000,
            sampler_burn_in: 10_000,
            sampler_thinning: 5,
            sampler_format: DataFormat::Text,

            pretrain_iters: PretrainIters::Auto,
            pretrain_batch_size: 256,
            pretrain_learning_rate: 1e-3,
            pretrain_optimizer: OptimizerKind::default_adam(),
            pretrain_eval_every: 100,
            pretrain_n_eval: 4096,
            pretrain_fraction: 1.0,

            finetune_iters: 20_000,
            finetune_batch_size: 256,
            finetune_learning_rate: 1e-4,
            finetune_optimizer: OptimizerKind::default_adam(),
            finetune_loss: LossKind::L2Masked,
            finetune_detach_k: true,
            finetune_mask: true,
            finetune_self_normalize: true,
            finetune_trick_enabled: false,
            finetune_eval_every: 100,
            finetune_n_eval: 4096,
            finetune_mode_threshold: ModeThreshold::Auto,

            eval_n: 10_000,
            eval_bins: 64,

            pitfall_grid_points: 64,
            pitfall_t_horizon: 10.0,
            pitfall_dt: 1e-3,
            pitfall_trials: 10_000,
            pitfall_steps: 50,
            pitfall_learning_rate: 1e-3,
            pitfall_states: 8,
            pitfall_batch_size: 2,
            pitfall_minibatches: 100_000,
        }
    }
}

fn parse_optimizer(
    line: usize,
    key: &str,
    value: &str,
) -> Result<OptimizerKind, ConfigError> {
    match value {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::default_adam()),
        _ => Err(ConfigError::BadValue {
            line,
            key: key.into(),
            value: value.into(),
            expected: "sgd or adam",
        }),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |expected: &'static str| ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            expected,
        };
        macro_rules! num {
            ($t:ty, $e:literal) => {
                value.parse::<$t>().map_err(|_| bad($e))
            };
        }
        let parse_bool = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("true or false")),
        };
        let parse_f64_list = || -> Result<Vec<f64>, ConfigError> {
            value
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| bad("comma-separated reals")))
                .collect()
        };
        match key {
            "seed" => self.seed = num!(u64, "unsigned integer")?,
            "output_dir" => self.output_dir = value.to_string(),

            "target.kind" => {
                if value != "double_well" {
                    return Err(bad("double_well"));
                }
            }
            "target.dim" => self.target_dim = num!(usize, "positive integer")?,
            "target.a" => self.target_a = num!(f64, "real")?,
            "target.b" => self.target_b = num!(f64, "real")?,
            "target.c" => self.target_c = num!(f64, "real")?,
            "target.sigma_wide" => self.target_sigma_wide = num!(f64, "positive real")?,
            "target.cap_threshold" => {
                self.target_cap_threshold = if value == "inf" {
                    f64::INFINITY
                } else {
                    num!(f64, "positive real or inf")?
                }
            }

            "model.blocks" => self.model_blocks = num!(usize, "positive integer")?,
            "model.hidden" => self.model_hidden = num!(usize, "positive integer")?,
            "model.sigma" => self.model_sigma = num!(f64, "positive real")?,
            "model.scale_clamp" => self.model_scale_clamp = num!(f64, "positive real")?,
            "model.celu_alpha" => self.model_celu_alpha = num!(f64, "positive real")?,

            "sampler.temperatures" => self.sampler_temperatures = parse_f64_list()?,
            "sampler.steps_per_exchange" => {
                self.sampler_steps_per_exchange = num!(usize, "integer")?
            }
            "sampler.proposal_std" => {
                self.sampler_proposal_std = if value == "auto" {
                    ProposalStd::Auto
                } else {
                    ProposalStd::Explicit(parse_f64_list()?)
                }
            }
            "sampler.total_samples" => self.sampler_total_samples = num!(usize, "integer")?,
            "sampler.burn_in" => self.sampler_burn_in = num!(usize, "integer")?,
            "sampler.thinning" => self.sampler_thinning = num!(usize, "positive integer")?,
            "sampler.format" => {
                self.sampler_format = match value {
                    "text" => DataFormat::Text,
                    "binary" => DataFormat::Binary,
                    _ => return Err(bad("text or binary")),
                }
            }

            "pretrain.iters" => {
                self.pretrain_iters = if value == "auto" {
                    PretrainIters::Auto
                } else {
                    PretrainIters::Explicit(num!(usize, "integer or auto")?)
                }
            }
            "pretrain.batch_size" => self.pretrain_batch_size = num!(usize, "positive integer")?,
            "pretrain.learning_rate" => self.pretrain_learning_rate = num!(f64, "positive real")?,
            "pretrain.optimizer" => {
                self.pretrain_optimizer = parse_optimizer(line, key, value)?
            }
            "pretrain.eval_every" => self.pretrain_eval_every = num!(usize, "positive integer")?,
            "pretrain.n_eval" => self.pretrain_n_eval = num!(usize, "integer ≥ 1000")?,
            "pretrain.fraction" => self.pretrain_fraction = num!(f64, "fraction in (0, 1]")?,

            "finetune.iters" => self.finetune_iters = num!(usize, "integer")?,
            "finetune.batch_size" => self.finetune_batch_size = num!(usize, "positive integer")?,
            "finetune.learning_rate" => self.finetune_learning_rate = num!(f64, "positive real")?,
            "finetune.optimizer" => {
                self.finetune_optimizer = parse_optimizer(line, key, value)?
            }
            "finetune.loss" => {
                self.finetune_loss = LossKind::parse(value).ok_or_else(|| bad("klz|klx|klz_df|l2_masked"))?
            }
            "finetune.l2.detach_k" => self.finetune_detach_k = parse_bool()?,
            "finetune.l2.mask" => self.finetune_mask = parse_bool()?,
            "finetune.klz_df.self_normalize" => self.finetune_self_normalize = parse_bool()?,
            "finetune.trick.enabled" => self.finetune_trick_enabled = parse_bool()?,
            "finetune.eval_every" => self.finetune_eval_every = num!(usize, "positive integer")?,
            "finetune.n_eval" => self.finetune_n_eval = num!(usize, "integer ≥ 1000")?,
            "finetune.mode_threshold" => {
                self.finetune_mode_threshold = if value == "auto" {
                    ModeThreshold::Auto
                } else {
                    ModeThreshold::Explicit(num!(f64, "real or auto")?)
                }
            }

            "eval.n" => self.eval_n = num!(usize, "integer ≥ 1000")?,
            "eval.bins" => self.eval_bins = num!(usize, "positive integer")?,

            "pitfall.grid_points" => self.pitfall_grid_points = num!(usize, "positive integer")?,
            "pitfall.t_horizon" => self.pitfall_t_horizon = num!(f64, "positive real")?,
            "pitfall.dt" => self.pitfall_dt = num!(f64, "positive real")?,
            "pitfall.trials" => self.pitfall_trials = num!(usize, "positive integer")?,
            "pitfall.steps" => self.pitfall_steps = num!(usize, "positive integer")?,
            "pitfall.learning_rate" => self.pitfall_learning_rate = num!(f64, "positive real")?,
            "pitfall.states" => self.pitfall_states = num!(usize, "positive integer")?,
            "pitfall.batch_size" => self.pitfall_batch_size = num!(usize, "positive integer")?,
            "pitfall.minibatches" => self.pitfall_minibatches = num!(usize, "positive integer")?,

            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.target_dim < 2 {
            return Err(ConfigError::Invalid("target.dim must be ≥ 2".into()));
        }
        if self.model_blocks == 0 || self.model_hidden == 0 {
            return Err(ConfigError::Invalid(
                "model.blocks and model.hidden must be ≥ 1".into(),
            ));
        }
        if !(self.model_sigma > 0.0) {
            return Err(ConfigError::Invalid("model.sigma must be > 0".into()));
        }
        if !(self.pretrain_fraction > 0.0 && self.pretrain_fraction <= 1.0) {
            return Err(ConfigError::Invalid(
                "pretrain.fraction must be in (0, 1]".into(),
            ));
        }
        if !(self.pretrain_learning_rate > 0.0 && self.finetune_learning_rate > 0.0) {
            return Err(ConfigError::Invalid("learning rates must be > 0".into()));
        }
        Ok(())
    }

    // ── Resolution into runtime objects ──────────────────────────────

    pub fn build_target(&self) -> Result<DoubleWell, ConfigError> {
        let dw = DoubleWell::with_coefficients(
            self.target_dim,
            self.target_a,
            self.target_b,
            self.target_c,
            self.target_sigma_wide,
        )
        .with_cap(self.target_cap_threshold)?;
        Ok(dw)
    }

    pub fn flow_config(&self) -> crate::flow::FlowConfig {
        crate::flow::FlowConfig {
            dim: self.target_dim,
            blocks: self.model_blocks,
            hidden: self.model_hidden,
            sigma: self.model_sigma,
            scale_clamp: self.model_scale_clamp,
            celu_alpha: self.model_celu_alpha,
        }
    }

    pub fn resolved_proposal_std(&self) -> Vec<f64> {
        match &self.sampler_proposal_std {
            ProposalStd::Auto => self
                .sampler_temperatures
                .iter()
                .map(|t| 0.5 * t.sqrt())
                .collect(),
            ProposalStd::Explicit(v) => v.clone(),
        }
    }

    pub fn pt_config(&self) -> PtConfig {
        PtConfig {
            temperatures: self.sampler_temperatures.clone(),
            steps_per_exchange: self.sampler_steps_per_exchange,
            proposal_std: self.resolved_proposal_std(),
            total_samples: self.sampler_total_samples,
            burn_in: self.sampler_burn_in,
            thinning: self.sampler_thinning,
            seed: self.seed,
        }
    }

    pub fn resolved_pretrain_iters(&self) -> usize {
        let full = match self.pretrain_iters {
            PretrainIters::Auto => self.finetune_iters / 10,
            PretrainIters::Explicit(n) => n,
        };
        ((full as f64 * self.pretrain_fraction).round() as usize).max(1)
    }

    pub fn resolved_mode_threshold(&self) -> Result<f64, ConfigError> {
        match self.finetune_mode_threshold {
            ModeThreshold::Explicit(v) => Ok(v),
            ModeThreshold::Auto => {
                let dw = DoubleWell::with_coefficients(
                    self.target_dim,
                    self.target_a,
                    self.target_b,
                    self.target_c,
                    self.target_sigma_wide,
                );
                Ok(dw.extrema().saddle)
            }
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.finetune_loss,
            detach_k: self.finetune_detach_k,
            apply_mask: self.finetune_mask,
            self_normalize: self.finetune_self_normalize,
        }
    }

    /// Canonical echo of every key with full precision; parsing this text
    /// reproduces the config exactly.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let f = |v: f64| {
            if v == f64::INFINITY {
                "inf".to_string()
            } else {
                format!("{v}")
            }
        };
        let opt = |o: OptimizerKind| match o {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "output_dir = {}", self.output_dir);
        let _ = writeln!(s, "target.kind = double_well");
        let _ = writeln!(s, "target.dim = {}", self.target_dim);
        let _ = writeln!(s, "target.a = {}", f(self.target_a));
        let _ = writeln!(s, "target.b = {}", f(self.target_b));
        let _ = writeln!(s, "target.c = {}", f(self.target_c));
        let _ = writeln!(s, "target.sigma_wide = {}", f(self.target_sigma_wide));
        let _ = writeln!(s, "target.cap_threshold = {}", f(self.target_cap_threshold));
        let _ = writeln!(s, "model.blocks = {}", self.model_blocks);
        let _ = writeln!(s, "model.hidden = {}", self.model_hidden);
        let _ = writeln!(s, "model.sigma = {}", f(self.model_sigma));
        let _ = writeln!(s, "model.scale_clamp = {}", f(self.model_scale_clamp));
        let _ = writeln!(s, "model.celu_alpha = {}", f(self.model_celu_alpha));
        let temps: Vec<String> = self.sampler_temperatures.iter().map(|t| f(*t)).collect();
        let _ = writeln!(s, "sampler.temperatures = {}", temps.join(","));
        let _ = writeln!(
            s,
            "sampler.steps_per_exchange = {}",
            self.sampler_steps_per_exchange
        );
        let stds: Vec<String> = self.resolved_proposal_std().iter().map(|t| f(*t)).collect();
        let _ = writeln!(s, "sampler.proposal_std = {}", stds.join(","));
        let _ = writeln!(s, "sampler.total_samples = {}", self.sampler_total_samples);
        let _ = writeln!(s, "sampler.burn_in = {}", self.sampler_burn_in);
        let _ = writeln!(s, "sampler.thinning = {}", self.sampler_thinning);
        let _ = writeln!(
            s,
            "sampler.format = {}",
            match self.sampler_format {
                DataFormat::Text => "text",
                DataFormat::Binary => "binary",
            }
        );
        let _ = writeln!(s, "pretrain.iters = {}", self.resolved_pretrain_iters());
        let _ = writeln!(s, "pretrain.batch_size = {}", self.pretrain_batch_size);
        let _ = writeln!(
            s,
            "pretrain.learning_rate = {}",
            f(self.pretrain_learning_rate)
        );
        let _ = writeln!(s, "pretrain.optimizer = {}", opt(self.pretrain_optimizer));
        let _ = writeln!(s, "pretrain.eval_every = {}", self.pretrain_eval_every);
        let _ = writeln!(s, "pretrain.n_eval = {}", self.pretrain_n_eval);
        let _ = writeln!(s, "pretrain.fraction = {}", f(self.pretrain_fraction));
        let _ = writeln!(s, "finetune.iters = {}", self.finetune_iters);
        let _ = writeln!(s, "finetune.batch_size = {}", self.finetune_batch_size);
        let _ = writeln!(
            s,
            "finetune.learning_rate = {}",
            f(self.finetune_learning_rate)
        );
        let _ = writeln!(s, "finetune.optimizer = {}", opt(self.finetune_optimizer));
        let _ = writeln!(s, "finetune.loss = {}", self.finetune_loss.name());
        let _ = writeln!(s, "finetune.l2.detach_k = {}", self.finetune_detach_k);
        let _ = writeln!(s, "finetune.l2.mask = {}", self.finetune_mask);
        let _ = writeln!(
            s,
            "finetune.klz_df.self_normalize = {}",
            self.finetune_self_normalize
        );
        let _ = writeln!(
            s,
            "finetune.trick.enabled = {}",
            self.finetune_trick_enabled
        );
        let _ = writeln!(s, "finetune.eval_every = {}", self.finetune_eval_every);
        let _ = writeln!(s, "finetune.n_eval = {}", self.finetune_n_eval);
        let threshold = match self.finetune_mode_threshold {
            ModeThreshold::Auto => self
                .resolved_mode_threshold()
                .map(f)
                .unwrap_or_else(|_| "auto".into()),
            ModeThreshold::Explicit(v) => f(v),
        };
        let _ = writeln!(s, "finetune.mode_threshold = {threshold}");
        let _ = writeln!(s, "eval.n = {}", self.eval_n);
        let _ = writeln!(s, "eval.bins = {}", self.eval_bins);
        let _ = writeln!(s, "pitfall.grid_points = {}", self.pitfall_grid_points);
        let _ = writeln!(s, "pitfall.t_horizon = {}", f(self.pitfall_t_horizon));
        let _ = writeln!(s, "pitfall.dt = {}", f(self.pitfall_dt));
        let _ = writeln!(s, "pitfall.trials = {}", self.pitfall_trials);
        let _ = writeln!(s, "pitfall.steps = {}", self.pitfall_steps);
        let _ = writeln!(
            s,
            "pitfall.learning_rate = {}",
            f(self.pitfall_learning_rate)
        );
        let _ = writeln!(s, "pitfall.states = {}", self.pitfall_states);
        let _ = writeln!(s, "pitfall.batch_size = {}", self.pitfall_batch_size);
        let _ = writeln!(s, "pitfall.minibatches = {}", self.pitfall_minibatches);
        s
    }
}
