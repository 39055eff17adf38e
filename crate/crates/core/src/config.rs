//! Experiment configuration and its `key = value` file format.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::optim::AdamConfig;
use crate::schedule::ScheduleConfig;
use crate::teacher::{TrainConfig, TrainMode, EMA_ALPHA_EARLY, EMA_ALPHA_LATE};
use crate::unet::UNetConfig;

/// Size of the generated corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusConfig {
    pub n_subjects: u32,
    pub slices_per_subject: u32,
    pub image_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            slices_per_subject: 10,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub mode: TrainMode,
    pub adaptation_domain: u8,
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub consistency: LossKind,
    /// `None` picks the mode's default threshold.
    pub threshold: Option<f64>,
    pub ema_alpha_early: f64,
    pub ema_alpha_late: f64,
    pub augment: bool,
    pub corpus: CorpusConfig,
    pub repeats: u32,
    pub sweep_weights: Vec<f64>,
    pub sweep_losses: Vec<LossKind>,
}

impl Default for ExperimentConfig {
    /// Full-scale settings: 350 epochs with a 50-epoch ramp-up.
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            mode: TrainMode::Adapt,
            adaptation_domain: 4,
            model: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 12,
            adam: AdamConfig::default(),
            consistency: LossKind::Mse,
            threshold: None,
            ema_alpha_early: EMA_ALPHA_EARLY,
            ema_alpha_late: EMA_ALPHA_LATE,
            augment: true,
            corpus: CorpusConfig::default(),
            repeats: 1,
            sweep_weights: vec![5.0, 10.0, 15.0, 20.0],
            sweep_losses: vec![LossKind::Mse, LossKind::Dice, LossKind::CrossEntropy],
        }
    }
}

/// Every key accepted in a config file, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "data_dir",
    "out_dir",
    "mode",
    "adaptation_domain",
    "depth",
    "base_channels",
    "groups",
    "dropout",
    "alpha_lr",
    "rampup_epochs",
    "total_epochs",
    "gamma_max",
    "batch_size",
    "l2_lambda",
    "beta1",
    "beta2",
    "adam_eps",
    "consistency_loss",
    "threshold",
    "ema_alpha_early",
    "ema_alpha_late",
    "augment",
    "n_subjects",
    "slices_per_subject",
    "image_size",
    "repeats",
    "sweep_weights",
    "sweep_losses",
];

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| f(p.trim())).collect()
}

fn loss_name(kind: &LossKind) -> String {
    match kind {
        LossKind::Tversky { alpha, beta } => format!("tversky:{alpha}:{beta}"),
        other => other.to_string(),
    }
}

fn parse_loss(v: &str) -> std::result::Result<LossKind, String> {
    if let Some(rest) = v.strip_prefix("tversky:") {
        let (a, b) = rest.split_once(':').ok_or_else(|| format!("expected tversky:<alpha>:<beta>, got {v:?}"))?;
        return LossKind::tversky(parse_num(a)?, parse_num(b)?).map_err(|e| e.to_string());
    }
    v.parse().map_err(|e: Error| e.to_string())
}

impl ExperimentConfig {
    /// Desk-scale settings: 60 epochs with a 15-epoch ramp-up.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.schedule.total_epochs = 60;
        c.schedule.rampup_epochs = 15;
        c
    }

    pub fn threshold_or_default(&self) -> f64 {
        self.threshold.unwrap_or_else(|| self.mode.default_threshold())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Config { line: 0, detail });
        self.model.validate()?;
        self.schedule.validate()?;
        self.adam.validate()?;
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch_size {} must be even and at least 2", self.batch_size));
        }
        if self.adaptation_domain != 3 && self.adaptation_domain != 4 {
            return bad(format!("adaptation_domain must be 3 or 4, got {}", self.adaptation_domain));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("threshold {t} outside (0, 1)"));
            }
        }
        for a in [self.ema_alpha_early, self.ema_alpha_late] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("EMA alpha {a} outside [0, 1]"));
            }
        }
        if !self.corpus.image_size.is_multiple_of(self.model.size_multiple()) {
            return bad(format!(
                "image_size {} not divisible by {}",
                self.corpus.image_size,
                self.model.size_multiple()
            ));
        }
        if self.corpus.n_subjects < 2 || self.corpus.slices_per_subject == 0 {
            return bad("corpus needs at least 2 subjects and 1 slice per subject".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be positive".into());
        }
        if self.sweep_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("sweep weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            mode: self.mode,
            schedule: self.schedule,
            adam: self.adam,
            batch_size: self.batch_size,
            consistency: self.consistency,
            ema_alpha_early: self.ema_alpha_early,
            ema_alpha_late: self.ema_alpha_late,
            augment: self.augment,
            threshold: self.threshold_or_default(),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "mode" => self.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "adaptation_domain" => self.adaptation_domain = parse_num(v)?,
            "depth" => self.model.depth = parse_num(v)?,
            "base_channels" => self.model.base_channels = parse_num(v)?,
            "groups" => self.model.groups = parse_num(v)?,
            "dropout" => self.model.dropout_rate = parse_num(v)?,
            "alpha_lr" => self.schedule.alpha_lr = parse_num(v)?,
            "rampup_epochs" => self.schedule.rampup_epochs = parse_num(v)?,
            "total_epochs" => self.schedule.total_epochs = parse_num(v)?,
            "gamma_max" => self.schedule.gamma_max = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "l2_lambda" => self.adam.l2_lambda = parse_num(v)?,
            "beta1" => self.adam.beta1 = parse_num(v)?,
            "beta2" => self.adam.beta2 = parse_num(v)?,
            "adam_eps" => self.adam.eps = parse_num(v)?,
            "consistency_loss" => self.consistency = parse_loss(v)?,
            "threshold" => self.threshold = if v == "auto" { None } else { Some(parse_num(v)?) },
            "ema_alpha_early" => self.ema_alpha_early = parse_num(v)?,
            "ema_alpha_late" => self.ema_alpha_late = parse_num(v)?,
            "augment" => self.augment = parse_bool(v)?,
            "n_subjects" => self.corpus.n_subjects = parse_num(v)?,
            "slices_per_subject" => self.corpus.slices_per_subject = parse_num(v)?,
            "image_size" => self.corpus.image_size = parse_num(v)?,
            "repeats" => self.repeats = parse_num(v)?,
            "sweep_weights" => self.sweep_weights = parse_list(v, parse_num)?,
            "sweep_losses" => self.sweep_losses = parse_list(v, parse_loss)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses a config file. Keys not present keep their full-scale
    /// defaults; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    /// Like [`parse`](Self::parse) but starting from `base`.
    pub fn parse_over(base: Self, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split_once('#').map_or(raw, |(c, _)| c).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                detail: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    detail: format!("duplicate key {key:?}"),
                });
            }
            cfg.set(key, value).map_err(|detail| Error::Config { line, detail })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every field; `parse(&c.to_text()) == c`.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let losses = self.sweep_losses.iter().map(loss_name).collect::<Vec<_>>().join(",");
        let threshold = self.threshold.map_or("auto".to_string(), |t| t.to_string());
        let values: [String; 29] = [
            self.seed.to_string(),
            self.data_dir.display().to_string(),
            self.out_dir.display().to_string(),
            self.mode.to_string(),
            self.adaptation_domain.to_string(),
            self.model.depth.to_string(),
            self.model.base_channels.to_string(),
            self.model.groups.to_string(),
            self.model.dropout_rate.to_string(),
            self.schedule.alpha_lr.to_string(),
            self.schedule.rampup_epochs.to_string(),
            self.schedule.total_epochs.to_string(),
            self.schedule.gamma_max.to_string(),
            self.batch_size.to_string(),
            self.adam.l2_lambda.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            loss_name(&self.consistency),
            threshold,
            self.ema_alpha_early.to_string(),
            self.ema_alpha_late.to_string(),
            self.augment.to_string(),
            self.corpus.n_subjects.to_string(),
            self.corpus.slices_per_subject.to_string(),
            self.corpus.image_size.to_string(),
            self.repeats.to_string(),
            list(&self.sweep_weights),
            losses,
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Fields that distinguish a baseline run from an adaptation run with
    /// the same hyperparameters.
    pub fn differs_only_in_protocol(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            mode: TrainMode::Baseline,
            adaptation_domain: 4,
            consistency: LossKind::Mse,
            threshold: None,
            out_dir: PathBuf::new(),
            schedule: ScheduleConfig { gamma_max: 0.0, ..c.schedule },
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}
