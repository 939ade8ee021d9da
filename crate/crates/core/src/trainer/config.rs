use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mixing::Strategy;
use crate::model::DEFAULT_WIDTHS;
use crate::teacher::{DEFAULT_ALPHA, DEFAULT_TAU};

/// Element type used for training arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Independent on/off switches for the four loss streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSwitches {
    pub use_ls: bool,
    pub use_lt: bool,
    pub use_inter: bool,
    pub use_intra: bool,
}

impl LossSwitches {
    pub const ALL: LossSwitches = LossSwitches { use_ls: true, use_lt: true, use_inter: true, use_intra: true };

    pub fn mixing(&self) -> bool {
        self.use_inter || self.use_intra
    }
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

/// Every training hyperparameter and ablation switch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub n_src: usize,
    pub n_lbl_tgt: usize,
    pub n_unl_tgt: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    /// `None` means 5% of `iters`.
    pub warmup_iters: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
    pub strategy: Strategy,
    pub switches: LossSwitches,
    pub seed: u64,
    pub eval_every: usize,
    pub widths: Vec<usize>,
    pub class_balanced: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            n_src: 2,
            n_lbl_tgt: 2,
            n_unl_tgt: 2,
            lr_encoder: 3e-4,
            lr_head: 3e-3,
            warmup_iters: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            lambda: 1.0,
            mu: 2.0,
            strategy: Strategy::OneXuTwoStreams,
            switches: LossSwitches::ALL,
            seed: 0,
            eval_every: 500,
            widths: DEFAULT_WIDTHS.to_vec(),
            class_balanced: false,
            precision: Precision::F32,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "iters",
    "n_src",
    "n_lbl_tgt",
    "n_unl_tgt",
    "lr_encoder",
    "lr_head",
    "warmup_iters",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "alpha",
    "tau",
    "lambda",
    "mu",
    "strategy",
    "use_ls",
    "use_lt",
    "use_inter",
    "use_intra",
    "seed",
    "eval_every",
    "widths",
    "class_balanced",
    "precision",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_iters.unwrap_or(self.iters / 20)
    }

    /// Applies one `key = value` setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "iters" => self.iters = parse(key, v)?,
            "n_src" => self.n_src = parse(key, v)?,
            "n_lbl_tgt" => self.n_lbl_tgt = parse(key, v)?,
            "n_unl_tgt" => self.n_unl_tgt = parse(key, v)?,
            "lr_encoder" => self.lr_encoder = parse(key, v)?,
            "lr_head" => self.lr_head = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = if v == "auto" { None } else { Some(parse(key, v)?) },
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "mu" => self.mu = parse(key, v)?,
            "strategy" => {
                self.strategy = Strategy::parse(v).ok_or_else(|| Error::Config(format!("strategy: unknown value {v:?}")))?
            }
            "use_ls" => self.switches.use_ls = parse_bool(key, v)?,
            "use_lt" => self.switches.use_lt = parse_bool(key, v)?,
            "use_inter" => self.switches.use_inter = parse_bool(key, v)?,
            "use_intra" => self.switches.use_intra = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "widths" => self.widths = v.split(',').map(|w| parse(key, w)).collect::<Result<_>>()?,
            "class_balanced" => self.class_balanced = parse_bool(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// `key = value` lines for every field, with warmup resolved.
    pub fn to_kv(&self) -> String {
        let s = &self.switches;
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let values: Vec<String> = vec![
            self.iters.to_string(),
            self.n_src.to_string(),
            self.n_lbl_tgt.to_string(),
            self.n_unl_tgt.to_string(),
            self.lr_encoder.to_string(),
            self.lr_head.to_string(),
            self.warmup().to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.adam_eps.to_string(),
            self.weight_decay.to_string(),
            self.alpha.to_string(),
            self.tau.to_string(),
            self.lambda.to_string(),
            self.mu.to_string(),
            self.strategy.name().to_string(),
            s.use_ls.to_string(),
            s.use_lt.to_string(),
            s.use_inter.to_string(),
            s.use_intra.to_string(),
            self.seed.to_string(),
            self.eval_every.to_string(),
            widths.join(","),
            self.class_balanced.to_string(),
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (key, value) in kv_pairs(text)? {
            config.set(&key, &value)?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_encoder > 0.0 && self.lr_head > 0.0) {
            return bad(format!("learning rates must be positive, got {} / {}", self.lr_encoder, self.lr_head));
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return bad(format!("loss weights must be non-negative, got lambda={} mu={}", self.lambda, self.mu));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return bad("optimizer settings out of range".into());
        }
        if !(0.0..1.0).contains(&self.alpha) || !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("alpha must lie in [0, 1) and tau in (0, 1), got {} / {}", self.alpha, self.tau));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        let s = &self.switches;
        if !(s.use_ls || s.use_lt || s.use_inter || s.use_intra) {
            return bad("at least one loss stream must be enabled".into());
        }
        if (s.use_ls && self.n_src == 0) || (s.use_lt && self.n_lbl_tgt == 0) {
            return bad("an enabled supervised stream has a zero batch size".into());
        }
        if s.mixing() && (self.n_unl_tgt == 0 || self.n_src == 0 || self.n_lbl_tgt == 0) {
            return bad("mixing needs source, labeled-target and unlabeled-target batch slots".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a non-empty list of positive integers".into());
        }
        Ok(())
    }
}

/// Splits config text into trimmed `(key, value)` pairs.
pub fn kv_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
