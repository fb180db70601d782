//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! or repeated keys are rejected with the offending line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use driftbench_core::cda::AlphaPolicy;
use driftbench_core::engine::{EngineConfig, Mode, PretrainConfig};
use driftbench_core::model::{OptimizerConfig, OptimizerKind};
use driftbench_core::rfp::RfpConfig;
use driftbench_core::stream::{Preset, PresetParams};

use crate::error::{CliError, ConfigError};

pub const KEYS: &[&str] = &[
    "engine.mode",
    "engine.alpha",
    "engine.restore_prob",
    "engine.student_dropout",
    "rfp.n_passes",
    "rfp.gamma",
    "rfp.tau",
    "rfp.dropout",
    "cda.k",
    "cda.alpha_policy",
    "cda.alpha_bound",
    "cda.kappa",
    "optim.kind",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "model.hidden",
    "model.checkpoint",
    "pretrain.steps",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.dropout",
    "stream.preset",
    "stream.steps_per_domain",
    "stream.batch_size",
    "stream.dim",
    "stream.classes",
    "stream.separation",
    "stream.cov_scale",
    "stream.max_shift",
    "stream.max_rotation",
    "stream.max_noise_growth",
    "stream.label_noise",
    "stream.shuffle",
    "run.seeds",
    "run.modes",
    "run.jobs",
    "output.dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Shared engine settings; `mode` and `master_seed` are set per run.
    pub engine: EngineConfig,
    pub modes: Vec<Mode>,
    pub hidden: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub preset: Preset,
    pub geometry: PresetParams,
    pub steps_per_domain: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_str("").expect("defaults are valid")
    }
}

struct Entry<'a> {
    line: usize,
    value: &'a str,
}

struct Reader<'a> {
    entries: BTreeMap<&'a str, Entry<'a>>,
}

impl<'a> Reader<'a> {
    fn raw(&self, key: &str) -> Option<(&'a str, usize)> {
        self.entries.get(key).map(|e| (e.value, e.line))
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::new(key, self.entries.get(key).map(|e| e.line), msg)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T, what: &str) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, _)) => v
                .parse()
                .map_err(|_| self.err(key, format!("expected {what}, got {v:?}"))),
        }
    }

    fn float(&self, key: &str, default: f64, ok: impl Fn(f64) -> bool, range: &str) -> Result<f64, ConfigError> {
        let v = self.parsed(key, default, "a number")?;
        if !ok(v) {
            return Err(self.err(key, format!("{v} out of range (expected {range})")));
        }
        Ok(v)
    }

    fn count(&self, key: &str, default: usize, min: usize) -> Result<usize, ConfigError> {
        let v = self.parsed(key, default, "a nonnegative integer")?;
        if v < min {
            return Err(self.err(key, format!("{v} out of range (expected >= {min})")));
        }
        Ok(v)
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Parses a mode name. Bare `fixed_alpha` takes its weight from `alpha`.
pub fn parse_mode(s: &str, alpha: Option<f64>) -> Result<Mode, String> {
    if s.trim() == "fixed_alpha" {
        return match alpha {
            Some(a) => {
                let m = Mode::FixedAlpha(a);
                m.validate().map_err(|e| e.to_string())?;
                Ok(m)
            }
            None => Err("fixed_alpha needs a weight: set engine.alpha or write fixed_alpha(a)".into()),
        };
    }
    Mode::parse(s).map_err(|e| e.to_string())
}

pub fn parse_seeds(v: &str) -> Result<Vec<u64>, String> {
    let seeds = split_list(v)
        .map(|s| s.parse::<u64>().map_err(|_| format!("seed {s:?} is not a nonnegative integer")))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err("at least one seed is required".into());
    }
    Ok(seeds)
}

pub fn parse_modes(v: &str, alpha: Option<f64>) -> Result<Vec<Mode>, String> {
    let modes = split_list(v)
        .map(|m| parse_mode(m, alpha))
        .collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err("at least one mode is required".into());
    }
    Ok(modes)
}

pub fn parse_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(parse_str(&text)?)
}

pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::new(content, Some(line), "expected `key = value`"));
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(ConfigError::new(key, Some(line), "unknown key"));
        }
        if let Some(prev) = entries.insert(key, Entry { line, value }) {
            return Err(ConfigError::new(key, Some(line), format!("already set on line {}", prev.line)));
        }
    }
    build(&Reader { entries })
}

fn build(r: &Reader) -> Result<RunConfig, ConfigError> {
    let unit = |v: f64| (0.0..1.0).contains(&v);
    let positive = |v: f64| v > 0.0 && v.is_finite();

    let alpha = match r.raw("engine.alpha") {
        None => None,
        Some(_) => Some(r.float("engine.alpha", 0.0, |v| (0.0..=1.0).contains(&v), "[0, 1]")?),
    };
    let mode = match r.raw("engine.mode") {
        None => Mode::CttaT,
        Some((v, _)) => parse_mode(v, alpha).map_err(|m| {
            if v.trim() == "fixed_alpha" {
                ConfigError::new("engine.alpha", None, "required when engine.mode = fixed_alpha")
            } else {
                r.err("engine.mode", m)
            }
        })?,
    };
    let modes = match r.raw("run.modes") {
        None => vec![mode],
        Some((v, _)) => parse_modes(v, alpha).map_err(|m| r.err("run.modes", m))?,
    };

    let rfp = RfpConfig {
        n_passes: r.count("rfp.n_passes", 8, 2)?,
        gamma: r.float("rfp.gamma", 0.4, positive, "> 0")?,
        tau: r.float("rfp.tau", 1.2, |v| v >= 0.0 && v.is_finite(), ">= 0")?,
        dropout_rate: r.float("rfp.dropout", 0.1, unit, "[0, 1)")?,
    };

    let alpha_bound = r.float("cda.alpha_bound", 0.99, |v| v > 0.0 && v < 1.0, "(0, 1)")?;
    let kappa = r.float("cda.kappa", 0.1, positive, "> 0")?;
    let alpha_policy = match r.raw("cda.alpha_policy").map(|(v, _)| v) {
        None | Some("linear_clamp") => AlphaPolicy::LinearClamp { alpha_bound },
        Some("exp_decay") => AlphaPolicy::ExpDecay { alpha_bound, kappa },
        Some(other) => {
            return Err(r.err(
                "cda.alpha_policy",
                format!("unknown policy {other:?} (expected linear_clamp or exp_decay)"),
            ))
        }
    };
    let k = match r.raw("cda.k").map(|(v, _)| v) {
        None | Some("auto") => None,
        Some(_) => Some(r.count("cda.k", 0, 1)?),
    };

    let kind = match r.raw("optim.kind").map(|(v, _)| v) {
        None | Some("adam") | Some("adamw") => OptimizerKind::Adam,
        Some("sgd") => OptimizerKind::Sgd,
        Some(other) => return Err(r.err("optim.kind", format!("unknown optimizer {other:?} (expected adam or sgd)"))),
    };
    let optimizer = OptimizerConfig {
        kind,
        lr: r.float("optim.lr", 1e-5, |v| v >= 0.0 && v.is_finite(), ">= 0")?,
        beta1: r.float("optim.beta1", 0.9, unit, "[0, 1)")?,
        beta2: r.float("optim.beta2", 0.999, unit, "[0, 1)")?,
        eps: r.float("optim.eps", 1e-8, positive, "> 0")?,
        weight_decay: r.float("optim.weight_decay", 0.0, |v| v >= 0.0 && v.is_finite(), ">= 0")?,
    };

    let engine = EngineConfig {
        mode,
        rfp,
        alpha_policy,
        restore_prob: r.float("engine.restore_prob", 0.01, |v| (0.0..=1.0).contains(&v), "[0, 1]")?,
        optimizer,
        student_dropout: r.float("engine.student_dropout", 0.1, unit, "[0, 1)")?,
        k,
        master_seed: 0,
    };

    let hidden = match r.count("model.hidden", 0, 0)? {
        0 => None,
        h => Some(h),
    };
    let checkpoint = r.raw("model.checkpoint").map(|(v, _)| PathBuf::from(v));
    let pretrain = PretrainConfig {
        steps: r.count("pretrain.steps", 300, 0)?,
        batch_size: r.count("pretrain.batch_size", 64, 1)?,
        lr: r.float("pretrain.lr", 0.05, |v| v >= 0.0 && v.is_finite(), ">= 0")?,
        dropout: r.float("pretrain.dropout", 0.1, unit, "[0, 1)")?,
    };

    let preset = match r.raw("stream.preset") {
        None => Preset::Long,
        Some((v, _)) => {
            Preset::parse(v).ok_or_else(|| r.err("stream.preset", format!("unknown preset {v:?} (expected short or long)")))?
        }
    };
    let geometry = PresetParams {
        dim: r.count("stream.dim", 16, 1)?,
        classes: r.count("stream.classes", 4, 2)?,
        separation: r.float("stream.separation", 3.0, positive, "> 0")?,
        cov_scale: r.float("stream.cov_scale", 1.0, positive, "> 0")?,
        max_shift: r.float("stream.max_shift", 3.0, |v| v >= 0.0 && v.is_finite(), ">= 0")?,
        max_rotation: r.float("stream.max_rotation", 0.8, f64::is_finite, "a finite angle")?,
        max_noise_growth: r.float("stream.max_noise_growth", 0.0, |v| v >= 0.0 && v.is_finite(), ">= 0")?,
        label_noise: r.float("stream.label_noise", 0.0, unit, "[0, 1)")?,
    };
    let tracked = hidden.unwrap_or(geometry.dim);
    if let Some(k) = k {
        if k > tracked {
            return Err(r.err("cda.k", format!("{k} exceeds the tracked feature dimension {tracked}")));
        }
    }

    let seeds = match r.raw("run.seeds") {
        None => vec![0],
        Some((v, _)) => parse_seeds(v).map_err(|m| r.err("run.seeds", m))?,
    };

    Ok(RunConfig {
        engine,
        modes,
        hidden,
        checkpoint,
        pretrain,
        preset,
        geometry,
        steps_per_domain: r.count("stream.steps_per_domain", 100, 1)?,
        batch_size: r.count("stream.batch_size", 16, 1)?,
        shuffle: r.parsed("stream.shuffle", false, "true or false")?,
        seeds,
        jobs: r.count("run.jobs", 1, 0)?,
        out_dir: PathBuf::from(r.raw("output.dir").map(|(v, _)| v).unwrap_or("out")),
    })
}
