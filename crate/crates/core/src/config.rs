//! Flat `key = value` run configuration.
//!
//! Values are layered: defaults, then a config file, then command-line
//! overrides. Every problem found is reported at once.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Result, SagpError};
use crate::model::ModelSpec;
use crate::sampler::PriorPreset;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ModelSpec,
    /// Miscoverage level of prediction intervals.
    pub alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spec: ModelSpec::default(),
            alpha: 0.05,
        }
    }
}

pub const KEYS: &[&str] = &[
    "m",
    "layers",
    "branching",
    "prior",
    "eta_shape",
    "alpha_eps",
    "beta_eps",
    "n_iter",
    "burn_in",
    "thin",
    "seed",
    "init_bandwidth",
    "adapt_every",
    "band_lo",
    "band_hi",
    "resample_every",
    "update_eta",
    "update_sigma2",
    "init_sigma2",
    "alpha",
];

/// Split `key = value` lines; blank lines and `#` comments are skipped.
/// Returns the pairs found along with a message per malformed line.
pub fn parse_pairs(text: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => problems.push(format!("line {}: expected key=value, got `{line}`", i + 1)),
        }
    }
    (pairs, problems)
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
}

fn optional<T: FromStr>(key: &str, value: &str) -> std::result::Result<Option<T>, String> {
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_sources(Some(text), &[])
    }

    /// Defaults, then `file` pairs, then `overrides`.
    pub fn from_sources(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut problems = Vec::new();
        let mut pairs = Vec::new();
        if let Some(text) = file {
            let (p, bad) = parse_pairs(text);
            pairs.extend(p);
            problems.extend(bad);
        }
        pairs.extend(overrides.iter().cloned());
        let mut cfg = RunConfig::default();
        for (k, v) in &pairs {
            if let Err(p) = cfg.set(k, v) {
                problems.push(p);
            }
        }
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(SagpError::Config(problems))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let s = &mut self.spec;
        match key {
            "m" => s.m = num(key, value)?,
            "layers" => s.n_layers = num(key, value)?,
            "branching" => {
                s.branching = value
                    .split([',', ';'])
                    .map(|b| num(key, b.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "prior" => s.preset = value.parse::<PriorPreset>().map_err(|e| e.to_string())?,
            "eta_shape" => s.eta_shape = optional(key, value)?,
            "alpha_eps" => s.alpha_eps = num(key, value)?,
            "beta_eps" => s.beta_eps = num(key, value)?,
            "n_iter" => s.mcmc.n_iter = num(key, value)?,
            "burn_in" => s.mcmc.burn_in = num(key, value)?,
            "thin" => s.mcmc.thin = num(key, value)?,
            "seed" => s.mcmc.seed = num(key, value)?,
            "init_bandwidth" => s.mcmc.init_bandwidth = optional(key, value)?,
            "adapt_every" => s.mcmc.adapt_every = optional(key, value)?,
            "band_lo" => s.mcmc.target_band.0 = num(key, value)?,
            "band_hi" => s.mcmc.target_band.1 = num(key, value)?,
            "resample_every" => s.mcmc.resample_every = num(key, value)?,
            "update_eta" => s.mcmc.update_eta = num(key, value)?,
            "update_sigma2" => s.mcmc.update_sigma2 = num(key, value)?,
            "init_sigma2" => s.mcmc.init_sigma2 = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Every violated constraint, empty when the configuration is usable.
    pub fn violations(&self) -> Vec<String> {
        let s = &self.spec;
        let mut out = Vec::new();
        if s.m == 0 {
            out.push("m must be at least 1".to_string());
        }
        if s.n_layers == 0 {
            out.push("layers must be at least 1".to_string());
        }
        if s.branching.is_empty() || s.branching.iter().any(|&b| b < 2) {
            out.push("branching factors must be at least 2".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            out.push(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        let mut errors = vec![s.mcmc.validate().err()];
        if s.n_layers > 0 {
            errors.push(s.priors().err());
        }
        for err in errors.into_iter().flatten() {
            match err {
                SagpError::Config(v) => out.extend(v),
                other => out.push(other.to_string()),
            }
        }
        out
    }

    /// Canonical text form; `from_text(to_text())` gives back the same value.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mc = &s.mcmc;
        let branching: Vec<String> = s.branching.iter().map(usize::to_string).collect();
        let values = [
            s.m.to_string(),
            s.n_layers.to_string(),
            branching.join(","),
            s.preset.to_string(),
            show_optional(&s.eta_shape),
            s.alpha_eps.to_string(),
            s.beta_eps.to_string(),
            mc.n_iter.to_string(),
            mc.burn_in.to_string(),
            mc.thin.to_string(),
            mc.seed.to_string(),
            show_optional(&mc.init_bandwidth),
            show_optional(&mc.adapt_every),
            mc.target_band.0.to_string(),
            mc.target_band.1.to_string(),
            mc.resample_every.to_string(),
            mc.update_eta.to_string(),
            mc.update_sigma2.to_string(),
            mc.init_sigma2.to_string(),
            self.alpha.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
