//! Flat `key = value` configuration, merged over defaults.

use std::fmt::Write as _;

use crate::aef::AefConfig;
use crate::error::{Error, Result};
use crate::margin_contrast::MarginConfig;
use crate::nettrain::ModelConfig;
use crate::refine::{CrossMaskMode, RefineConfig};

pub const KEYS: [&str; 19] = [
    "k",
    "beta",
    "tau",
    "mu",
    "nu",
    "lambda",
    "omega",
    "epsilon_lo",
    "epsilon_hi",
    "gamma",
    "k_tilde",
    "stages",
    "dims",
    "lr",
    "epochs",
    "loops",
    "seed",
    "cross_mask_mode",
    "apm_detach",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub k: usize,
    pub beta: f64,
    pub tau: f64,
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
    pub omega: f64,
    pub epsilon_lo: f64,
    pub epsilon_hi: f64,
    pub gamma: f64,
    pub k_tilde: usize,
    pub stages: usize,
    pub dims: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub loops: usize,
    pub seed: u64,
    pub cross_mask_mode: CrossMaskMode,
    pub apm_detach: bool,
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            k: m.aef.k,
            beta: m.aef.beta,
            tau: m.margin.tau,
            mu: m.margin.mu,
            nu: m.margin.nu,
            lambda: m.lambda,
            omega: m.omega,
            epsilon_lo: m.refine.epsilon_lo,
            epsilon_hi: m.refine.epsilon_hi,
            gamma: m.refine.gamma,
            k_tilde: m.refine.k_tilde,
            stages: m.dims.len(),
            dims: m.dims,
            lr: m.lr,
            epochs: m.epochs,
            loops: m.loops,
            seed: m.seed,
            cross_mask_mode: m.refine.cross_mask_mode,
            apm_detach: m.apm_detach,
        }
    }
}

fn config_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(line, format!("cannot parse {value:?} for {key}")))
}

fn parse_finite(line: usize, key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse_num(line, key, value)?;
    if !v.is_finite() {
        return Err(config_err(line, format!("{key} must be finite")));
    }
    Ok(v)
}

impl Config {
    /// Sets one key; `line` is only used for error messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let value = value.trim();
        match key {
            "k" => self.k = parse_num(line, key, value)?,
            "beta" => self.beta = parse_finite(line, key, value)?,
            "tau" => self.tau = parse_finite(line, key, value)?,
            "mu" => self.mu = parse_finite(line, key, value)?,
            "nu" => self.nu = parse_finite(line, key, value)?,
            "lambda" => self.lambda = parse_finite(line, key, value)?,
            "omega" => self.omega = parse_finite(line, key, value)?,
            "epsilon_lo" => self.epsilon_lo = parse_finite(line, key, value)?,
            "epsilon_hi" => self.epsilon_hi = parse_finite(line, key, value)?,
            "gamma" => self.gamma = parse_finite(line, key, value)?,
            "k_tilde" => self.k_tilde = parse_num(line, key, value)?,
            "stages" => self.stages = parse_num(line, key, value)?,
            "dims" => {
                self.dims = value
                    .split(',')
                    .map(|d| parse_num(line, key, d.trim()))
                    .collect::<Result<_>>()?
            }
            "lr" => self.lr = parse_finite(line, key, value)?,
            "epochs" => self.epochs = parse_num(line, key, value)?,
            "loops" => self.loops = parse_num(line, key, value)?,
            "seed" => self.seed = parse_num(line, key, value)?,
            "cross_mask_mode" => {
                self.cross_mask_mode = match value {
                    "single" => CrossMaskMode::Single,
                    "sum" => CrossMaskMode::Sum,
                    _ => {
                        return Err(config_err(
                            line,
                            format!("cross_mask_mode must be single or sum, got {value:?}"),
                        ))
                    }
                }
            }
            "apm_detach" => {
                self.apm_detach = match value {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(config_err(
                            line,
                            format!("apm_detach must be true or false, got {value:?}"),
                        ))
                    }
                }
            }
            _ => return Err(config_err(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` command-line overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let from_cli = |o: &str, e: Error| match e {
            Error::Config { message, .. } => Error::InvalidArgument(format!("--set {o}: {message}")),
            other => other,
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set {o}: expected key=value")))?;
            self.set(k.trim(), v, 0).map_err(|e| from_cli(o, e))?;
        }
        if let Some(last) = overrides.last() {
            self.check(0).map_err(|e| from_cli(last, e))?;
        }
        Ok(())
    }

    /// Cross-key rules; `line` names the line that completed the config.
    fn check(&self, line: usize) -> Result<()> {
        if self.epsilon_lo > self.epsilon_hi {
            return Err(config_err(
                line,
                format!(
                    "epsilon_lo {} exceeds epsilon_hi {}",
                    self.epsilon_lo, self.epsilon_hi
                ),
            ));
        }
        if self.stages == 0 || self.dims.len() != self.stages {
            return Err(config_err(
                line,
                format!(
                    "stages = {} but dims lists {} widths",
                    self.stages,
                    self.dims.len()
                ),
            ));
        }
        self.model_config()
            .validate()
            .map_err(|e| config_err(line, e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dims: self.dims.clone(),
            ratios: vec![4; self.dims.len()],
            aef: AefConfig {
                k: self.k,
                beta: self.beta,
                ..AefConfig::default()
            },
            margin: MarginConfig {
                mu: self.mu,
                nu: self.nu,
                tau: self.tau,
            },
            lambda: self.lambda,
            omega: self.omega,
            refine: RefineConfig {
                epsilon_lo: self.epsilon_lo,
                epsilon_hi: self.epsilon_hi,
                gamma: self.gamma,
                k_tilde: self.k_tilde,
                cross_mask_mode: self.cross_mask_mode,
            },
            lr: self.lr,
            epochs: self.epochs,
            loops: self.loops,
            seed: self.seed,
            apm_detach: self.apm_detach,
            ..ModelConfig::default()
        }
    }

    /// Text that [`parse_config`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let mode = match self.cross_mask_mode {
            CrossMaskMode::Single => "single",
            CrossMaskMode::Sum => "sum",
        };
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        line("k", self.k.to_string());
        line("beta", self.beta.to_string());
        line("tau", self.tau.to_string());
        line("mu", self.mu.to_string());
        line("nu", self.nu.to_string());
        line("lambda", self.lambda.to_string());
        line("omega", self.omega.to_string());
        line("epsilon_lo", self.epsilon_lo.to_string());
        line("epsilon_hi", self.epsilon_hi.to_string());
        line("gamma", self.gamma.to_string());
        line("k_tilde", self.k_tilde.to_string());
        line("stages", self.stages.to_string());
        line("dims", dims.join(","));
        line("lr", self.lr.to_string());
        line("epochs", self.epochs.to_string());
        line("loops", self.loops.to_string());
        line("seed", self.seed.to_string());
        line("cross_mask_mode", mode.to_string());
        line("apm_detach", self.apm_detach.to_string());
        s
    }
}

/// Parses `key = value` lines over the defaults. `#` starts a comment;
/// later duplicates win.
pub fn parse_config(text: &str) -> Result<Config> {
    parse_config_over(Config::default(), text)
}

/// Like [`parse_config`] but merged over `base`.
pub fn parse_config_over(base: Config, text: &str) -> Result<Config> {
    let mut cfg = base;
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| config_err(line, format!("expected key = value, got {content:?}")))?;
        cfg.set(k.trim(), v, line)?;
        last = line;
    }
    cfg.check(last)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(parse_config("tau = 0.3").unwrap().tau, 0.3);
        assert_eq!(parse_config("").unwrap(), Config::default());
        let err = parse_config("epsilon_lo = 0.95\nepsilon_hi = 0.9").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
    }

    #[test]
    fn defaults_are_reference_settings() {
        let c = Config::default();
        assert_eq!((c.k, c.k_tilde), (24, 12));
        assert_eq!((c.beta, c.tau, c.mu, c.nu), (0.04, 0.3, -1.0, 0.5));
        assert_eq!((c.lambda, c.omega), (0.1, 0.01));
        assert_eq!((c.epsilon_lo, c.epsilon_hi, c.gamma), (0.9, 1.0, 1.0));
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [
            ("k = 24\nbogus = 1", 2),
            ("# c\n\nbeta = abc", 3),
            ("k = -3", 1),
            ("apm_detach = yes", 1),
            ("cross_mask_mode = all", 1),
            ("stages = 3", 1),
            ("tau = 0", 1),
            ("k 24", 1),
        ] {
            match parse_config(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn later_duplicates_win_and_comments_ignored() {
        let c = parse_config("k = 12 # small\nk = 18\nstages = 3\ndims = 8, 16,32").unwrap();
        assert_eq!(c.k, 18);
        assert_eq!(c.dims, vec![8, 16, 32]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.set("cross_mask_mode", "sum", 0).unwrap();
        c.set("beta", "0.0123456789012345", 0).unwrap();
        c.set("apm_detach", "false", 0).unwrap();
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let mut c = Config::default();
        c.apply_overrides(&["k=18".into(), "gamma = 0.5".into()]).unwrap();
        assert_eq!((c.k, c.gamma), (18, 0.5));
        assert!(c.apply_overrides(&["nope=1".into()]).is_err());
        assert!(c.apply_overrides(&["k".into()]).is_err());
    }
}
