//! JSON fit configuration: loading, validation, and merging with flags.
//!
//! Every field is optional; absent fields fall back to library defaults.
//! Unknown keys are rejected with the offending path so typos surface
//! immediately instead of silently running with defaults.

use crate::error::{CliError, Result};
use nlmevem::elbo::ElboConfig;
use nlmevem::fit::{AdChoice, FitConfig, Variant};
use nlmevem::optim::{AdamConfig, LbfgsConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum VariantArg {
    Deterministic,
    Stochastic,
    StochasticMinibatch,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Deterministic => Variant::Deterministic,
            VariantArg::Stochastic => Variant::Stochastic,
            VariantArg::StochasticMinibatch => Variant::StochasticMinibatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AdModeArg {
    Auto,
    Forward,
    Reverse,
}

impl From<AdModeArg> for AdChoice {
    fn from(m: AdModeArg) -> AdChoice {
        match m {
            AdModeArg::Auto => AdChoice::Auto,
            AdModeArg::Forward => AdChoice::Forward,
            AdModeArg::Reverse => AdChoice::Reverse,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElboFile {
    pub samples: Option<usize>,
    pub minibatch_percent: Option<f64>,
    pub map_prior: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsFile {
    pub memory: Option<usize>,
    pub c1: Option<f64>,
    pub backtrack: Option<f64>,
    pub max_ls_trials: Option<usize>,
    pub grad_norm_tol: Option<f64>,
    pub rel_obj_tol: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamFile {
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: Option<String>,
    pub variant: Option<VariantArg>,
    pub seed: Option<u64>,
    pub dense: Option<bool>,
    pub theta_init: Option<Vec<f64>>,
    pub ad_mode: Option<AdModeArg>,
    pub ode_steps: Option<usize>,
    pub is_samples: Option<usize>,
    pub elbo: ElboFile,
    pub lbfgs: LbfgsFile,
    pub adam: AdamFile,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_str(&text, path)
    }

    pub fn from_str(text: &str, path: &Path) -> Result<FileConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path_str = e.path().to_string();
            let detail = if path_str == "." {
                e.inner().to_string()
            } else {
                format!("at `{path_str}`: {}", e.inner())
            };
            CliError::parse(path, detail)
        })
    }

    /// Lower the file layer onto library defaults. Command-line overrides are
    /// applied by the caller on top of the returned value.
    pub fn to_fit_config(&self) -> FitConfig {
        let mut config = FitConfig::default();
        if let Some(v) = self.variant {
            config.variant = v.into();
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(d) = self.dense {
            config.dense = d;
        }
        config.theta_init = self.theta_init.clone();
        if let Some(m) = self.ad_mode {
            config.ad_mode = m.into();
        }
        config.ode_steps = self.ode_steps;
        if let Some(n) = self.is_samples {
            config.is_samples = n;
        }

        let elbo = ElboConfig::default();
        config.elbo = ElboConfig {
            m: self.elbo.samples.unwrap_or(elbo.m),
            minibatch_percent: self.elbo.minibatch_percent.unwrap_or(elbo.minibatch_percent),
            map_prior: self.elbo.map_prior.unwrap_or(elbo.map_prior),
            ..elbo
        };

        let l = LbfgsConfig::default();
        config.lbfgs = LbfgsConfig {
            memory: self.lbfgs.memory.unwrap_or(l.memory),
            c1: self.lbfgs.c1.unwrap_or(l.c1),
            backtrack: self.lbfgs.backtrack.unwrap_or(l.backtrack),
            max_ls_trials: self.lbfgs.max_ls_trials.unwrap_or(l.max_ls_trials),
            grad_norm_tol: self.lbfgs.grad_norm_tol.unwrap_or(l.grad_norm_tol),
            rel_obj_tol: self.lbfgs.rel_obj_tol.unwrap_or(l.rel_obj_tol),
            max_iters: self.lbfgs.max_iters.unwrap_or(l.max_iters),
        };

        let a = AdamConfig::default();
        config.adam = AdamConfig {
            learning_rate: self.adam.learning_rate.unwrap_or(a.learning_rate),
            beta1: self.adam.beta1.unwrap_or(a.beta1),
            beta2: self.adam.beta2.unwrap_or(a.beta2),
            epsilon: self.adam.epsilon.unwrap_or(a.epsilon),
            decay: self.adam.decay.unwrap_or(a.decay),
            clip_norm: self.adam.clip_norm.unwrap_or(a.clip_norm),
            max_iters: self.adam.max_iters.unwrap_or(a.max_iters),
        };

        config
    }
}

/// Resolve the fit seed: flag, then config file, then `NLMEVEM_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = file {
        return Ok(s);
    }
    match std::env::var("NLMEVEM_SEED") {
        Ok(raw) => raw.trim().parse::<u64>().map_err(|_| {
            CliError::Usage(format!(
                "NLMEVEM_SEED must be a nonnegative integer, got `{raw}`"
            ))
        }),
        Err(_) => Ok(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nlmevem::elbo::ElboMode;

    #[test]
    fn empty_config_reproduces_library_defaults() {
        let file = FileConfig::from_str("{}", Path::new("cfg.json")).unwrap();
        let config = file.to_fit_config();
        let default = FitConfig::default();
        assert_eq!(config.variant, default.variant);
        assert_eq!(config.elbo.m, default.elbo.m);
        assert_eq!(config.elbo.mode, ElboMode::DeterministicPresampled);
        assert_eq!(config.lbfgs.grad_norm_tol, default.lbfgs.grad_norm_tol);
        assert_eq!(config.adam.learning_rate, default.adam.learning_rate);
        assert_eq!(config.is_samples, default.is_samples);
        assert!(config.theta_init.is_none());
    }

    #[test]
    fn nested_overrides_land_in_place() {
        let text = r#"{
            "variant": "stochastic_minibatch",
            "seed": 7,
            "dense": true,
            "theta_init": [0.5, 1.5],
            "elbo": {"samples": 31, "minibatch_percent": 25.0, "map_prior": true},
            "lbfgs": {"grad_norm_tol": 1e-4},
            "adam": {"learning_rate": 0.2, "max_iters": 9}
        }"#;
        let file = FileConfig::from_str(text, Path::new("cfg.json")).unwrap();
        let config = file.to_fit_config();
        assert_eq!(config.variant, Variant::StochasticMinibatch);
        assert_eq!(config.seed, 7);
        assert!(config.dense);
        assert_eq!(config.theta_init.as_deref(), Some(&[0.5, 1.5][..]));
        assert_eq!(config.elbo.m, 31);
        assert_eq!(config.elbo.minibatch_percent, 25.0);
        assert!(config.elbo.map_prior);
        assert_eq!(config.lbfgs.grad_norm_tol, 1e-4);
        assert_eq!(config.lbfgs.memory, LbfgsConfig::default().memory);
        assert_eq!(config.adam.learning_rate, 0.2);
        assert_eq!(config.adam.max_iters, 9);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err =
            FileConfig::from_str(r#"{"elbo": {"smaples": 3}}"#, Path::new("cfg.json")).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("elbo"), "{message}");
        assert!(message.contains("smaples"), "{message}");
        assert_eq!(err.exit_code(), 2);

        let err = FileConfig::from_str(r#"{"varaint": "x"}"#, Path::new("cfg.json")).unwrap_err();
        assert!(err.to_string().contains("varaint"), "{err}");
    }

    #[test]
    fn seed_resolution_order() {
        std::env::remove_var("NLMEVEM_SEED");
        assert_eq!(resolve_seed(Some(3), Some(5)).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some(5)).unwrap(), 5);
        assert_eq!(resolve_seed(None, None).unwrap(), 0);
    }
}
