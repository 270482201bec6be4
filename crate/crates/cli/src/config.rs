//! Settings resolution: flags, then `EVBLUR_*` environment variables (both
//! handled by clap), then the TOML file given by `--config`, then defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Deserialize;

use evblur_core::edi::Threshold;
use evblur_core::simulate::SimConfig;
use evblur_core::ThresholdMap;

pub const DEFAULT_T0: u64 = 0;
pub const DEFAULT_T1: u64 = 60_000;

/// Keys accepted in the TOML config file. Every key is optional.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSettings {
    pub n: Option<usize>,
    pub mu_c: Option<f64>,
    pub sigma_c: Option<f64>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub c: Option<f64>,
    pub t0: Option<u64>,
    pub t1: Option<u64>,
    pub clamp: Option<bool>,
    pub oracle_thresholds: Option<bool>,
    pub refractory_us: Option<u64>,
    pub noise_std: Option<f64>,
    pub hot_pixels: Option<usize>,
    pub hot_value: Option<f64>,
}

impl FileSettings {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileSettings::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArg {
    /// TOML file with default settings
    #[arg(long, env = "EVBLUR_CONFIG", global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct WindowArgs {
    /// Exposure window start, microseconds
    #[arg(long, env = "EVBLUR_T0")]
    pub t0: Option<u64>,
    /// Exposure window end, microseconds
    #[arg(long, env = "EVBLUR_T1")]
    pub t1: Option<u64>,
}

impl WindowArgs {
    pub fn resolve(&self, file: &FileSettings) -> (u64, u64) {
        (
            self.t0.or(file.t0).unwrap_or(DEFAULT_T0),
            self.t1.or(file.t1).unwrap_or(DEFAULT_T1),
        )
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimArgs {
    /// Mean contrast threshold
    #[arg(long, env = "EVBLUR_MU_C")]
    pub mu_c: Option<f64>,
    /// Threshold standard deviation across pixels
    #[arg(long, env = "EVBLUR_SIGMA_C")]
    pub sigma_c: Option<f64>,
    /// Offset inside the log transform
    #[arg(long, env = "EVBLUR_EPS")]
    pub eps: Option<f64>,
    #[arg(long, env = "EVBLUR_SEED")]
    pub seed: Option<u64>,
    /// Per-pixel dead time after an event, microseconds
    #[arg(long, env = "EVBLUR_REFRACTORY_US")]
    pub refractory_us: Option<u64>,
}

impl SimArgs {
    pub fn resolve(&self, file: &FileSettings) -> SimConfig {
        let d = SimConfig::default();
        SimConfig {
            mu_c: self.mu_c.or(file.mu_c).unwrap_or(d.mu_c),
            sigma_c: self.sigma_c.or(file.sigma_c).unwrap_or(d.sigma_c),
            eps: self.eps.or(file.eps).unwrap_or(d.eps),
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
            refractory_us: self.refractory_us.or(file.refractory_us).unwrap_or(d.refractory_us),
            ..d
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct AugmentArgs {
    /// Gaussian noise added to every voxel
    #[arg(long, env = "EVBLUR_NOISE_STD")]
    pub noise_std: Option<f64>,
    #[arg(long, env = "EVBLUR_HOT_PIXELS")]
    pub hot_pixels: Option<usize>,
    #[arg(long, env = "EVBLUR_HOT_VALUE")]
    pub hot_value: Option<f64>,
}

impl AugmentArgs {
    /// Returns `None` when no augmentation is requested.
    pub fn resolve(&self, file: &FileSettings, base: SimConfig) -> Option<SimConfig> {
        let cfg = SimConfig {
            noise_std: self.noise_std.or(file.noise_std).unwrap_or(0.0),
            hot_pixels: self.hot_pixels.or(file.hot_pixels).unwrap_or(0),
            hot_value: self.hot_value.or(file.hot_value).unwrap_or(base.hot_value),
            ..base
        };
        (cfg.noise_std > 0.0 || cfg.hot_pixels > 0).then_some(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct InvertArgs {
    /// Half-interval count N
    #[arg(long, env = "EVBLUR_N")]
    pub n: Option<usize>,
    /// Scalar contrast threshold used for inversion
    #[arg(long, env = "EVBLUR_C")]
    pub c: Option<f64>,
    /// Clamp the latent image to [0, 1] (default true; `--clamp false` keeps raw values)
    #[arg(long, env = "EVBLUR_CLAMP", num_args = 0..=1, default_missing_value = "true")]
    pub clamp: Option<bool>,
}

pub struct Inversion {
    pub n: usize,
    pub c: f64,
    pub clamp: bool,
}

impl InvertArgs {
    pub fn resolve(&self, file: &FileSettings) -> Inversion {
        Inversion {
            n: self
                .n
                .or(file.n)
                .unwrap_or(evblur_core::represent::DEFAULT_HALF_INTERVALS),
            c: self.c.or(file.c).unwrap_or(SimConfig::default().mu_c),
            clamp: self.clamp.or(file.clamp).unwrap_or(true),
        }
    }
}

impl Inversion {
    pub fn threshold(&self, oracle: Option<ThresholdMap>) -> Threshold {
        match oracle {
            Some(map) => Threshold::Map(map),
            None => Threshold::Scalar(self.c),
        }
    }
}

/// Expands a glob and sorts the matches lexicographically.
pub fn expand_frames(pattern: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths = glob::glob(pattern)
        .with_context(|| format!("bad frame pattern {pattern:?}"))?
        .collect::<Result<Vec<_>, _>>()?;
    paths.sort();
    if paths.is_empty() {
        anyhow::bail!("no frames match {pattern:?}");
    }
    Ok(paths)
}
