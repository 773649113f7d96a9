//! The optional TOML run configuration. Every key is optional; a value given
//! on the command line wins over the file, which wins over the built-in
//! default.

use std::path::Path;

use anyhow::Context;
use envsiren::inverse::InverseConfig;
use envsiren::mlp::{FinalActivation, MlpArchitecture};
use envsiren::optim::{Direction, Interpolation, LambdaSchedule};
use envsiren::siren::FitConfig;
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub fit: FitSection,
    pub model: ModelSection,
    pub inverse: InverseSection,
    pub render: RenderSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lr_t0: Option<usize>,
    pub lambda_log_mse: Option<f64>,
    pub lambda_log_ssim: Option<f64>,
    pub lambda_hdr: Option<f64>,
    pub eps: Option<f32>,
    pub robust: Option<bool>,
    pub gamma: Option<f64>,
    pub proxy_lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_features: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub omega_0: Option<f32>,
    pub final_activation: Option<FinalActivation>,
}

/// Schedules are given as `[lo, hi]`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseSection {
    pub iterations: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_ssim: Option<[f64; 2]>,
    pub lambda_l1: Option<[f64; 2]>,
    pub lambda_lum: Option<[f64; 2]>,
    pub lambda_percep: Option<f64>,
    pub lambda_tv: Option<f64>,
    /// Piecewise-constant schedules with this many phases.
    pub phases: Option<usize>,
    pub clamp_pixels: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub spp: Option<usize>,
    pub roughness: Option<f64>,
    pub exposure: Option<f32>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| envsiren::Error::io(path, e))
            .with_context(|| "reading config")?;
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub struct FitOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub robust: bool,
    pub gamma: Option<f64>,
    pub proxy_lr: Option<f64>,
    pub seed: Option<u64>,
    pub hidden_features: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub omega_0: Option<f32>,
}

pub fn fit_config(file: &FileConfig, o: &FitOverrides) -> (FitConfig, MlpArchitecture) {
    let d = FitConfig::default();
    let f = &file.fit;
    let cfg = FitConfig {
        epochs: pick(o.epochs, f.epochs, d.epochs),
        lr: pick(o.lr, f.lr, d.lr),
        lr_t0: f.lr_t0.unwrap_or(d.lr_t0),
        lambda_log_mse: f.lambda_log_mse.unwrap_or(d.lambda_log_mse),
        lambda_log_ssim: f.lambda_log_ssim.unwrap_or(d.lambda_log_ssim),
        lambda_hdr: f.lambda_hdr.unwrap_or(d.lambda_hdr),
        eps: f.eps.unwrap_or(d.eps),
        awp_enabled: o.robust || f.robust.unwrap_or(false),
        awp_gamma: pick(o.gamma, f.gamma, d.awp_gamma),
        awp_proxy_lr: pick(o.proxy_lr, f.proxy_lr, d.awp_proxy_lr),
        seed: pick(o.seed, file.seed, d.seed),
    };
    let a = MlpArchitecture::default();
    let m = &file.model;
    let arch = MlpArchitecture {
        hidden_features: pick(o.hidden_features, m.hidden_features, a.hidden_features),
        hidden_layers: pick(o.hidden_layers, m.hidden_layers, a.hidden_layers),
        omega_0: pick(o.omega_0, m.omega_0, a.omega_0),
        final_activation: m.final_activation.unwrap_or(a.final_activation),
        ..a
    };
    (cfg, arch)
}

pub struct InverseOverrides {
    pub iterations: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
}

pub fn inverse_config(
    file: &FileConfig,
    method: envsiren::inverse::Method,
    o: &InverseOverrides,
) -> InverseConfig {
    let f = &file.inverse;
    let iterations = pick(o.iterations, f.iterations, 400);
    let mut cfg = InverseConfig::new(method, iterations);
    cfg.lr = o.lr.or(f.lr);
    let schedule = |range: Option<[f64; 2]>, default: LambdaSchedule, direction| match range {
        Some([lo, hi]) => LambdaSchedule::new(lo, hi, iterations, direction),
        None => default,
    };
    cfg.lambda_ssim = schedule(f.lambda_ssim, cfg.lambda_ssim, Direction::Increasing);
    cfg.lambda_l1 = schedule(f.lambda_l1, cfg.lambda_l1, Direction::Decreasing);
    cfg.lambda_lum = schedule(f.lambda_lum, cfg.lambda_lum, Direction::Decreasing);
    if let Some(n) = f.phases {
        for s in [
            &mut cfg.lambda_ssim,
            &mut cfg.lambda_l1,
            &mut cfg.lambda_lum,
        ] {
            s.interpolation = Interpolation::Phases(n);
        }
    }
    cfg.lambda_percep = f.lambda_percep.unwrap_or(cfg.lambda_percep);
    cfg.lambda_tv = f.lambda_tv.unwrap_or(cfg.lambda_tv);
    cfg.clamp_pixels = f.clamp_pixels.unwrap_or(cfg.clamp_pixels);
    cfg.seed = pick(o.seed, file.seed, 0);
    cfg
}
