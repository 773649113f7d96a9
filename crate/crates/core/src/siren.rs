//! Fitting an HDR environment map with a sine network in log space, with
//! optional adversarial weight perturbation (AWP).
//!
//! The network learns `normalize(log(E + eps))` on the texel-centre grid and
//! the map is recovered by inverting that normalisation. The loss combines
//! a log-space MSE, a log-space SSIM dissimilarity and an MSE on the
//! de-normalised radiance, which is what lets the few very bright texels
//! (the sun) be reproduced.
//!
//! With AWP enabled, each iteration first finds a per-tensor perturbation of
//! relative size `gamma` that worsens the log-space SSIM, takes the descent
//! step from the perturbed weights, and then removes the perturbation again.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdr::{self, HdrImage, NormalizationParams, DEFAULT_LOG_EPS};
use crate::metrics::{self, Dims, SsimConfig};
use crate::mlp::{siren_init, CoordGrid, Layer, MlpArchitecture, MlpParams};
use crate::optim::{AdamState, LrSchedule, ParamTensors};
use crate::real::Real;

/// Exponent above which de-normalisation is treated as an overflow.
pub const MAX_LOG_RADIANCE: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_log_mse: f64,
    pub lambda_log_ssim: f64,
    pub lambda_hdr: f64,
    pub eps: f32,
    pub awp_enabled: bool,
    pub awp_gamma: f64,
    pub awp_proxy_lr: f64,
    pub lr_t0: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            lr: 5e-5,
            lambda_log_mse: 0.85,
            lambda_log_ssim: 0.25,
            lambda_hdr: 1e-2,
            eps: DEFAULT_LOG_EPS,
            awp_enabled: false,
            awp_gamma: 0.01,
            awp_proxy_lr: 1e-4,
            lr_t0: 100,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_log_mse, self.lambda_log_ssim, self.lambda_hdr];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0: {weights:?}"
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.awp_enabled && !(self.awp_gamma >= 0.0 && self.awp_proxy_lr > 0.0) {
            return Err(Error::Config(format!(
                "AWP needs gamma >= 0 and a positive proxy lr, got {} and {}",
                self.awp_gamma, self.awp_proxy_lr
            )));
        }
        LrSchedule::new(self.lr, self.lr_t0).validate()
    }
}

/// Texel-centre grid matching an image of the given size.
pub fn make_coord_grid(width: usize, height: usize) -> Result<CoordGrid> {
    CoordGrid::new(width, height)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitLossTerms {
    pub total: f64,
    pub log_mse: f64,
    pub log_ssim: f64,
    pub hdr: f64,
}

/// The fitting loss on network outputs `pred` (`n x 3`, interleaved) against
/// the normalised target, and its gradient with respect to `pred`.
///
/// `width x height` must equal `n`; SSIM is evaluated on that image shape.
pub fn fit_loss<T: Real>(
    pred: &[T],
    target: &[T],
    width: usize,
    height: usize,
    norm: &NormalizationParams,
    cfg: &FitConfig,
) -> Result<(FitLossTerms, Vec<T>)> {
    let dims = Dims::rgb(width, height);
    if pred.len() != dims.len() || target.len() != dims.len() {
        return Err(Error::Dimension(format!(
            "fit loss on {} / {} samples for {width}x{height}",
            pred.len(),
            target.len()
        )));
    }
    let max_y = pred.iter().chain(target).fold(T::neg_infinity(), |m, v| {
        if v.is_nan() {
            T::nan()
        } else {
            m.max(*v)
        }
    });
    let top = max_y.to_f64_lossy() * norm.range() + norm.log_min;
    if !(top <= MAX_LOG_RADIANCE) {
        return Err(Error::NonFinite(format!(
            "de-normalised radiance exp({top}) overflows"
        )));
    }

    let n = T::lit(dims.len() as f64);
    let two = T::lit(2.0);
    let mut grad = vec![T::zero(); pred.len()];

    let w_mse = T::lit(cfg.lambda_log_mse);
    let mut log_mse = T::zero();
    for ((g, p), t) in grad.iter_mut().zip(pred).zip(target) {
        let d = *p - *t;
        log_mse += d * d;
        *g = w_mse * two * d / n;
    }
    log_mse /= n;

    let mut log_ssim = T::zero();
    if cfg.lambda_log_ssim != 0.0 {
        let (s, gs) =
            metrics::ssim_with_grad(pred, target, dims, &SsimConfig::fitted(width, height))?;
        log_ssim = T::one() - s;
        let w = T::lit(cfg.lambda_log_ssim);
        for (g, d) in grad.iter_mut().zip(gs) {
            *g -= w * d;
        }
    }

    let w_hdr = T::lit(cfg.lambda_hdr);
    let mut hdr_mse = T::zero();
    for ((g, p), t) in grad.iter_mut().zip(pred).zip(target) {
        let d = norm.denormalize(*p) - norm.denormalize(*t);
        hdr_mse += d * d;
        *g += w_hdr * two * d / n * norm.denormalize_grad(*p);
    }
    hdr_mse /= n;

    let terms = FitLossTerms {
        log_mse: log_mse.to_f64_lossy(),
        log_ssim: log_ssim.to_f64_lossy(),
        hdr: hdr_mse.to_f64_lossy(),
        total: (w_mse * log_mse + T::lit(cfg.lambda_log_ssim) * log_ssim + w_hdr * hdr_mse)
            .to_f64_lossy(),
    };
    Ok((terms, grad))
}

/// Per-tensor weight offsets, shape-congruent with an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPerturbation<T = f32> {
    pub deltas: Vec<Layer<T>>,
}

fn l2(x: &[impl Real]) -> f64 {
    x.iter()
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

impl<T: Real> WeightPerturbation<T> {
    pub fn zeros_like(params: &MlpParams<T>) -> Self {
        Self {
            deltas: params
                .layers()
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    fn tensor(&self, i: usize) -> &[T] {
        let l = &self.deltas[i / 2];
        if i.is_multiple_of(2) {
            l.weight.as_slice().expect("standard layout")
        } else {
            l.bias.as_slice().expect("standard layout")
        }
    }

    fn tensor_mut(&mut self, i: usize) -> &mut [T] {
        let l = &mut self.deltas[i / 2];
        if i.is_multiple_of(2) {
            l.weight.as_slice_mut().expect("standard layout")
        } else {
            l.bias.as_slice_mut().expect("standard layout")
        }
    }

    pub fn is_zero(&self) -> bool {
        (0..self.deltas.len() * 2).all(|i| self.tensor(i).iter().all(|v| *v == T::zero()))
    }

    /// `||delta_l|| / ||theta_l||` per tensor; `None` where either is zero.
    pub fn norm_ratios(&self, params: &MlpParams<T>) -> Vec<Option<f64>> {
        (0..params.tensor_count())
            .map(|i| {
                let (d, p) = (l2(self.tensor(i)), l2(params.tensor(i)));
                (d > 0.0 && p > 0.0).then(|| d / p)
            })
            .collect()
    }

    fn apply(&self, params: &mut MlpParams<T>, sign: T) {
        for i in 0..params.tensor_count() {
            let d = self.tensor(i);
            if d.iter().all(|v| *v == T::zero()) {
                continue;
            }
            for (p, d) in params.tensor_mut(i).iter_mut().zip(d) {
                *p += sign * *d;
            }
        }
    }

    pub fn add_to(&self, params: &mut MlpParams<T>) {
        self.apply(params, T::one());
    }

    pub fn subtract_from(&self, params: &mut MlpParams<T>) {
        self.apply(params, -T::one());
    }
}

/// One adversarial weight perturbation.
///
/// A clone of the weights takes a single proxy-Adam step that *increases*
/// the log-space SSIM dissimilarity `1 - SSIM`. The resulting displacement is
/// rescaled per tensor to `gamma * ||theta_l||`. `proxy` persists across calls.
#[allow(clippy::too_many_arguments)]
pub fn calc_awp<T: Real>(
    params: &MlpParams<T>,
    inputs: ArrayView2<T>,
    target_norm: &[T],
    width: usize,
    height: usize,
    gamma: f64,
    proxy: &mut AdamState<T>,
    proxy_lr: f64,
) -> Result<WeightPerturbation<T>> {
    let mut out = WeightPerturbation::zeros_like(params);
    if gamma == 0.0 {
        return Ok(out);
    }
    let mut shadow = params.clone();
    let (y, cache) = shadow.forward(inputs)?;
    let y = y.as_standard_layout();
    let pred = y.as_slice().expect("standard layout");
    // Minimising SSIM - 1 ascends the dissimilarity.
    let (_, g) = metrics::ssim_with_grad(
        pred,
        target_norm,
        Dims::rgb(width, height),
        &SsimConfig::fitted(width, height),
    )?;
    let g = Array2::from_shape_vec(y.raw_dim(), g).expect("gradient shaped like outputs");
    let grads = shadow.backward(&cache, g.view())?;
    proxy.step(&mut shadow, &grads, proxy_lr)?;

    for i in 0..params.tensor_count() {
        let base = params.tensor(i);
        let moved = shadow.tensor(i);
        let delta: Vec<f64> = moved
            .iter()
            .zip(base)
            .map(|(m, b)| m.to_f64_lossy() - b.to_f64_lossy())
            .collect();
        let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let scale = gamma * l2(base) / norm;
        for (o, d) in out.tensor_mut(i).iter_mut().zip(&delta) {
            *o = T::lit(scale * d);
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, alpha^2)` noise to every weight and bias.
pub fn perturb<T: Real>(params: &MlpParams<T>, alpha: f64, seed: u64) -> MlpParams<T> {
    let mut out = params.clone();
    if alpha == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..out.tensor_count() {
        for v in out.tensor_mut(i) {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += T::lit(alpha * n);
        }
    }
    out
}

/// A fitted network plus everything needed to turn its output back into
/// radiance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MlpParams<f32>,
    pub norm: NormalizationParams,
    pub width: usize,
    pub height: usize,
}

impl TrainedModel {
    pub fn arch(&self) -> &MlpArchitecture {
        self.params.arch()
    }

    pub fn grid(&self) -> Result<CoordGrid> {
        CoordGrid::new(self.width, self.height)
    }

    /// Raw network output on the stored grid, in the normalised log space.
    pub fn predict_normalized(&self) -> Result<Vec<f32>> {
        predict_normalized_with(&self.params, &self.grid()?)
    }

    pub fn with_params(&self, params: MlpParams<f32>) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }
}

fn predict_normalized_with(params: &MlpParams<f32>, grid: &CoordGrid) -> Result<Vec<f32>> {
    let y = params.predict(grid.coords())?;
    Ok(y.as_standard_layout().iter().copied().collect())
}

/// Evaluates the network on its grid and de-normalises to radiance.
pub fn predict_envmap(model: &TrainedModel) -> Result<HdrImage> {
    let y = model.predict_normalized()?;
    let data = y
        .iter()
        .map(|&v| model.norm.denormalize(v as f64) as f32)
        .collect();
    HdrImage::new(model.width, model.height, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub lr: f64,
    pub terms: FitLossTerms,
    /// `||theta*_l|| / ||theta_l||` per tensor for this iteration's
    /// perturbation (empty when AWP is off).
    pub perturbation_ratios: Vec<Option<f64>>,
}

impl TrainRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.iteration,
            self.terms.total,
            self.terms.log_mse,
            self.terms.log_ssim,
            self.terms.hdr,
            self.lr
        )
    }
}

pub const TRAIN_LOG_HEADER: &str = "# iteration loss log_mse log_ssim hdr lr";

/// Step-wise training loop; [`train`] drives it to completion.
pub struct Trainer {
    cfg: FitConfig,
    params: MlpParams<f32>,
    inputs: Array2<f32>,
    target: Vec<f32>,
    norm: NormalizationParams,
    width: usize,
    height: usize,
    adam: AdamState<f32>,
    proxy: AdamState<f32>,
    schedule: LrSchedule,
    proxy_schedule: LrSchedule,
    iteration: usize,
}

impl Trainer {
    pub fn new(env_crop: &HdrImage, arch: &MlpArchitecture, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        let params = siren_init(arch, cfg.seed)?;
        Self::with_params(env_crop, params, cfg)
    }

    /// Starts from explicit weights instead of a fresh initialisation.
    pub fn with_params(
        env_crop: &HdrImage,
        params: MlpParams<f32>,
        cfg: &FitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let arch = params.arch();
        if arch.in_features != 2 || arch.out_features != 3 {
            return Err(Error::Config(format!(
                "environment maps need a 2 -> 3 network, got {} -> {}",
                arch.in_features, arch.out_features
            )));
        }
        let (target, norm) = hdr::log_normalize(env_crop, cfg.eps)?;
        let grid = make_coord_grid(env_crop.width(), env_crop.height())?;
        Ok(Self {
            cfg: *cfg,
            params,
            inputs: grid.coords().to_owned(),
            target: target.into_data(),
            norm,
            width: env_crop.width(),
            height: env_crop.height(),
            adam: AdamState::new(),
            proxy: AdamState::new(),
            schedule: LrSchedule::new(cfg.lr, cfg.lr_t0),
            proxy_schedule: LrSchedule::new(cfg.awp_proxy_lr, cfg.lr_t0),
            iteration: 0,
        })
    }

    pub fn params(&self) -> &MlpParams<f32> {
        &self.params
    }

    pub fn norm(&self) -> &NormalizationParams {
        &self.norm
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn target_normalized(&self) -> &[f32] {
        &self.target
    }

    pub fn step(&mut self) -> Result<TrainRecord> {
        let it = self.iteration;
        let diverged = |reason: String| Error::Divergence {
            iteration: it,
            reason,
        };
        let lr = self.schedule.lr_at(it);

        let perturbation = if self.cfg.awp_enabled {
            Some(calc_awp(
                &self.params,
                self.inputs.view(),
                &self.target,
                self.width,
                self.height,
                self.cfg.awp_gamma,
                &mut self.proxy,
                self.proxy_schedule.lr_at(it),
            )?)
        } else {
            None
        };
        let ratios = perturbation
            .as_ref()
            .map(|p| p.norm_ratios(&self.params))
            .unwrap_or_default();
        if let Some(p) = &perturbation {
            p.add_to(&mut self.params);
        }

        let (y, cache) = self.params.forward(self.inputs.view())?;
        let pred = y.as_slice().expect("standard layout");
        let (terms, grad) = fit_loss(
            pred,
            &self.target,
            self.width,
            self.height,
            &self.norm,
            &self.cfg,
        )
        .map_err(|e| diverged(e.to_string()))?;
        if !terms.total.is_finite() {
            return Err(diverged(format!("loss {}", terms.total)));
        }
        let grad = Array2::from_shape_vec(y.raw_dim(), grad).expect("gradient shaped like outputs");
        let grads = self.params.backward(&cache, grad.view())?;
        self.adam
            .step(&mut self.params, &grads, lr)
            .map_err(|e| diverged(e.to_string()))?;

        if let Some(p) = &perturbation {
            p.subtract_from(&mut self.params);
        }
        if !self.params.is_finite() {
            return Err(diverged("non-finite weights".into()));
        }
        self.iteration += 1;
        Ok(TrainRecord {
            iteration: it,
            lr,
            terms,
            perturbation_ratios: ratios,
        })
    }

    pub fn into_model(self) -> TrainedModel {
        TrainedModel {
            params: self.params,
            norm: self.norm,
            width: self.width,
            height: self.height,
        }
    }
}

pub fn train(env_crop: &HdrImage, arch: &MlpArchitecture, cfg: &FitConfig) -> Result<TrainedModel> {
    train_with(env_crop, arch, cfg, |_| {})
}

/// [`train`], calling `observe` after every iteration.
pub fn train_with(
    env_crop: &HdrImage,
    arch: &MlpArchitecture,
    cfg: &FitConfig,
    mut observe: impl FnMut(&TrainRecord),
) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(env_crop, arch, cfg)?;
    for _ in 0..cfg.epochs {
        let rec = trainer.step()?;
        observe(&rec);
    }
    Ok(trainer.into_model())
}

/// Mean log-space SSIM between the model's map and `n` seeded perturbations
/// of it, together with the per-seed values.
pub fn perturbation_ssim(
    model: &TrainedModel,
    alpha: f64,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<(f64, Vec<f64>)> {
    let base = predict_envmap(model)?;
    let mut values = Vec::new();
    for seed in seeds {
        let noisy = predict_envmap(&model.with_params(perturb(&model.params, alpha, seed)))?;
        values.push(metrics::envmap_metrics(&noisy, &base)?.ssim);
    }
    if values.is_empty() {
        return Err(Error::Config("no perturbation seeds".into()));
    }
    Ok((values.iter().sum::<f64>() / values.len() as f64, values))
}
