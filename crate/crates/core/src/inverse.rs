//! Recovering an environment map from a target rendering by gradient
//! descent through a [`TransportOperator`].
//!
//! Four parameterisations are supported: the raw texels, their logarithm, and
//! a fitted sine network (plainly trained or trained with weight
//! perturbation). All share one loss: an SSIM term on the renderings plus
//! luminance, perceptual, sparsity and optional total-variation regularisers
//! on the map.
//!
//! The perceptual term is a multi-scale SSIM dissimilarity on log-normalised
//! maps at full, half and quarter resolution, measured against the map the
//! optimisation started from.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdr::{
    self, DegeneratePolicy, HdrImage, NormalizationParams, DEFAULT_LOG_EPS, LUMINANCE_WEIGHTS,
};
use crate::metrics::{self, Dims, SsimConfig};
use crate::mlp::{CoordGrid, MlpParams, ParamGrads};
use crate::optim::{AdamState, Direction, FlatParams, LambdaSchedule};
use crate::real::Real;
use crate::render::TransportOperator;
use crate::siren::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pixels,
    LogPixels,
    Siren,
    RSiren,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Pixels,
        Method::LogPixels,
        Method::Siren,
        Method::RSiren,
    ];

    pub fn default_lr(self) -> f64 {
        match self {
            Method::Pixels | Method::LogPixels => 1e-2,
            Method::Siren | Method::RSiren => 5e-6,
        }
    }

    pub fn uses_model(self) -> bool {
        matches!(self, Method::Siren | Method::RSiren)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Pixels => "pixels",
            Method::LogPixels => "log_pixels",
            Method::Siren => "siren",
            Method::RSiren => "r_siren",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?} (pixels, log_pixels, siren, r_siren)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseConfig {
    pub iterations: usize,
    /// Overrides [`Method::default_lr`].
    pub lr: Option<f64>,
    pub lambda_ssim: LambdaSchedule,
    pub lambda_l1: LambdaSchedule,
    pub lambda_lum: LambdaSchedule,
    pub lambda_percep: f64,
    pub lambda_tv: f64,
    pub method: Method,
    /// Keep raw texels non-negative after every step (pixels method).
    pub clamp_pixels: bool,
    pub seed: u64,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self::new(Method::RSiren, 400)
    }
}

impl InverseConfig {
    pub fn new(method: Method, iterations: usize) -> Self {
        Self {
            iterations,
            lr: None,
            lambda_ssim: LambdaSchedule::new(1.0, 1e4, iterations, Direction::Increasing),
            lambda_l1: LambdaSchedule::new(1e-8, 1e-4, iterations, Direction::Decreasing),
            lambda_lum: LambdaSchedule::new(1e-8, 1e-4, iterations, Direction::Decreasing),
            lambda_percep: 0.6,
            lambda_tv: 0.0,
            method,
            clamp_pixels: true,
            seed: 0,
        }
    }

    /// Every weight zero except the rendering SSIM term.
    pub fn without_regularizers(mut self) -> Self {
        self.lambda_l1 = LambdaSchedule::constant(0.0);
        self.lambda_lum = LambdaSchedule::constant(0.0);
        self.lambda_percep = 0.0;
        self.lambda_tv = 0.0;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.method.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr()
            )));
        }
        for s in [&self.lambda_ssim, &self.lambda_l1, &self.lambda_lum] {
            s.validate()?;
        }
        if !(self.lambda_percep >= 0.0 && self.lambda_tv >= 0.0) {
            return Err(Error::Config("regulariser weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lambdas_at(&self, t: usize) -> Lambdas {
        Lambdas {
            ssim: self.lambda_ssim.lambda_at(t),
            lum: self.lambda_lum.lambda_at(t),
            percep: self.lambda_percep,
            l1: self.lambda_l1.lambda_at(t),
            tv: self.lambda_tv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Lambdas {
    pub ssim: f64,
    pub lum: f64,
    pub percep: f64,
    pub l1: f64,
    pub tv: f64,
}

/// Unweighted loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    /// `1 - SSIM` of the clamped renderings.
    pub ssim: f64,
    pub lum: f64,
    pub percep: f64,
    pub l1: f64,
    pub tv: f64,
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn same_len<T>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{what}: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `|Lum(E) - Lum(E0)|` over interleaved rgb, with its subgradient.
pub fn luminance_reg<T: Real>(env: &[T], env0: &[T]) -> Result<(T, Vec<T>)> {
    same_len(env, env0, "luminance regulariser")?;
    let diff = T::lit(hdr::luminance(env) - hdr::luminance(env0));
    let s = sign(diff);
    let grad = (0..env.len())
        .map(|i| s * T::lit(LUMINANCE_WEIGHTS[i % 3] as f64))
        .collect();
    Ok((diff.abs(), grad))
}

/// `sum |E|` with its subgradient.
pub fn l1_reg<T: Real>(env: &[T]) -> (T, Vec<T>) {
    let value = env.iter().fold(T::zero(), |a, v| a + v.abs());
    (value, env.iter().map(|v| sign(*v)).collect())
}

/// Anisotropic total variation summed over channels.
pub fn tv_reg<T: Real>(env: &[T], dims: Dims) -> Result<(T, Vec<T>)> {
    if env.len() != dims.len() {
        return Err(Error::Dimension(format!(
            "total variation on {} values for {dims:?}",
            env.len()
        )));
    }
    let (w, h, c) = (dims.width, dims.height, dims.channels);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); env.len()];
    let mut visit = |a: usize, b: usize| {
        let d = env[b] - env[a];
        value += d.abs();
        grad[b] += sign(d);
        grad[a] -= sign(d);
    };
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let i = (y * w + x) * c + k;
                if x + 1 < w {
                    visit(i, i + c);
                }
                if y + 1 < h {
                    visit(i, i + w * c);
                }
            }
        }
    }
    Ok((value, grad))
}

/// 2x2 average pooling of an interleaved rgb image.
fn pool<T: Real>(src: &[T], w: usize, h: usize) -> Vec<T> {
    let (w2, h2) = (w / 2, h / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); w2 * h2 * 3];
    for y in 0..h2 {
        for x in 0..w2 {
            for k in 0..3 {
                let at = |dx: usize, dy: usize| src[((2 * y + dy) * w + 2 * x + dx) * 3 + k];
                out[(y * w2 + x) * 3 + k] = (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) * quarter;
            }
        }
    }
    out
}

fn pool_adjoint<T: Real>(grad: &[T], w: usize, h: usize) -> Vec<T> {
    let w2 = w / 2;
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                out[(y * w + x) * 3 + k] = grad[((y / 2) * w2 + x / 2) * 3 + k] * quarter;
            }
        }
    }
    out
}

pub const PERCEPTUAL_SCALES: usize = 3;

/// The reference side of the perceptual term: the normalisation of the
/// starting map and its log-normalised pyramid.
#[derive(Debug, Clone)]
pub struct PerceptualReference<T> {
    width: usize,
    height: usize,
    norm: NormalizationParams,
    levels: Vec<Vec<T>>,
}

impl<T: Real> PerceptualReference<T> {
    pub fn new(env0: &[T], width: usize, height: usize) -> Result<Self> {
        if !width.is_multiple_of(4) || !height.is_multiple_of(4) || width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "perceptual term needs sizes divisible by 4, got {width}x{height}"
            )));
        }
        if env0.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{} values for {width}x{height}",
                env0.len()
            )));
        }
        let img = HdrImage::new(
            width,
            height,
            env0.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        )?;
        let (_, norm) = hdr::log_normalize_with(&img, DEFAULT_LOG_EPS, DegeneratePolicy::Midpoint)?;
        let levels = Self::pyramid(env0, width, height, &norm);
        Ok(Self {
            width,
            height,
            norm,
            levels,
        })
    }

    fn pyramid(env: &[T], width: usize, height: usize, norm: &NormalizationParams) -> Vec<Vec<T>> {
        let mut levels = vec![env
            .iter()
            .map(|v| norm.normalize(v.max(T::zero())))
            .collect::<Vec<_>>()];
        let (mut w, mut h) = (width, height);
        for _ in 1..PERCEPTUAL_SCALES {
            let next = pool(levels.last().expect("non-empty"), w, h);
            levels.push(next);
            w /= 2;
            h /= 2;
        }
        levels
    }

    pub fn norm(&self) -> &NormalizationParams {
        &self.norm
    }

    /// Mean `1 - SSIM` over the three scales, and its gradient in radiance.
    pub fn evaluate(&self, env: &[T]) -> Result<(T, Vec<T>)> {
        if env.len() != self.width * self.height * 3 {
            return Err(Error::Dimension(format!(
                "perceptual term on {} values",
                env.len()
            )));
        }
        let levels = Self::pyramid(env, self.width, self.height, &self.norm);
        let scale = T::lit(1.0 / PERCEPTUAL_SCALES as f64);
        let mut value = T::zero();
        let mut grads = Vec::with_capacity(PERCEPTUAL_SCALES);
        let (mut w, mut h) = (self.width, self.height);
        for (a, b) in levels.iter().zip(&self.levels) {
            let (s, g) = metrics::ssim_with_grad(a, b, Dims::rgb(w, h), &SsimConfig::fitted(w, h))?;
            value += (T::one() - s) * scale;
            grads.push((w, h, g.into_iter().map(|v| -v * scale).collect::<Vec<_>>()));
            w /= 2;
            h /= 2;
        }
        let mut back: Option<Vec<T>> = None;
        for (w, h, g) in grads.into_iter().rev() {
            let total = match back {
                Some(coarse) => g
                    .iter()
                    .zip(pool_adjoint(&coarse, w, h))
                    .map(|(a, b)| *a + b)
                    .collect(),
                None => g,
            };
            back = Some(total);
        }
        let back = back.expect("at least one scale");
        let range = T::lit(self.norm.range());
        let eps = T::lit(self.norm.eps);
        let grad = env
            .iter()
            .zip(back)
            .map(|(e, g)| {
                if *e < T::zero() {
                    T::zero()
                } else {
                    g / ((*e + eps) * range)
                }
            })
            .collect();
        Ok((value, grad))
    }
}

/// Multi-scale log-space SSIM dissimilarity between `env` and `env0`.
pub fn perceptual_reg<T: Real>(
    env: &[T],
    env0: &[T],
    width: usize,
    height: usize,
) -> Result<(T, Vec<T>)> {
    PerceptualReference::new(env0, width, height)?.evaluate(env)
}

/// Fixed ingredients of one inversion: operator, clamped target and the
/// starting map the regularisers refer to.
pub struct InverseProblem<'a, T> {
    op: &'a TransportOperator,
    target_unit: Vec<T>,
    env0: Vec<T>,
    perceptual: PerceptualReference<T>,
}

/// Loss terms plus the gradients with respect to the rendering and the map.
#[derive(Debug, Clone)]
pub struct LossEvaluation<T> {
    pub terms: LossTerms,
    pub rendered: Vec<T>,
    pub grad_rendered: Vec<T>,
    pub grad_env: Vec<T>,
}

impl<'a, T: Real> InverseProblem<'a, T> {
    pub fn new(op: &'a TransportOperator, target: &[T], env0: &[T]) -> Result<Self> {
        if target.len() != 3 * op.pixel_count() {
            return Err(Error::Dimension(format!(
                "target has {} values, rendering is {:?}",
                target.len(),
                op.render_dims()
            )));
        }
        if env0.len() != 3 * op.texel_count() {
            return Err(Error::Dimension(format!(
                "initial map has {} values, operator crop is {:?}",
                env0.len(),
                op.env_dims()
            )));
        }
        let (ew, eh) = op.env_dims();
        Ok(Self {
            op,
            target_unit: target
                .iter()
                .map(|v| v.max(T::zero()).min(T::one()))
                .collect(),
            env0: env0.to_vec(),
            perceptual: PerceptualReference::new(env0, ew, eh)?,
        })
    }

    pub fn operator(&self) -> &TransportOperator {
        self.op
    }

    pub fn env0(&self) -> &[T] {
        &self.env0
    }

    /// Total loss for the map `env`, rendering it first.
    pub fn evaluate(&self, env: &[T], lambdas: &Lambdas) -> Result<LossEvaluation<T>> {
        let rendered = self.op.apply(env)?;
        let (rw, rh) = self.op.render_dims();
        let (ew, eh) = self.op.env_dims();
        let (mut eval, unit_grad) = total_loss(
            &rendered,
            &self.target_unit,
            env,
            &self.env0,
            &self.perceptual,
            lambdas,
            Dims::rgb(rw, rh),
            Dims::rgb(ew, eh),
        )?;
        let from_render = self.op.apply_adjoint(&unit_grad)?;
        for (g, r) in eval.grad_env.iter_mut().zip(from_render) {
            *g += r;
        }
        eval.rendered = rendered;
        Ok(eval)
    }
}

/// The inversion loss on an already rendered image.
///
/// `target_unit` must already be clamped to `[0, 1]`. Returns the evaluation
/// (whose `grad_env` holds only the direct regulariser gradients) and the
/// gradient with respect to `rendered`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    rendered: &[T],
    target_unit: &[T],
    env: &[T],
    env0: &[T],
    perceptual: &PerceptualReference<T>,
    lambdas: &Lambdas,
    render_dims: Dims,
    env_dims: Dims,
) -> Result<(LossEvaluation<T>, Vec<T>)> {
    if rendered.len() != render_dims.len() || target_unit.len() != render_dims.len() {
        return Err(Error::Dimension("rendering and target sizes differ".into()));
    }
    if env.len() != env_dims.len() || env0.len() != env_dims.len() {
        return Err(Error::Dimension("map and initial map sizes differ".into()));
    }
    let unit: Vec<T> = rendered
        .iter()
        .map(|v| v.max(T::zero()).min(T::one()))
        .collect();
    let (s, gs) = metrics::ssim_with_grad(
        &unit,
        target_unit,
        render_dims,
        &SsimConfig::fitted(render_dims.width, render_dims.height),
    )?;
    let l_ssim = T::lit(lambdas.ssim);
    let grad_rendered: Vec<T> = rendered
        .iter()
        .zip(gs)
        .map(|(r, g)| {
            if *r >= T::zero() && *r <= T::one() {
                -l_ssim * g
            } else {
                T::zero()
            }
        })
        .collect();

    let (lum, g_lum) = luminance_reg(env, env0)?;
    let (percep, g_percep) = perceptual.evaluate(env)?;
    let (l1, g_l1) = l1_reg(env);
    let (tv, g_tv) = if lambdas.tv != 0.0 {
        tv_reg(env, env_dims)?
    } else {
        (T::zero(), vec![T::zero(); env.len()])
    };
    let w = |x: f64| T::lit(x);
    let grad_env = (0..env.len())
        .map(|i| {
            w(lambdas.lum) * g_lum[i]
                + w(lambdas.percep) * g_percep[i]
                + w(lambdas.l1) * g_l1[i]
                + w(lambdas.tv) * g_tv[i]
        })
        .collect();
    let ssim_term = (T::one() - s).to_f64_lossy();
    let (lum, percep, l1, tv) = (
        lum.to_f64_lossy(),
        percep.to_f64_lossy(),
        l1.to_f64_lossy(),
        tv.to_f64_lossy(),
    );
    let total = lambdas.ssim * ssim_term
        + lambdas.lum * lum
        + lambdas.percep * percep
        + lambdas.l1 * l1
        + lambdas.tv * tv;
    Ok((
        LossEvaluation {
            terms: LossTerms {
                total,
                ssim: ssim_term,
                lum,
                percep,
                l1,
                tv,
            },
            rendered: Vec::new(),
            grad_rendered: grad_rendered.clone(),
            grad_env,
        },
        grad_rendered,
    ))
}

/// Where the optimisation starts.
#[derive(Debug, Clone)]
pub enum InitMap {
    Image(HdrImage),
    Model(TrainedModel),
}

/// Evaluates a network on `inputs` and de-normalises it into a map.
pub fn siren_env<T: Real>(
    params: &MlpParams<T>,
    inputs: &Array2<T>,
    norm: &NormalizationParams,
) -> Result<Vec<T>> {
    let y = params.predict(inputs.view())?;
    Ok(y.iter().map(|v| norm.denormalize(*v)).collect())
}

/// Loss and network-parameter gradient for the sine-network
/// parameterisation, chaining map gradients through de-normalisation and the
/// network.
pub fn siren_loss_and_grad<T: Real>(
    problem: &InverseProblem<'_, T>,
    params: &MlpParams<T>,
    inputs: &Array2<T>,
    norm: &NormalizationParams,
    lambdas: &Lambdas,
) -> Result<(LossEvaluation<T>, Vec<T>, ParamGrads<T>)> {
    let (y, cache) = params.forward(inputs.view())?;
    let env: Vec<T> = y.iter().map(|v| norm.denormalize(*v)).collect();
    let eval = problem.evaluate(&env, lambdas)?;
    let dy: Vec<T> = y
        .iter()
        .zip(&eval.grad_env)
        .map(|(y, g)| *g * norm.denormalize_grad(*y))
        .collect();
    let dy = Array2::from_shape_vec(y.raw_dim(), dy).expect("gradient shaped like outputs");
    let grads = params.backward(&cache, dy.view())?;
    Ok((eval, env, grads))
}

/// One line of the optimisation trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub lambdas: Lambdas,
    pub terms: LossTerms,
}

impl TraceRecord {
    /// SSIM between the clamped rendering and target at this iteration.
    pub fn render_ssim(&self) -> f64 {
        1.0 - self.terms.ssim
    }

    pub fn line(&self) -> String {
        let (l, t) = (&self.lambdas, &self.terms);
        format!(
            "{} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.iteration,
            l.ssim,
            l.lum,
            l.percep,
            l.l1,
            l.tv,
            t.total,
            t.ssim,
            t.lum,
            t.percep,
            t.l1,
            t.tv
        )
    }
}

pub const TRACE_HEADER: &str =
    "# iteration lambda_ssim lambda_lum lambda_percep lambda_l1 lambda_tv loss ssim lum percep l1 tv";

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub env: HdrImage,
    pub rendering: HdrImage,
    pub trace: Vec<TraceRecord>,
    pub iterations: usize,
    pub wall_time: Duration,
    /// Final network for the network parameterisations.
    pub model: Option<TrainedModel>,
}

enum State {
    Pixels(FlatParams<f32>),
    LogPixels(FlatParams<f32>),
    Network {
        params: MlpParams<f32>,
        inputs: Array2<f32>,
        model: TrainedModel,
    },
}

impl State {
    fn env(&self) -> Result<Vec<f32>> {
        Ok(match self {
            State::Pixels(p) => p.data.clone(),
            State::LogPixels(q) => q.data.iter().map(|v| v.exp()).collect(),
            State::Network {
                params,
                inputs,
                model,
            } => siren_env(params, inputs, &model.norm)?,
        })
    }
}

pub fn optimize(
    target: &HdrImage,
    init: &InitMap,
    op: &TransportOperator,
    cfg: &InverseConfig,
) -> Result<InversionResult> {
    optimize_with(target, init, op, cfg, |_| {})
}

/// [`optimize`], calling `observe` after every iteration.
pub fn optimize_with(
    target: &HdrImage,
    init: &InitMap,
    op: &TransportOperator,
    cfg: &InverseConfig,
    mut observe: impl FnMut(&TraceRecord),
) -> Result<InversionResult> {
    cfg.validate()?;
    let start = Instant::now();
    if target.dims() != op.render_dims() {
        return Err(Error::Dimension(format!(
            "target {:?} vs rendering {:?}",
            target.dims(),
            op.render_dims()
        )));
    }
    let mut state = match (cfg.method, init) {
        (Method::Pixels, InitMap::Image(img)) => {
            check_env_dims(img.dims(), op)?;
            State::Pixels(FlatParams::new("pixels", img.data().to_vec()))
        }
        (Method::LogPixels, InitMap::Image(img)) => {
            check_env_dims(img.dims(), op)?;
            let q = img.data().iter().map(|v| v.max(1e-8).ln()).collect();
            State::LogPixels(FlatParams::new("log_pixels", q))
        }
        (Method::Siren | Method::RSiren, InitMap::Model(model)) => {
            check_env_dims((model.width, model.height), op)?;
            let grid = CoordGrid::new(model.width, model.height)?;
            State::Network {
                params: model.params.clone(),
                inputs: grid.coords().to_owned(),
                model: model.clone(),
            }
        }
        (m, _) => {
            let wanted = if m.uses_model() {
                "a model checkpoint"
            } else {
                "an image"
            };
            return Err(Error::Config(format!(
                "method {m} needs {wanted} as initialisation"
            )));
        }
    };

    let env0 = state.env()?;
    let problem = InverseProblem::new(op, target.data(), &env0)?;
    let mut adam = AdamState::<f32>::new();
    let lr = cfg.lr();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let lambdas = cfg.lambdas_at(t);
        let diverged = |reason: String| Error::Divergence {
            iteration: t,
            reason,
        };
        let terms = match &mut state {
            State::Pixels(p) => {
                let eval = problem.evaluate(&p.data, &lambdas)?;
                check_finite(&eval.terms).map_err(diverged)?;
                let g = FlatParams::new("pixels", eval.grad_env);
                adam.step(p, &g, lr).map_err(|e| diverged(e.to_string()))?;
                if cfg.clamp_pixels {
                    p.data.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                eval.terms
            }
            State::LogPixels(q) => {
                let env: Vec<f32> = q.data.iter().map(|v| v.exp()).collect();
                let eval = problem.evaluate(&env, &lambdas)?;
                check_finite(&eval.terms).map_err(diverged)?;
                let g = eval.grad_env.iter().zip(&env).map(|(g, e)| g * e).collect();
                adam.step(q, &FlatParams::new("log_pixels", g), lr)
                    .map_err(|e| diverged(e.to_string()))?;
                eval.terms
            }
            State::Network {
                params,
                inputs,
                model,
            } => {
                let (eval, _, grads) =
                    siren_loss_and_grad(&problem, params, inputs, &model.norm, &lambdas)?;
                check_finite(&eval.terms).map_err(diverged)?;
                adam.step(params, &grads, lr)
                    .map_err(|e| diverged(e.to_string()))?;
                eval.terms
            }
        };
        let rec = TraceRecord {
            iteration: t,
            lambdas,
            terms,
        };
        observe(&rec);
        trace.push(rec);
    }

    let (ew, eh) = op.env_dims();
    let env_data = state.env()?;
    if env_data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iteration: cfg.iterations,
            reason: "non-finite map".into(),
        });
    }
    let env = HdrImage::new(ew, eh, env_data.iter().map(|v| v.max(0.0)).collect())?;
    let rendering = op.render(&env)?;
    let model = match state {
        State::Network { params, model, .. } => Some(model.with_params(params)),
        _ => None,
    };
    Ok(InversionResult {
        env,
        rendering,
        trace,
        iterations: cfg.iterations,
        wall_time: start.elapsed(),
        model,
    })
}

fn check_env_dims(dims: (usize, usize), op: &TransportOperator) -> Result<()> {
    if dims != op.env_dims() {
        return Err(Error::Dimension(format!(
            "initial map {dims:?} vs operator crop {:?}",
            op.env_dims()
        )));
    }
    Ok(())
}

fn check_finite(terms: &LossTerms) -> std::result::Result<(), String> {
    if terms.total.is_finite() {
        Ok(())
    } else {
        Err(format!("loss {} ({terms:?})", terms.total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{build_transport, Scene};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    #[test]
    fn luminance_examples() {
        let e0 = random(12, 1, 0.1, 2.0);
        assert_eq!(luminance_reg(&e0, &e0).unwrap().0, 0.0);
        let e: Vec<f64> = e0.iter().map(|v| 2.0 * v).collect();
        let (v, g) = luminance_reg(&e, &e0).unwrap();
        assert_relative_eq!(v, hdr::luminance(&e0), max_relative = 1e-12);
        assert!(g
            .iter()
            .skip(1)
            .step_by(3)
            .all(|g| (*g - 0.7152).abs() < 1e-6));
        let (_, g) = luminance_reg(&e0, &e).unwrap();
        assert!(g
            .iter()
            .skip(1)
            .step_by(3)
            .all(|g| (*g + 0.7152).abs() < 1e-6));
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_reg(&[0.0f64; 6]).0, 0.0);
        assert_eq!(l1_reg(&[1.0f64, 2.0, 3.0]).0, 6.0);
        let (_, g) = l1_reg(&[0.5f64, 1.0, 2.0, 0.0]);
        assert_eq!(g, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn tv_examples() {
        let one = |w, h| Dims {
            width: w,
            height: h,
            channels: 1,
        };
        assert_eq!(tv_reg(&[0.3f64; 12], Dims::rgb(2, 2)).unwrap().0, 0.0);
        assert_eq!(tv_reg(&[0.0f64, 1.0], one(2, 1)).unwrap().0, 1.0);
        assert_eq!(tv_reg(&[0.0f64, 1.0, 0.0, 1.0], one(2, 2)).unwrap().0, 2.0);
    }

    #[test]
    fn perceptual_examples() {
        let e0 = random(8 * 8 * 3, 2, 0.0, 5.0);
        let (v, _) = perceptual_reg(&e0, &e0, 8, 8).unwrap();
        assert!(v.abs() < 1e-12);
        let e = random(8 * 8 * 3, 3, 0.0, 50.0);
        let (v, _) = perceptual_reg(&e, &e0, 8, 8).unwrap();
        assert!(v > 0.0 && v < 1.5);
        assert!(perceptual_reg(&e0[..6 * 8 * 3], &e0[..6 * 8 * 3], 6, 8).is_err());
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], tol: f64) {
        let h = 1e-6;
        let mut num = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            num[i] = (f(&a) - f(&b)) / (2.0 * h);
        }
        let diff: f64 = num
            .iter()
            .zip(grad)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < tol, "relative error {}", diff / norm);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let e0 = random(8 * 8 * 3, 4, 0.05, 5.0);
        let e = random(8 * 8 * 3, 5, 0.05, 5.0);
        let reference = PerceptualReference::new(&e0, 8, 8).unwrap();
        let (_, g) = reference.evaluate(&e).unwrap();
        fd_check(|x| reference.evaluate(x).unwrap().0, &e, &g, 1e-6);
    }

    fn tiny() -> (TransportOperator, HdrImage) {
        let op = build_transport(&Scene::desk(0.5).with_resolution(8, 8), 16, 8, 4, 0).unwrap();
        let env = HdrImage::from_fn(16, 8, |x, y| {
            [0.2 + 0.1 * x as f32, 0.5 + 0.05 * y as f32, 1.0]
        });
        (op, env)
    }

    #[test]
    fn loss_at_fixed_point_is_sparsity_only() {
        let (op, env) = tiny();
        let target = op.render(&env).unwrap();
        let e: Vec<f64> = env.data().iter().map(|v| *v as f64).collect();
        let t: Vec<f64> = target.data().iter().map(|v| *v as f64).collect();
        let problem = InverseProblem::new(&op, &t, &e).unwrap();
        let cfg = InverseConfig::new(Method::Pixels, 10);
        let lambdas = cfg.lambdas_at(0);
        let eval = problem.evaluate(&e, &lambdas).unwrap();
        assert_relative_eq!(
            eval.terms.total,
            lambdas.l1 * l1_reg(&e).0,
            max_relative = 1e-9
        );
        let zero = problem.evaluate(&e, &Lambdas::default()).unwrap();
        assert_eq!(zero.terms.total, 0.0);
        assert!(zero.grad_env.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn percep_weight_is_constant() {
        let cfg = InverseConfig::default();
        assert!((0..cfg.iterations).all(|t| cfg.lambdas_at(t).percep == 0.6));
        assert_eq!(cfg.lambdas_at(0).ssim, 1.0);
        assert_eq!(cfg.lambdas_at(400).ssim, 1e4);
        assert_eq!(cfg.lambdas_at(0).l1, 1e-4);
        assert_eq!(cfg.lambdas_at(400).lum, 1e-8);
        assert_eq!(cfg.iterations, 400);
        assert_eq!(Method::RSiren.default_lr(), 5e-6);
    }

    #[test]
    fn env_gradient_matches_finite_differences() {
        let (op, env) = tiny();
        let target = op.render(&env.shift_left(3)).unwrap();
        let e: Vec<f64> = env.data().iter().map(|v| *v as f64).collect();
        let t: Vec<f64> = target.data().iter().map(|v| *v as f64 * 1.3).collect();
        let problem = InverseProblem::new(&op, &t, &e).unwrap();
        let lambdas = Lambdas {
            ssim: 2.0,
            lum: 0.0,
            percep: 0.6,
            l1: 0.0,
            tv: 0.0,
        };
        let x: Vec<f64> = e
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + 0.1 * ((i % 7) as f64 - 3.0) / 3.0))
            .collect();
        let eval = problem.evaluate(&x, &lambdas).unwrap();
        fd_check(
            |x| problem.evaluate(x, &lambdas).unwrap().terms.total,
            &x,
            &eval.grad_env,
            1e-5,
        );
    }

    #[test]
    fn pixels_stay_put_at_the_fixed_point() {
        let (op, env) = tiny();
        let target = op.render(&env).unwrap();
        let cfg = InverseConfig::new(Method::Pixels, 5).without_regularizers();
        let res = optimize(&target, &InitMap::Image(env.clone()), &op, &cfg).unwrap();
        assert!(res.trace.iter().all(|r| r.terms.total.abs() < 1e-6));
        assert_eq!(res.env, env);
    }

    #[test]
    fn unseen_texels_are_never_modified() {
        let (op, env) = tiny();
        let target = op.render(&env.shift_left(4)).unwrap();
        let mut seen = vec![false; op.texel_count()];
        for p in 0..op.pixel_count() {
            for e in op.row(p) {
                seen[e.texel as usize] = true;
            }
        }
        for method in [Method::Pixels, Method::LogPixels] {
            let cfg = InverseConfig::new(method, 5).without_regularizers();
            let res = optimize(&target, &InitMap::Image(env.clone()), &op, &cfg).unwrap();
            for (t, s) in seen.iter().enumerate() {
                if !s {
                    for k in 3 * t..3 * t + 3 {
                        // log_pixels goes through exp(ln(x))
                        assert_relative_eq!(res.env.data()[k], env.data()[k], max_relative = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn method_and_init_must_agree() {
        let (op, env) = tiny();
        let cfg = InverseConfig::new(Method::Siren, 2);
        assert!(matches!(
            optimize(&env.clone(), &InitMap::Image(env), &op, &cfg),
            Err(Error::Config(_)) | Err(Error::Dimension(_))
        ));
        let target = HdrImage::zeros(8, 8);
        let env = HdrImage::zeros(16, 8);
        assert!(matches!(
            optimize(&target, &InitMap::Image(env), &op, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("dists".parse::<Method>().is_err());
    }
}
