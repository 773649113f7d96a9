//! Adam, cosine annealing with warm restarts, and geometric weight schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// A fixed, ordered collection of named parameter tensors.
pub trait ParamTensors<T> {
    fn tensor_count(&self) -> usize;
    fn tensor(&self, i: usize) -> &[T];
    fn tensor_mut(&mut self, i: usize) -> &mut [T];
    fn tensor_name(&self, i: usize) -> String;
}

/// A single named flat tensor, e.g. an environment map optimised directly.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams<T> {
    pub name: String,
    pub data: Vec<T>,
}

impl<T> FlatParams<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>) -> Self {
        Self {
            name: name.into(),
            data,
        }
    }
}

impl<T> ParamTensors<T> for FlatParams<T> {
    fn tensor_count(&self) -> usize {
        1
    }
    fn tensor(&self, _: usize) -> &[T] {
        &self.data
    }
    fn tensor_mut(&mut self, _: usize) -> &mut [T] {
        &mut self.data
    }
    fn tensor_name(&self, _: usize) -> String {
        self.name.clone()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a [`ParamTensors`] collection. Moments are allocated
/// lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G, lr: f64) -> Result<()>
    where
        P: ParamTensors<T> + ?Sized,
        G: ParamTensors<T> + ?Sized,
    {
        let count = params.tensor_count();
        if grads.tensor_count() != count {
            return Err(Error::Dimension(format!(
                "{} gradient tensors for {} parameters",
                grads.tensor_count(),
                count
            )));
        }
        for i in 0..count {
            let (p, g) = (params.tensor(i).len(), grads.tensor(i).len());
            if p != g {
                return Err(Error::Dimension(format!(
                    "{}: gradient has {g} entries, parameter has {p}",
                    params.tensor_name(i)
                )));
            }
            if grads.tensor(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    params.tensor_name(i)
                )));
            }
        }
        if self.m.is_empty() {
            self.m = (0..count)
                .map(|i| vec![T::zero(); params.tensor(i).len()])
                .collect();
            self.v = self.m.clone();
        } else if self.m.len() != count
            || (0..count).any(|i| self.m[i].len() != params.tensor(i).len())
        {
            return Err(Error::Dimension(
                "optimizer state belongs to other parameters".into(),
            ));
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::one() - T::lit(self.beta1.powi(t));
        let c2 = T::one() - T::lit(self.beta2.powi(t));
        let eps = T::lit(self.eps);
        let lr = T::lit(lr);
        for i in 0..count {
            let g = grads.tensor(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.tensor_mut(i);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub t_0: usize,
    pub t_mult: usize,
    pub lr_min: f64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, t_0: usize) -> Self {
        Self {
            lr_max,
            t_0,
            t_mult: 1,
            lr_min: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > self.lr_min && self.lr_min >= 0.0) || self.t_0 == 0 || self.t_mult == 0 {
            return Err(Error::Config(format!(
                "invalid learning-rate schedule {self:?}"
            )));
        }
        Ok(())
    }

    /// Learning rate at iteration `t`; jumps back to `lr_max` at every
    /// restart.
    pub fn lr_at(&self, t: usize) -> f64 {
        let (mut t_cur, mut period) = (t, self.t_0.max(1));
        if self.t_mult <= 1 {
            t_cur %= period;
        } else {
            while t_cur >= period {
                t_cur -= period;
                period *= self.t_mult;
            }
        }
        let phase = std::f64::consts::PI * t_cur as f64 / period as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Decreasing,
    Increasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "phases")]
pub enum Interpolation {
    /// Log-linear in every iteration.
    #[default]
    Geometric,
    /// Piecewise constant over this many equal phases, values geometric
    /// across phases.
    Phases(usize),
}

/// Geometric interpolation of a regulariser weight between `lo` and `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lo: f64,
    pub hi: f64,
    pub total_steps: usize,
    pub direction: Direction,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl LambdaSchedule {
    pub fn new(lo: f64, hi: f64, total_steps: usize, direction: Direction) -> Self {
        Self {
            lo,
            hi,
            total_steps,
            direction,
            interpolation: Interpolation::Geometric,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(value, value, 1, Direction::Increasing)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lo >= 0.0
            && self.hi >= self.lo
            && (self.lo > 0.0 || self.lo == self.hi)
            && self.lo.is_finite()
            && self.hi.is_finite()
            && !matches!(self.interpolation, Interpolation::Phases(0));
        if !ok {
            return Err(Error::Config(format!("invalid weight schedule {self:?}")));
        }
        Ok(())
    }

    fn progress(&self, t: usize) -> f64 {
        let total = self.total_steps.max(1);
        let t = t.min(total);
        match self.interpolation {
            Interpolation::Geometric => t as f64 / total as f64,
            Interpolation::Phases(n) if n <= 1 => 0.0,
            Interpolation::Phases(n) => {
                let phase = (t * n / total).min(n - 1);
                phase as f64 / (n - 1) as f64
            }
        }
    }

    pub fn lambda_at(&self, t: usize) -> f64 {
        if self.lo == self.hi {
            return self.lo;
        }
        let (start, end) = match self.direction {
            Direction::Decreasing => (self.hi, self.lo),
            Direction::Increasing => (self.lo, self.hi),
        };
        let f = self.progress(t);
        if f <= 0.0 {
            start
        } else if f >= 1.0 {
            end
        } else {
            start * (end / start).powf(f)
        }
    }
}
