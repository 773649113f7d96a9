//! A small reverse-mode differentiable sine MLP.
//!
//! Every hidden layer computes `sin(omega_0 * (W h + b))`; the last layer is
//! linear followed by an optional sigmoid. The backward pass is written out
//! by hand for exactly this recurrence.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamTensors;
use crate::real::Real;

/// Rows per evaluation chunk. Fixed so that gradient reductions happen in
/// the same order regardless of thread count.
const CHUNK_ROWS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpArchitecture {
    pub in_features: usize,
    pub out_features: usize,
    pub hidden_features: usize,
    pub hidden_layers: usize,
    pub omega_0: f32,
    pub final_activation: FinalActivation,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self {
            in_features: 2,
            out_features: 3,
            hidden_features: 256,
            hidden_layers: 6,
            omega_0: 30.0,
            final_activation: FinalActivation::Sigmoid,
        }
    }
}

impl MlpArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0
            || self.out_features == 0
            || self.hidden_features == 0
            || self.hidden_layers == 0
        {
            return Err(Error::Config(format!("layer sizes must be >= 1: {self:?}")));
        }
        if !(self.omega_0 > 0.0 && self.omega_0.is_finite()) {
            return Err(Error::Config(format!(
                "omega_0 must be positive, got {}",
                self.omega_0
            )));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` for each linear layer: one input sine layer,
    /// `hidden_layers` hidden sine layers and the output layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_features;
        let mut shapes = vec![(h, self.in_features)];
        shapes.extend(std::iter::repeat_n((h, h), self.hidden_layers));
        shapes.push((self.out_features, h));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `fan_out x fan_in`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Layer<T> {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            weight: self.weight.mapv(|v| U::lit(v.to_f64_lossy())),
            bias: self.bias.mapv(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

fn layer_tensor<T>(layers: &[Layer<T>], i: usize) -> &[T] {
    let l = &layers[i / 2];
    if i.is_multiple_of(2) {
        l.weight.as_slice().expect("standard layout")
    } else {
        l.bias.as_slice().expect("standard layout")
    }
}

fn layer_tensor_mut<T>(layers: &mut [Layer<T>], i: usize) -> &mut [T] {
    let l = &mut layers[i / 2];
    if i.is_multiple_of(2) {
        l.weight.as_slice_mut().expect("standard layout")
    } else {
        l.bias.as_slice_mut().expect("standard layout")
    }
}

fn layer_tensor_name(i: usize) -> String {
    format!(
        "layer{}.{}",
        i / 2,
        if i.is_multiple_of(2) {
            "weight"
        } else {
            "bias"
        }
    )
}

macro_rules! impl_param_tensors {
    ($ty:ident) => {
        impl<T: Real> ParamTensors<T> for $ty<T> {
            fn tensor_count(&self) -> usize {
                self.layers.len() * 2
            }
            fn tensor(&self, i: usize) -> &[T] {
                layer_tensor(&self.layers, i)
            }
            fn tensor_mut(&mut self, i: usize) -> &mut [T] {
                layer_tensor_mut(&mut self.layers, i)
            }
            fn tensor_name(&self, i: usize) -> String {
                layer_tensor_name(i)
            }
        }
    };
}

/// The network weights together with the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T = f32> {
    arch: MlpArchitecture,
    layers: Vec<Layer<T>>,
}

/// Gradient of a scalar loss with respect to every entry of an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl_param_tensors!(MlpParams);
impl_param_tensors!(ParamGrads);

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(params: &MlpParams<T>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }
}

/// Sine-network initialisation: first-layer weights uniform in
/// `±1/fan_in`, later weights uniform in `±sqrt(6/fan_in)/omega_0`, biases zero.
pub fn siren_init<T: Real>(arch: &MlpArchitecture, seed: u64) -> Result<MlpParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = arch.omega_0 as f64;
    let layers = arch
        .layer_shapes()
        .into_iter()
        .enumerate()
        .map(|(l, (fan_out, fan_in))| {
            let bound = if l == 0 {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / omega
            };
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let weight =
                Array2::from_shape_simple_fn((fan_out, fan_in), || T::lit(dist.sample(&mut rng)));
            Layer {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpParams {
        arch: *arch,
        layers,
    })
}

impl<T: Real> MlpParams<T> {
    /// Wraps explicit layers, checking them against the architecture.
    pub fn from_layers(arch: MlpArchitecture, layers: Vec<Layer<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Dimension(format!(
                "{} layers for an architecture with {}",
                layers.len(),
                shapes.len()
            )));
        }
        for (l, (layer, (o, i))) in layers.iter().zip(&shapes).enumerate() {
            if layer.weight.dim() != (*o, *i) || layer.bias.len() != *o {
                return Err(Error::Dimension(format!(
                    "layer {l}: weight {:?} bias {} but expected ({o}, {i}) and {o}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn cast<U: Real>(&self) -> MlpParams<U> {
        MlpParams {
            arch: self.arch,
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        (0..self.tensor_count()).all(|i| self.tensor(i).iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, inputs: &ArrayView2<T>) -> Result<()> {
        if inputs.ncols() != self.arch.in_features {
            return Err(Error::Dimension(format!(
                "inputs have {} features, network expects {}",
                inputs.ncols(),
                self.arch.in_features
            )));
        }
        Ok(())
    }

    fn forward_chunk(&self, x: ArrayView2<T>, keep: bool) -> (Array2<T>, Option<ChunkCache<T>>) {
        let omega = T::lit(self.arch.omega_0 as f64);
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        let mut cache = keep.then(|| ChunkCache {
            inputs: Vec::with_capacity(self.layers.len()),
            derivs: Vec::with_capacity(self.layers.len()),
        });
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let mut deriv = if keep {
                Some(Array2::zeros(z.raw_dim()))
            } else {
                None
            };
            if l < last {
                match deriv.as_mut() {
                    Some(d) => Zip::from(&mut z).and(d).for_each(|z, d| {
                        let (s, c) = (omega * *z).sin_cos();
                        *z = s;
                        *d = omega * c;
                    }),
                    None => z.mapv_inplace(|v| (omega * v).sin()),
                }
            } else {
                match self.arch.final_activation {
                    FinalActivation::Sigmoid => {
                        z.mapv_inplace(|v| T::one() / (T::one() + (-v).exp()));
                        if let Some(d) = deriv.as_mut() {
                            Zip::from(d)
                                .and(&z)
                                .for_each(|d, s| *d = *s * (T::one() - *s));
                        }
                    }
                    FinalActivation::Identity => {
                        if let Some(d) = deriv.as_mut() {
                            d.fill(T::one());
                        }
                    }
                }
            }
            if let Some(c) = cache.as_mut() {
                c.inputs.push(std::mem::replace(&mut h, z));
                c.derivs.push(deriv.expect("kept"));
            } else {
                h = z;
            }
        }
        (h, cache)
    }

    fn run(&self, inputs: ArrayView2<T>, keep: bool) -> (Array2<T>, Vec<ChunkCache<T>>) {
        let n = inputs.nrows();
        let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
        let parts: Vec<(Array2<T>, Option<ChunkCache<T>>)> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + CHUNK_ROWS).min(n);
                self.forward_chunk(inputs.slice(s![s..e, ..]), keep)
            })
            .collect();
        let mut out = Array2::zeros((n, self.arch.out_features));
        let mut caches = Vec::with_capacity(parts.len());
        for (&s, (y, c)) in starts.iter().zip(parts) {
            out.slice_mut(s![s..s + y.nrows(), ..]).assign(&y);
            caches.extend(c);
        }
        (out, caches)
    }

    /// Evaluates the network on `n x in_features` inputs, keeping the
    /// activations needed by [`MlpParams::backward`].
    pub fn forward(&self, inputs: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_inputs(&inputs)?;
        let (out, chunks) = self.run(inputs, true);
        Ok((
            out,
            ForwardCache {
                rows: inputs.nrows(),
                shapes: self.arch.layer_shapes(),
                chunks,
            },
        ))
    }

    /// Forward pass without an activation cache.
    pub fn predict(&self, inputs: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_inputs(&inputs)?;
        Ok(self.run(inputs, false).0)
    }

    /// Gradients of `L = sum(output_grads * outputs)` with respect to every
    /// parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        output_grads: ArrayView2<T>,
    ) -> Result<ParamGrads<T>> {
        if cache.shapes != self.arch.layer_shapes() {
            return Err(Error::Dimension(
                "activation cache belongs to another architecture".into(),
            ));
        }
        if output_grads.dim() != (cache.rows, self.arch.out_features) {
            return Err(Error::Dimension(format!(
                "output gradient {:?}, expected ({}, {})",
                output_grads.dim(),
                cache.rows,
                self.arch.out_features
            )));
        }
        let starts: Vec<usize> = (0..cache.rows).step_by(CHUNK_ROWS).collect();
        let partials: Vec<ParamGrads<T>> = cache
            .chunks
            .par_iter()
            .zip(starts.par_iter())
            .map(|(chunk, &s)| {
                let rows = chunk.inputs[0].nrows();
                self.backward_chunk(chunk, output_grads.slice(s![s..s + rows, ..]))
            })
            .collect();
        let mut total = ParamGrads::zeros_like(self);
        for part in partials {
            for (acc, p) in total.layers.iter_mut().zip(part.layers) {
                acc.weight += &p.weight;
                acc.bias += &p.bias;
            }
        }
        Ok(total)
    }

    fn backward_chunk(&self, chunk: &ChunkCache<T>, out_grad: ArrayView2<T>) -> ParamGrads<T> {
        let last = self.layers.len() - 1;
        let mut delta = &out_grad * &chunk.derivs[last];
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in (0..=last).rev() {
            let weight = delta.t().dot(&chunk.inputs[l]);
            let bias = delta.sum_axis(Axis(0));
            layers.push(Layer { weight, bias });
            if l > 0 {
                delta = delta.dot(&self.layers[l].weight) * &chunk.derivs[l - 1];
            }
        }
        layers.reverse();
        ParamGrads { layers }
    }
}

struct ChunkCache<T> {
    /// Input to each layer.
    inputs: Vec<Array2<T>>,
    /// Derivative of each layer's activation at its pre-activation.
    derivs: Vec<Array2<T>>,
}

/// Activations retained by [`MlpParams::forward`].
pub struct ForwardCache<T> {
    rows: usize,
    shapes: Vec<(usize, usize)>,
    chunks: Vec<ChunkCache<T>>,
}

impl<T> ForwardCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Texel-centre coordinates of a `width x height` grid in `[-1, 1]^2`,
/// row-major with `x` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    width: usize,
    height: usize,
    coords: Array2<f32>,
}

impl CoordGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "coordinate grid {width}x{height}"
            )));
        }
        let mut coords = Array2::zeros((width * height, 2));
        for y in 0..height {
            for x in 0..width {
                let r = y * width + x;
                coords[[r, 0]] = ((2 * x + 1) as f64 / width as f64 - 1.0) as f32;
                coords[[r, 1]] = ((2 * y + 1) as f64 / height as f64 - 1.0) as f32;
            }
        }
        Ok(Self {
            width,
            height,
            coords,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> ArrayView2<'_, f32> {
        self.coords.view()
    }

    pub fn to_array<T: Real>(&self) -> Array2<T> {
        self.coords.mapv(|v| T::lit(v as f64))
    }
}
