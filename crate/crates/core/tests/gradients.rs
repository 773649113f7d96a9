//! Analytic gradients against central finite differences.

use envsiren::inverse::{siren_loss_and_grad, InverseProblem, Lambdas};
use envsiren::metrics::{self, Dims, SsimConfig};
use envsiren::mlp::{siren_init, CoordGrid, MlpArchitecture, MlpParams};
use envsiren::optim::ParamTensors;
use envsiren::render::{build_transport, Scene};
use envsiren::NormalizationParams;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> MlpArchitecture {
    MlpArchitecture {
        hidden_features: 8,
        hidden_layers: 1,
        ..MlpArchitecture::default()
    }
}

fn weighted_output(params: &MlpParams<f64>, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
    let y = params.predict(x.view()).unwrap();
    (&y * c).sum()
}

/// Central differences of `f` over every parameter, in f64.
fn numeric_grad(
    params: &MlpParams<f64>,
    step: f64,
    f: impl Fn(&MlpParams<f64>) -> f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    let mut p = params.clone();
    for t in 0..p.tensor_count() {
        for i in 0..p.tensor(t).len() {
            let orig = p.tensor(t)[i];
            p.tensor_mut(t)[i] = orig + step;
            let up = f(&p);
            p.tensor_mut(t)[i] = orig - step;
            let down = f(&p);
            p.tensor_mut(t)[i] = orig;
            out.push((up - down) / (2.0 * step));
        }
    }
    out
}

fn flatten<P: ParamTensors<T>, T: Copy + Into<f64>>(p: &P) -> Vec<f64> {
    (0..p.tensor_count())
        .flat_map(|t| p.tensor(t).iter().map(|v| (*v).into()).collect::<Vec<_>>())
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

fn probe(rows: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((rows, 2), |_| rng.random_range(-1.0..1.0));
    let c = Array2::from_shape_fn((rows, 3), |_| rng.random_range(-1.0..1.0));
    (x, c)
}

#[test]
fn mlp_backward_matches_finite_differences_in_f64() {
    let arch = small_arch();
    assert!(arch.parameter_count() <= 1000);
    let params: MlpParams<f64> = siren_init(&arch, 11).unwrap();
    let (x, c) = probe(6, 1);
    let (_, cache) = params.forward(x.view()).unwrap();
    let analytic = flatten(&params.backward(&cache, c.view()).unwrap());
    let numeric = numeric_grad(&params, 1e-6, |p| weighted_output(p, &x, &c));
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn mlp_backward_in_f32_is_close_to_f64_differences() {
    let arch = small_arch();
    let params32: MlpParams<f32> = siren_init(&arch, 12).unwrap();
    let params64: MlpParams<f64> = params32.cast();
    let (x, c) = probe(6, 2);
    let (x32, c32) = (x.mapv(|v| v as f32), c.mapv(|v| v as f32));
    let (_, cache) = params32.forward(x32.view()).unwrap();
    let grads = params32.backward(&cache, c32.view()).unwrap();
    let analytic: Vec<f64> = flatten(&grads);
    let numeric = numeric_grad(&params64, 1e-6, |p| weighted_output(p, &x, &c));
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = Dims::rgb(16, 16);
    let a: Vec<f64> = (0..dims.len()).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = a
        .iter()
        .map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
        .collect();
    let cfg = SsimConfig::default();
    let (_, grad) = metrics::ssim_with_grad(&a, &b, dims, &cfg).unwrap();
    let h = 1e-6;
    for idx in (0..dims.len()).step_by(37) {
        let mut up = a.clone();
        up[idx] += h;
        let mut down = a.clone();
        down[idx] -= h;
        let fd = (metrics::ssim(&up, &b, dims, &cfg).unwrap()
            - metrics::ssim(&down, &b, dims, &cfg).unwrap())
            / (2.0 * h);
        assert!(
            (grad[idx] - fd).abs() <= 1e-6 + 1e-5 * fd.abs(),
            "index {idx}: {} vs {fd}",
            grad[idx]
        );
    }
}

#[test]
fn network_inversion_gradient_chains_through_renderer() {
    let op = build_transport(&Scene::desk(0.5).with_resolution(8, 8), 16, 8, 2, 3).unwrap();
    let norm = NormalizationParams {
        log_min: (0.01f64).ln(),
        log_max: (0.6f64).ln(),
        eps: 0.01,
    };
    let inputs: Array2<f64> = CoordGrid::new(16, 8).unwrap().to_array();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let env_target: Vec<f64> = (0..16 * 8 * 3)
        .map(|_| rng.random_range(0.05..0.5))
        .collect();
    let env0: Vec<f64> = (0..16 * 8 * 3)
        .map(|_| rng.random_range(0.05..0.5))
        .collect();
    let target = op.apply(&env_target).unwrap();
    let problem = InverseProblem::new(&op, &target, &env0).unwrap();
    let lambdas = Lambdas {
        ssim: 3.0,
        lum: 0.5,
        percep: 0.6,
        l1: 1e-3,
        tv: 1e-2,
    };

    let params: MlpParams<f64> = siren_init(&small_arch(), 4).unwrap();
    let (_, _, grads) = siren_loss_and_grad(&problem, &params, &inputs, &norm, &lambdas).unwrap();
    let analytic = flatten(&grads);
    let numeric = numeric_grad(&params, 1e-6, |p| {
        siren_loss_and_grad(&problem, p, &inputs, &norm, &lambdas)
            .unwrap()
            .0
            .terms
            .total
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-5, "relative error {err:e}");
}
