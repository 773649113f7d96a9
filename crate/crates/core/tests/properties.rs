use envsiren::hdr::HdrImage;
use envsiren::metrics::{self, Dims, SsimConfig};
use envsiren::mlp::{siren_init, CoordGrid, FinalActivation, MlpArchitecture, MlpParams};
use envsiren::optim::{Direction, LambdaSchedule, LrSchedule};
use envsiren::render::{build_transport, Scene};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64, scale: f32) -> HdrImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HdrImage::from_fn(w, h, |_, _| {
        [
            rng.random::<f32>() * scale,
            rng.random::<f32>() * scale,
            rng.random::<f32>() * scale,
        ]
    })
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn render_is_linear_positive_and_adjoint(seed in 0u64..1000, roughness in prop::sample::select(vec![0.0, 0.3, 0.5, 1.0])) {
        let scene = Scene::desk(roughness).with_resolution(8, 8);
        let op = build_transport(&scene, 16, 8, 4, seed).unwrap();
        let e1 = random_image(16, 8, seed, 2.0);
        let e2 = random_image(16, 8, seed + 1, 5.0);
        let (a, b) = (0.7f32, 1.9f32);
        let mixed = HdrImage::from_fn(16, 8, |x, y| {
            let (p, q) = (e1.pixel(x, y), e2.pixel(x, y));
            [a * p[0] + b * q[0], a * p[1] + b * q[1], a * p[2] + b * q[2]]
        });
        let r1 = op.render(&e1).unwrap();
        let r2 = op.render(&e2).unwrap();
        let rm = op.render(&mixed).unwrap();
        for ((m, x), y) in rm.data().iter().zip(r1.data()).zip(r2.data()) {
            let expect = a as f64 * *x as f64 + b as f64 * *y as f64;
            prop_assert!((*m as f64 - expect).abs() <= 1e-5 * expect.abs().max(1e-6));
        }
        prop_assert!(r1.data().iter().all(|v| *v >= 0.0));

        let g = random_image(8, 8, seed + 2, 1.0);
        let lhs = dot(r1.data(), g.data());
        let rhs = dot(e1.data(), op.adjoint(&g).unwrap().data());
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs());
    }

    #[test]
    fn operator_only_addresses_the_crop(seed in 0u64..1000) {
        let op = build_transport(&Scene::desk(0.5).with_resolution(6, 6), 12, 4, 4, seed).unwrap();
        for p in 0..op.pixel_count() {
            for e in op.row(p) {
                prop_assert!((e.texel as usize) < 48);
                prop_assert!(e.weight >= 0.0 && e.weight.is_finite());
            }
        }
    }

    #[test]
    fn psnr_decreases_with_mse(base in 0.0f64..1.0, d1 in 1e-4f64..0.3, extra in 1e-4f64..0.3) {
        let a = vec![base; 12];
        let b1: Vec<f64> = a.iter().map(|v| v + d1).collect();
        let b2: Vec<f64> = a.iter().map(|v| v + d1 + extra).collect();
        let p1 = metrics::psnr(&a, &b1, 1.0).unwrap();
        let p2 = metrics::psnr(&a, &b2, 1.0).unwrap();
        prop_assert!(p2 < p1);
    }

    #[test]
    fn metrics_are_flip_invariant(seed in 0u64..1000) {
        let a = random_image(16, 12, seed, 1.0);
        let b = random_image(16, 12, seed + 7, 1.0);
        let dims = Dims::rgb(16, 12);
        let cfg = SsimConfig::fitted(16, 12);
        let s = metrics::ssim(a.data(), b.data(), dims, &cfg).unwrap();
        let (fa, fb) = (a.flip_horizontal(), b.flip_horizontal());
        let sf = metrics::ssim(fa.data(), fb.data(), dims, &cfg).unwrap();
        prop_assert!((s - sf).abs() < 1e-6);
        prop_assert!((metrics::mse(a.data(), b.data()).unwrap() - metrics::mse(fa.data(), fb.data()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_and_sigmoid_bounded(seed in 0u64..1000, hidden in 4usize..24, layers in 1usize..4) {
        let arch = MlpArchitecture { hidden_features: hidden, hidden_layers: layers, ..MlpArchitecture::default() };
        let params: MlpParams<f32> = siren_init(&arch, seed).unwrap();
        let grid = CoordGrid::new(9, 7).unwrap();
        let a = params.predict(grid.coords()).unwrap();
        let b = params.predict(grid.coords()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn lambda_endpoints_are_exact(lo_exp in -9i32..0, span in 1i32..6, total in 1usize..500) {
        let lo = 10f64.powi(lo_exp);
        let hi = 10f64.powi(lo_exp + span);
        let dec = LambdaSchedule::new(lo, hi, total, Direction::Decreasing);
        let inc = LambdaSchedule::new(lo, hi, total, Direction::Increasing);
        prop_assert_eq!(dec.lambda_at(0), hi);
        prop_assert_eq!(dec.lambda_at(total), lo);
        prop_assert_eq!(inc.lambda_at(0), lo);
        prop_assert_eq!(inc.lambda_at(total), hi);
    }

    #[test]
    fn cosine_schedule_jumps_only_at_restarts(t0 in 2usize..200, lr in 1e-6f64..1e-1) {
        let s = LrSchedule::new(lr, t0);
        for t in 0..3 * t0 {
            let (a, b) = (s.lr_at(t), s.lr_at(t + 1));
            if (t + 1) % t0 == 0 {
                prop_assert_eq!(b, lr);
                prop_assert!(b - a > 0.0);
            } else {
                // one step moves the cosine by at most pi / t0 of its range
                prop_assert!(b <= a && a - b <= lr * std::f64::consts::PI / t0 as f64);
            }
        }
    }
}

#[test]
fn sigmoid_head_stays_inside_unit_interval_for_large_inputs() {
    let arch = MlpArchitecture {
        hidden_features: 8,
        hidden_layers: 1,
        final_activation: FinalActivation::Sigmoid,
        ..MlpArchitecture::default()
    };
    let params: MlpParams<f64> = siren_init(&arch, 3).unwrap();
    let x = ndarray::Array2::from_shape_fn((50, 2), |(i, j)| (i as f64 - 25.0) * 0.37 + j as f64);
    let y = params.predict(x.view()).unwrap();
    assert!(y.iter().all(|v| *v > 0.0 && *v < 1.0));
}
