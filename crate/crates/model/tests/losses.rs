mod common;

use candle_core::{DType, Device, Tensor, Var};
use hint_core::text::{TextEncoder, ToyTextEncoder};
use hint_core::FeatureLayout;
use hint_model::condition::{CondBatch, ConditionBundle};
use hint_model::denoiser::{Denoiser, DenoiserConfig};
use hint_model::losses::{
    diffusion_loss, facing_from_joints, history_schedule, loss_aff, loss_dist, loss_ori, regularizers_active, total_loss,
    LossParts,
};
use hint_model::nn::Ctx;
use hint_model::pipeline::assemble_conditions;
use hint_model::train::TrainingConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
}

fn s(x: &Tensor) -> f64 {
    x.sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// One joint per person, one frame: `a` at the origin and `b` at `(d, 0, 0)`.
fn pair(d: f64) -> (Tensor, Tensor) {
    (t(&[0.0, 0.0, 0.0], &[1, 1, 1, 3]), t(&[d, 0.0, 0.0], &[1, 1, 1, 3]))
}

#[test]
fn hand_computed_affinity_and_distance_values() {
    let (ga, gb) = pair(0.05);
    let (pa, pb) = pair(0.08);
    let aff = s(&loss_aff(&ga, &gb, &pa, &pb, 0.1).unwrap());
    assert!((aff - 9e-4).abs() < 1e-12, "{aff}");

    let (ga, gb) = pair(1.5);
    let (pa, pb) = pair(0.9);
    let dist = s(&loss_dist(&ga, &gb, &pa, &pb, 1.0).unwrap());
    assert!((dist - 0.36).abs() < 1e-12, "{dist}");
}

#[test]
fn affinity_masks_truth_and_distance_masks_prediction() {
    // truth close, prediction far: only the truth-masked loss sees it
    let (ga, gb) = pair(0.05);
    let (pa, pb) = pair(0.5);
    assert!(s(&loss_aff(&ga, &gb, &pa, &pb, 0.1).unwrap()) > 0.0);
    assert_eq!(s(&loss_dist(&ga, &gb, &pa, &pb, 0.1).unwrap()), 0.0);
    // truth far, prediction close: only the prediction-masked loss sees it
    assert_eq!(s(&loss_aff(&pa, &pb, &ga, &gb, 0.1).unwrap()), 0.0);
    assert!(s(&loss_dist(&pa, &pb, &ga, &gb, 0.1).unwrap()) > 0.0);
}

#[test]
fn empty_masks_give_zero() {
    let (ga, gb) = pair(2.0);
    let (pa, pb) = pair(0.01);
    assert_eq!(s(&loss_aff(&ga, &gb, &pa, &pb, 0.1).unwrap()), 0.0);
    assert_eq!(s(&loss_dist(&pa, &pb, &ga, &gb, 1.0).unwrap()), 0.0);
}

#[test]
fn half_turn_relative_yaw_gives_four() {
    let fwd = t(&[0.0, 1.0], &[1, 1, 2]);
    let back = t(&[0.0, -1.0], &[1, 1, 2]);
    let v = s(&loss_ori(&fwd, &fwd, &fwd, &back).unwrap());
    assert!((v - 4.0).abs() < 1e-9, "{v}");
}

#[test]
fn diffusion_loss_unit_offset() {
    let z0 = Tensor::zeros((1, 256), DType::F64, &Device::Cpu).unwrap();
    let mut v = vec![0.0; 256];
    v[17] = 1.0;
    let pred = t(&v, &[1, 256]);
    assert!((s(&diffusion_loss(&pred, &z0).unwrap()) - 1.0 / 256.0).abs() < 1e-15);
    assert_eq!(s(&diffusion_loss(&z0, &z0).unwrap()), 0.0);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = Tensor::zeros((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
    let b = Tensor::zeros((1, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
    assert!(loss_aff(&a, &a, &b, &b, 0.1).is_err());
    assert!(loss_dist(&a, &b, &a, &a, 0.1).is_err());
}

#[test]
fn history_schedule_per_stage() {
    for p in [0.0, 0.25, 0.5, 1.0] {
        assert_eq!(history_schedule(1, p).unwrap(), 0.0);
        assert_eq!(history_schedule(2, p).unwrap(), p);
        assert_eq!(history_schedule(3, p).unwrap(), 1.0);
    }
    assert!(history_schedule(0, 0.5).is_err());
    assert!(history_schedule(4, 0.5).is_err());
}

#[test]
fn truncation_gate_and_weighted_sum() {
    let cfg = TrainingConfig::default();
    let parts = LossParts {
        diff: 0.5,
        aff: 2.0,
        dist: 3.0,
        ori: 4.0,
    };
    let cutoff = (cfg.rho * 100.0).floor() as usize;
    for t_diff in 0..100 {
        let v = total_loss(&parts, t_diff, 100, &cfg);
        if t_diff > cutoff {
            assert_eq!(v, parts.diff);
            assert!(!regularizers_active(t_diff, 100, cfg.rho));
        } else {
            assert_eq!(v, 0.5 + 0.1 * 2.0 + 0.1 * 3.0 + 1e-4 * 4.0);
        }
    }
    let only_diff = LossParts { diff: 0.7, ..Default::default() };
    assert_eq!(total_loss(&only_diff, 0, 100, &cfg), 0.7);
}

fn rot_y(yaw: f64, p: [f64; 3]) -> [f64; 3] {
    let (sn, c) = yaw.sin_cos();
    [c * p[0] + sn * p[2], p[1], -sn * p[0] + c * p[2]]
}

#[test]
fn orientation_loss_ignores_a_common_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = [(0usize, 1usize)];
    for _ in 0..50 {
        let joints: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 2 * 2 * 2 * 3, -1.0, 1.0)).collect();
        let yaw = rng.random_range(-3.0..3.0);
        let shift = [rng.random_range(-5.0..5.0), 0.0, rng.random_range(-5.0..5.0)];
        let moved: Vec<Vec<f64>> = joints
            .iter()
            .map(|j| {
                j.chunks(3)
                    .flat_map(|p| {
                        let r = rot_y(yaw, [p[0], p[1], p[2]]);
                        [r[0] + shift[0], r[1] + shift[1], r[2] + shift[2]]
                    })
                    .collect()
            })
            .collect();
        let f = |js: &[Vec<f64>]| -> f64 {
            let fs: Vec<Tensor> = js.iter().map(|j| facing_from_joints(&t(j, &[2, 2, 2, 3]), &pairs).unwrap()).collect();
            s(&loss_ori(&fs[0], &fs[1], &fs[2], &fs[3]).unwrap())
        };
        assert!((f(&joints) - f(&moved)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative_and_zero_at_truth(
        a in proptest::collection::vec(-1.0f64..1.0, 12),
        b in proptest::collection::vec(-1.0f64..1.0, 12),
        p in proptest::collection::vec(-1.0f64..1.0, 12),
        q in proptest::collection::vec(-1.0f64..1.0, 12),
        d in 0.05f64..2.0,
    ) {
        let (ga, gb, pa, pb) = (t(&a, &[1, 2, 2, 3]), t(&b, &[1, 2, 2, 3]), t(&p, &[1, 2, 2, 3]), t(&q, &[1, 2, 2, 3]));
        prop_assert!(s(&loss_aff(&ga, &gb, &pa, &pb, d).unwrap()) >= 0.0);
        prop_assert!(s(&loss_dist(&ga, &gb, &pa, &pb, d).unwrap()) >= 0.0);
        prop_assert_eq!(s(&loss_aff(&ga, &gb, &ga, &gb, d).unwrap()), 0.0);
        prop_assert_eq!(s(&loss_dist(&ga, &gb, &ga, &gb, d).unwrap()), 0.0);
        let pairs = [(0usize, 1usize)];
        let fa = facing_from_joints(&ga, &pairs).unwrap();
        let fb = facing_from_joints(&gb, &pairs).unwrap();
        let fp = facing_from_joints(&pa, &pairs).unwrap();
        let fq = facing_from_joints(&pb, &pairs).unwrap();
        prop_assert!(s(&loss_ori(&fa, &fb, &fp, &fq).unwrap()) >= 0.0);
        prop_assert_eq!(s(&loss_ori(&fa, &fb, &fa, &fb).unwrap()), 0.0);
    }

    #[test]
    fn larger_thresholds_never_lower_the_losses(
        a in proptest::collection::vec(-1.0f64..1.0, 18),
        b in proptest::collection::vec(-1.0f64..1.0, 18),
        p in proptest::collection::vec(-1.0f64..1.0, 18),
        q in proptest::collection::vec(-1.0f64..1.0, 18),
        d in 0.01f64..2.0,
        extra in 0.0f64..2.0,
    ) {
        let (ga, gb, pa, pb) = (t(&a, &[1, 2, 3, 3]), t(&b, &[1, 2, 3, 3]), t(&p, &[1, 2, 3, 3]), t(&q, &[1, 2, 3, 3]));
        let lo = s(&loss_aff(&ga, &gb, &pa, &pb, d).unwrap());
        let hi = s(&loss_aff(&ga, &gb, &pa, &pb, d + extra).unwrap());
        prop_assert!(hi >= lo);
        let lo = s(&loss_dist(&ga, &gb, &pa, &pb, d).unwrap());
        let hi = s(&loss_dist(&ga, &gb, &pa, &pb, d + extra).unwrap());
        prop_assert!(hi >= lo);
    }

    #[test]
    fn affinity_ignores_joints_far_from_the_partner(
        near in proptest::collection::vec(-0.02f64..0.02, 6),
        wiggle in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        // joint 0 of both people sits near the origin; joint 1 of person A is far from everything
        let gt_a = [near[0], near[1], near[2], 5.0, 0.0, 0.0];
        let gt_b = [near[3], near[4], near[5], -5.0, 0.0, 0.0];
        let mut pred_a = gt_a;
        pred_a[0] += 0.01;
        let mut moved = pred_a;
        moved[3] += wiggle[0];
        moved[4] += wiggle[1];
        moved[5] += wiggle[2];
        let (ga, gb) = (t(&gt_a, &[1, 1, 2, 3]), t(&gt_b, &[1, 1, 2, 3]));
        let base = s(&loss_aff(&ga, &gb, &t(&pred_a, &[1, 1, 2, 3]), &gb, 0.1).unwrap());
        let other = s(&loss_aff(&ga, &gb, &t(&moved, &[1, 1, 2, 3]), &gb, 0.1).unwrap());
        prop_assert!((base - other).abs() <= 1e-12);
    }
}

/// Relative error between the analytic gradient of `f` at `x` and central differences.
fn gradient_error(f: &dyn Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize]) -> f64 {
    let var = Var::from_tensor(&t(x, shape)).unwrap();
    let loss = f(var.as_tensor()).sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let h = 1e-6;
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (s(&f(&t(&up, shape))) - s(&f(&t(&dn, shape)))) / (2.0 * h)
        })
        .collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

const INSTANCES: usize = 50;
const GRAD_TOL: f64 = 1e-4;

#[test]
fn diffusion_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let z0 = t(&uniform(&mut rng, 24, -2.0, 2.0), &[3, 8]);
        let x = uniform(&mut rng, 24, -2.0, 2.0);
        let err = gradient_error(&|p| diffusion_loss(p, &z0).unwrap(), &x, &[3, 8]);
        assert!(err < GRAD_TOL, "{err}");
    }
}

/// Random joints whose cross distances all stay clear of `d` so a finite step cannot flip a mask.
fn clear_of(rng: &mut ChaCha8Rng, d: f64) -> (Vec<f64>, Vec<f64>) {
    loop {
        let a = uniform(rng, 2 * 2 * 3 * 3, -0.4, 0.4);
        let b = uniform(rng, 2 * 2 * 3 * 3, -0.4, 0.4);
        let dist = hint_model::losses::cross_distances(&t(&a, &[2, 2, 3, 3]), &t(&b, &[2, 2, 3, 3])).unwrap();
        let v: Vec<f64> = dist.flatten_all().unwrap().to_vec1().unwrap();
        if v.iter().all(|x| (x - d).abs() > 1e-3) && v.iter().any(|x| *x < d) {
            return (a, b);
        }
    }
}

#[test]
fn affinity_and_distance_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = [2, 2, 3, 3];
    for _ in 0..INSTANCES {
        let d = 0.5;
        let (ga, gb) = clear_of(&mut rng, d);
        let (pa, pb) = clear_of(&mut rng, d);
        let (ga, gb, pb_t) = (t(&ga, &shape), t(&gb, &shape), t(&pb, &shape));
        let err = gradient_error(&|p| loss_aff(&ga, &gb, p, &pb_t, d).unwrap(), &pa, &shape);
        assert!(err < GRAD_TOL, "aff {err}");
        let err = gradient_error(&|p| loss_dist(&ga, &gb, p, &pb_t, d).unwrap(), &pa, &shape);
        assert!(err < GRAD_TOL, "dist {err}");
    }
}

#[test]
fn orientation_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shape = [2, 3, 2];
    for _ in 0..INSTANCES {
        let ga = t(&uniform(&mut rng, 12, -1.0, 1.0), &shape);
        let gb = t(&uniform(&mut rng, 12, -1.0, 1.0), &shape);
        let pb = t(&uniform(&mut rng, 12, -1.0, 1.0), &shape);
        let pa = uniform(&mut rng, 12, -1.0, 1.0);
        let err = gradient_error(&|p| loss_ori(&ga, &gb, p, &pb).unwrap(), &pa, &shape);
        assert!(err < GRAD_TOL, "{err}");
    }
}

fn toy_bundles(rng: &mut ChaCha8Rng, text_dim: usize) -> Vec<ConditionBundle> {
    let ds = common::dataset();
    let layout = FeatureLayout::synthetic8();
    let scene = &ds.scenes[rng.random_range(0..ds.scenes.len())];
    let start = rng.random_range(0..scene.frames() - 4);
    let histories: Vec<_> = scene.agents.iter().map(|a| a.frames.slice_rows(start, 4)).collect();
    let enc = ToyTextEncoder { dim: text_dim };
    let text = enc.encode(&scene.text).unwrap();
    let texts: Vec<_> = histories.iter().map(|_| &text).collect();
    assemble_conditions(&layout, &histories, &texts, start / 16, scene.frames())
        .unwrap()
        .into_iter()
        .map(|c| c.bundle)
        .collect()
}

#[test]
fn two_block_denoiser_gradient_matches_finite_differences() {
    let ds = common::dataset();
    let norm = common::normalizer(&ds);
    let layout = FeatureLayout::synthetic8();
    let config = DenoiserConfig {
        blocks: 2,
        heads: 2,
        hidden: 16,
        ff: 32,
        dropout: 0.0,
        latent_dim: 8,
        text_dim: 8,
        ..DenoiserConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..INSTANCES {
        let model = Denoiser::new(config.clone(), layout.dim(), DType::F64, i as u64).unwrap();
        let bundles = toy_bundles(&mut rng, config.text_dim);
        let refs: Vec<&ConditionBundle> = bundles.iter().collect();
        let cond = CondBatch::build(&refs, &norm, DType::F64).unwrap();
        let b = refs.len();
        let t_diff: Vec<usize> = (0..b).map(|_| rng.random_range(0..config.diffusion_steps)).collect();
        let weights = t(&uniform(&mut rng, b * config.latent_dim, -1.0, 1.0), &[b, config.latent_dim]);
        let x = uniform(&mut rng, b * config.latent_dim, -2.0, 2.0);
        let f = |z: &Tensor| model.forward(z, &t_diff, &cond, &mut Ctx::eval()).unwrap().mul(&weights).unwrap();
        let err = gradient_error(&f, &x, &[b, config.latent_dim]);
        assert!(err < GRAD_TOL, "instance {i}: {err}");
    }
}
