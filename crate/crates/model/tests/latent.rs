mod common;

use candle_core::{DType, Device, Tensor, Var};
use hint_core::text::{TextEncoder, ToyTextEncoder};
use hint_core::FeatureLayout;
use hint_model::condition::{CondBatch, ConditionBundle};
use hint_model::denoiser::{normal_vec, sample_latent, Denoiser, DenoiserConfig};
use hint_model::nn::Ctx;
use hint_model::pipeline::assemble_conditions;
use hint_model::schedule::{q_sample, DiffusionSchedule};
use hint_model::vae::{kl_term, reparameterize, vae_loss, MotionVae, VaeConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
}

fn s(x: &Tensor) -> f64 {
    x.sum_all().unwrap().to_scalar::<f64>().unwrap()
}

fn flat(x: &Tensor) -> Vec<f64> {
    x.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn kl_closed_form_at_unit_mean() {
    let mu = Tensor::ones((1, 256), DType::F64, &Device::Cpu).unwrap();
    let lv = Tensor::zeros((1, 256), DType::F64, &Device::Cpu).unwrap();
    let kl = s(&kl_term(&mu, &lv).unwrap());
    assert!((kl - 128.0).abs() <= 1e-6, "{kl}");
}

#[test]
fn kl_matches_monte_carlo() {
    // E_q[log q(z) − log p(z)] with q = N(1, I), p = N(0, I) in 256 dimensions
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let eps = normal_vec(&mut rng, 256);
        acc += eps.iter().map(|e| (1.0 + e).powi(2) / 2.0 - e * e / 2.0).sum::<f64>();
    }
    let mc = acc / n as f64;
    assert!((mc - 128.0).abs() / 128.0 < 0.01, "{mc}");
}

#[test]
fn vae_loss_is_zero_at_truth_with_standard_posterior() {
    let x = t(&[0.3, -0.2, 1.0, 0.5], &[1, 2, 2]);
    let zero = Tensor::zeros((1, 8), DType::F64, &Device::Cpu).unwrap();
    let l = vae_loss(&x, &x, &zero, &zero, 1e-4).unwrap();
    assert_eq!(s(&l.total), 0.0);
    assert_eq!(s(&l.kl), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(mu in proptest::collection::vec(-3.0f64..3.0, 8), lv in proptest::collection::vec(-3.0f64..3.0, 8)) {
        prop_assert!(s(&kl_term(&t(&mu, &[2, 4]), &t(&lv, &[2, 4])).unwrap()) >= 0.0);
    }

    #[test]
    fn reparameterize_closed_forms(mu in proptest::collection::vec(-3.0f64..3.0, 6), n in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let mu_t = t(&mu, &[1, 6]);
        let zero = Tensor::zeros((1, 6), DType::F64, &Device::Cpu).unwrap();
        prop_assert_eq!(flat(&reparameterize(&mu_t, &zero, &zero).unwrap()), mu.clone());
        let z = flat(&reparameterize(&mu_t, &zero, &t(&n, &[1, 6])).unwrap());
        for i in 0..6 {
            prop_assert!((z[i] - (mu[i] + n[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn reparameterized_samples_center_on_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10_000;
    let mu = t(&[0.7; 4], &[1, 4]);
    let lv = t(&[0.4f64.ln(); 4], &[1, 4]);
    let noise = t(&normal_vec(&mut rng, n * 4), &[n, 4]);
    let z = reparameterize(&mu.broadcast_as((n, 4)).unwrap(), &lv.broadcast_as((n, 4)).unwrap(), &noise).unwrap();
    let mean = flat(&z.mean(0).unwrap());
    let tol = 3.0 * 0.4f64.sqrt() / (n as f64).sqrt();
    assert!(mean.iter().all(|m| (m - 0.7).abs() < tol), "{mean:?}");
}

#[test]
fn vae_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let recon = t(&normal_vec(&mut rng, 12), &[2, 3, 2]);
    let target = t(&normal_vec(&mut rng, 12), &[2, 3, 2]);
    for _ in 0..50 {
        let mu = normal_vec(&mut rng, 10);
        let lv: Vec<f64> = normal_vec(&mut rng, 10).iter().map(|x| 0.5 * x).collect();
        let mv = Var::from_tensor(&t(&mu, &[2, 5])).unwrap();
        let lvv = Var::from_tensor(&t(&lv, &[2, 5])).unwrap();
        let loss = vae_loss(&recon, &target, mv.as_tensor(), lvv.as_tensor(), 0.3).unwrap();
        let g = loss.total.backward().unwrap();
        let analytic = [flat(g.get(mv.as_tensor()).unwrap()), flat(g.get(lvv.as_tensor()).unwrap())].concat();
        let h = 1e-6;
        let f = |m: &[f64], l: &[f64]| s(&vae_loss(&recon, &target, &t(m, &[2, 5]), &t(l, &[2, 5]), 0.3).unwrap().total);
        let mut numeric = Vec::new();
        for which in 0..2 {
            for i in 0..10 {
                let (mut mu_u, mut lv_u, mut mu_d, mut lv_d) = (mu.clone(), lv.clone(), mu.clone(), lv.clone());
                if which == 0 {
                    mu_u[i] += h;
                    mu_d[i] -= h;
                } else {
                    lv_u[i] += h;
                    lv_d[i] -= h;
                }
                numeric.push((f(&mu_u, &lv_u) - f(&mu_d, &lv_d)) / (2.0 * h));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "{}", diff / norm);
    }
}

#[test]
fn cosine_schedule_invariants() {
    for steps in [1, 10, 100, 1000] {
        let sch = DiffusionSchedule::cosine(steps).unwrap();
        assert_eq!(sch.alpha_bar[0], 1.0);
        assert!(sch.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        if steps > 1 {
            let last = *sch.alpha_bar.last().unwrap();
            assert!(last > 0.0 && last < 0.05, "{steps}: {last}");
        }
    }
    assert!(DiffusionSchedule::cosine(0).is_err());
}

#[test]
fn q_sample_closed_forms_and_variance() {
    let sch = DiffusionSchedule::cosine(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z0 = t(&normal_vec(&mut rng, 16), &[2, 8]);
    let eps = t(&normal_vec(&mut rng, 16), &[2, 8]);
    assert_eq!(flat(&q_sample(&sch, &z0, &[0, 0], &eps).unwrap()), flat(&z0));
    let zero = z0.zeros_like().unwrap();
    let at = sch.alpha_bar[40];
    let scaled = flat(&q_sample(&sch, &z0, &[40, 40], &zero).unwrap());
    for (a, b) in scaled.iter().zip(flat(&z0)) {
        assert!((a - at.sqrt() * b).abs() < 1e-12);
    }
    assert!(q_sample(&sch, &z0, &[100, 0], &eps).is_err());

    let n = 10_000;
    let base = t(&vec![0.5; n], &[n, 1]);
    let noise = t(&normal_vec(&mut rng, n), &[n, 1]);
    let zt = flat(&q_sample(&sch, &base, &vec![60; n], &noise).unwrap());
    let mean = zt.iter().sum::<f64>() / n as f64;
    let var = zt.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want = 1.0 - sch.alpha_bar[60];
    assert!((var - want).abs() / want < 0.05, "{var} vs {want}");
}

fn bundles(text_dim: usize, scene: usize, start: usize) -> Vec<ConditionBundle> {
    let ds = common::dataset();
    let layout = FeatureLayout::synthetic8();
    let sc = &ds.scenes[scene];
    let histories: Vec<_> = sc.agents.iter().map(|a| a.frames.slice_rows(start, 4)).collect();
    let text = ToyTextEncoder { dim: text_dim }.encode(&sc.text).unwrap();
    let texts: Vec<_> = histories.iter().map(|_| &text).collect();
    assemble_conditions(&layout, &histories, &texts, 0, sc.frames())
        .unwrap()
        .into_iter()
        .map(|c| c.bundle)
        .collect()
}

fn small_denoiser(steps: usize, dtype: DType) -> Denoiser {
    let config = DenoiserConfig {
        diffusion_steps: steps,
        ..DenoiserConfig::desk()
    };
    Denoiser::new(config, FeatureLayout::synthetic8().dim(), dtype, 21).unwrap()
}

#[test]
fn sampling_is_seed_deterministic_and_collapses_with_one_step() {
    let ds = common::dataset();
    let norm = common::normalizer(&ds);
    let b = bundles(64, 0, 0);
    let refs: Vec<&ConditionBundle> = b.iter().collect();
    let cond = CondBatch::build(&refs, &norm, DType::F32).unwrap();
    let model = small_denoiser(100, DType::F32);
    let sch = DiffusionSchedule::cosine(100).unwrap();
    let a = flat(&sample_latent(&model, &sch, &cond, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
    let c = flat(&sample_latent(&model, &sch, &cond, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
    assert_eq!(a, c);
    assert!(a.iter().all(|v| v.is_finite()));

    let one = DiffusionSchedule::cosine(1).unwrap();
    let model = small_denoiser(1, DType::F32);
    let sampled = flat(&sample_latent(&model, &one, &cond, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Tensor::from_vec(normal_vec(&mut rng, refs.len() * 32), (refs.len(), 32), &Device::Cpu)
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap();
    let direct = flat(&model.forward(&noise, &vec![0; refs.len()], &cond, &mut Ctx::eval()).unwrap());
    assert_eq!(sampled, direct);
}

#[test]
fn padded_partner_slots_do_not_change_the_output() {
    let ds = common::dataset();
    let norm = common::normalizer(&ds);
    let model = small_denoiser(100, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let two = bundles(64, 1, 8);
    let mut solo = two[0].clone();
    solo.partners.clear();
    // a three-agent bundle forces two partner slots on every row of the batch
    let mut wide = two[1].clone();
    wide.partners.push(wide.partners[0].clone());
    let z = Tensor::from_vec(normal_vec(&mut rng, 32), (1, 32), &Device::Cpu).unwrap();
    let run = |rows: &[&ConditionBundle]| {
        let cond = CondBatch::build(rows, &norm, DType::F64).unwrap();
        let zs = Tensor::cat(&vec![z.clone(); rows.len()], 0).unwrap();
        flat(&model.forward(&zs, &vec![30; rows.len()], &cond, &mut Ctx::eval()).unwrap().get(0).unwrap())
    };
    for target in [&two[0], &solo] {
        let alone = run(&[target]);
        let padded = run(&[target, &wide]);
        assert!(alone.iter().all(|v| v.is_finite()));
        let gap = alone.iter().zip(&padded).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-6, "{gap}");
    }
}

#[test]
fn batch_rows_permute_with_their_conditions() {
    let ds = common::dataset();
    let norm = common::normalizer(&ds);
    let model = small_denoiser(100, DType::F64);
    let b = [bundles(64, 2, 0), bundles(64, 3, 20)].concat();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let z: Vec<Vec<f64>> = (0..b.len()).map(|_| normal_vec(&mut rng, 32)).collect();
    let steps: Vec<usize> = (0..b.len()).map(|_| rng.random_range(0..100)).collect();
    let run = |order: &[usize]| {
        let rows: Vec<&ConditionBundle> = order.iter().map(|&i| &b[i]).collect();
        let cond = CondBatch::build(&rows, &norm, DType::F64).unwrap();
        let zs: Vec<f64> = order.iter().flat_map(|&i| z[i].clone()).collect();
        let ts: Vec<usize> = order.iter().map(|&i| steps[i]).collect();
        let out = model.forward(&t(&zs, &[order.len(), 32]), &ts, &cond, &mut Ctx::eval()).unwrap();
        (0..order.len()).map(|r| flat(&out.get(r).unwrap())).collect::<Vec<_>>()
    };
    let base = run(&[0, 1, 2, 3]);
    let perm = [2, 0, 3, 1];
    let moved = run(&perm);
    for (row, &i) in perm.iter().enumerate() {
        let gap = moved[row].iter().zip(&base[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-9, "{gap}");
    }
}

#[test]
fn vae_shapes_and_eval_determinism() {
    let ds = common::dataset();
    let norm = common::normalizer(&ds);
    let layout = FeatureLayout::synthetic8();
    let cfg = VaeConfig::desk();
    let vae = MotionVae::new(cfg.clone(), layout.dim(), DType::F32, 2).unwrap();
    let frames = &ds.scenes[0].agents[0].frames;
    let h = norm.apply(&frames.slice_rows(0, 4));
    let f = norm.apply(&frames.slice_rows(4, 16));
    let ht = Tensor::from_vec(h.as_slice().repeat(2), (2, 4, layout.dim()), &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap();
    let ft = Tensor::from_vec(f.as_slice().repeat(2), (2, 16, layout.dim()), &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap();
    let (mu, lv) = vae.encode(&ht, &ft, &mut Ctx::eval()).unwrap();
    assert_eq!(mu.dims(), &[2, cfg.latent_dim]);
    assert_eq!(lv.dims(), &[2, cfg.latent_dim]);
    assert_eq!(flat(&mu.get(0).unwrap()), flat(&mu.get(1).unwrap()));
    let out = vae.decode(&mu, &ht, &mut Ctx::eval()).unwrap();
    assert_eq!(out.dims(), &[2, 16, layout.dim()]);
    assert_eq!(flat(&out), flat(&vae.decode(&mu, &ht, &mut Ctx::eval()).unwrap()));
    assert!(flat(&out).iter().all(|v| v.is_finite()));
}
