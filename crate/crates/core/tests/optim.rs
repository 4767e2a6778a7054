use eventspot::autograd::Tensor;
use eventspot::optim::{lr_at, perturbation, Evaluation, OptimConfig, Optimizer, Sharpness};
use eventspot::params::ParamStore;
use ndarray::{arr1, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCALES: [f64; 4] = [1.0, 3.0, 0.5, 7.0];

fn store(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", arr1(values).into_dyn());
    s
}

fn bowl(p: &ParamStore) -> Evaluation {
    let w = &p.values()[0];
    let scales = arr1(&SCALES).into_dyn();
    Evaluation {
        loss: (w * w * &scales).sum() * 0.5,
        grads: vec![w * &scales],
    }
}

fn config(sharpness: Sharpness, rho: f64) -> OptimConfig {
    OptimConfig {
        sharpness,
        rho,
        weight_decay: 0.01,
        ..Default::default()
    }
}

/// Scalar AdamW with decoupled decay, written out per coordinate.
fn adamw_oracle(w0: &[f64], steps: usize, lr: f64, cfg: &OptimConfig) -> Vec<f64> {
    let mut w = w0.to_vec();
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    for k in 1..=steps {
        for i in 0..w.len() {
            let g = SCALES[i] * w[i];
            m[i] = cfg.betas[0] * m[i] + (1.0 - cfg.betas[0]) * g;
            v[i] = cfg.betas[1] * v[i] + (1.0 - cfg.betas[1]) * g * g;
            let mh = m[i] / (1.0 - cfg.betas[0].powi(k as i32));
            let vh = v[i] / (1.0 - cfg.betas[1].powi(k as i32));
            w[i] = w[i] * (1.0 - lr * cfg.weight_decay) - lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    w
}

#[test]
fn zero_radius_collapses_to_adamw() {
    let w0 = [1.0, -2.0, 0.5, 0.25];
    let lr = 0.05;
    let plain = adamw_oracle(&w0, 10, lr, &config(Sharpness::None, 0.0));
    for sharpness in [Sharpness::None, Sharpness::Sam, Sharpness::Asam] {
        let mut p = store(&w0);
        let mut opt = Optimizer::new(&p, config(sharpness, 0.0));
        for _ in 0..10 {
            opt.step(&mut p, lr, |p, _| Ok(bowl(p))).unwrap();
        }
        for (a, b) in p.values()[0].iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12, "{sharpness:?}: {a} vs {b}");
        }
    }
}

#[test]
fn sam_uses_gradient_at_perturbed_point() {
    let w0 = [0.4, -1.0, 2.0, 0.1];
    let cfg = config(Sharpness::Sam, 0.3);
    let mut p = store(&w0);
    let mut opt = Optimizer::new(&p, cfg.clone());
    opt.step(&mut p, 0.01, |p, _| Ok(bowl(p))).unwrap();

    let g: Vec<f64> = w0.iter().zip(SCALES).map(|(w, s)| w * s).collect();
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let shifted: Vec<f64> = w0.iter().zip(&g).map(|(w, gi)| w + 0.3 * gi / (norm + 1e-12)).collect();
    let g2: Vec<f64> = shifted.iter().zip(SCALES).map(|(w, s)| w * s).collect();
    for i in 0..4 {
        let m = (1.0 - cfg.betas[0]) * g2[i] / (1.0 - cfg.betas[0]);
        let v = (1.0 - cfg.betas[1]) * g2[i] * g2[i] / (1.0 - cfg.betas[1]);
        let expected = w0[i] * (1.0 - 0.01 * cfg.weight_decay) - 0.01 * m / (v.sqrt() + cfg.eps);
        assert!((p.values()[0][i] - expected).abs() < 1e-12);
    }
}

#[test]
fn sam_perturbation_has_radius_rho() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params: Vec<Tensor> = (0..3)
        .map(|n| Tensor::from_shape_fn(IxDyn(&[n + 2]), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let grads: Vec<Tensor> = params.iter().map(|p| p.mapv(|_| rng.random_range(-1.0..1.0))).collect();
    let eps = perturbation(&params, &grads, &config(Sharpness::Sam, 2.0));
    let norm = eps.iter().flat_map(|e| e.iter()).map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 2.0).abs() < 1e-10);
    let none = perturbation(&params, &grads, &config(Sharpness::None, 2.0));
    assert!(none.iter().all(|e| e.iter().all(|&x| x == 0.0)));
}

#[test]
fn asam_favours_large_coordinates() {
    let w = [arr1(&[1.0, 100.0]).into_dyn()];
    let g = [arr1(&[0.5, 0.5]).into_dyn()];
    let eps = perturbation(&w, &g, &config(Sharpness::Asam, 2.0));
    let t: [f64; 2] = [1.01, 100.01];
    let tg = [t[0] * 0.5, t[1] * 0.5];
    let norm = (tg[0] * tg[0] + tg[1] * tg[1]).sqrt();
    for i in 0..2 {
        assert!((eps[0][i] - 2.0 * t[i] * tg[i] / norm).abs() < 1e-10 * eps[0][i].abs());
    }
    let ratio = eps[0][1] / eps[0][0];
    assert!(ratio > 100.0, "{ratio}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn asam_scales_with_one_tensor(seed in 0u64..10_000, s in 2.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_shape_fn(IxDyn(&[5]), |_| rng.random_range(1.0..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        let b = Tensor::from_shape_fn(IxDyn(&[4]), |_| rng.random_range(-2.0..2.0));
        let ga = Tensor::from_shape_fn(IxDyn(&[5]), |_| rng.random_range(-1.0..1.0));
        let gb = Tensor::from_shape_fn(IxDyn(&[4]), |_| rng.random_range(-1.0..1.0));
        let cfg = OptimConfig { eta_asam: 0.0, ..config(Sharpness::Asam, 1.0) };
        let base = perturbation(&[a.clone(), b.clone()], &[ga.clone(), gb.clone()], &cfg);
        let scaled = perturbation(&[&a * s, b.clone()], &[ga, gb], &cfg);
        let ratio = scaled[0][0] / base[0][0];
        for (x, y) in base[0].iter().zip(scaled[0].iter()) {
            prop_assert!((y / x - ratio).abs() < 1e-9 * ratio);
        }
        prop_assert!(ratio >= s * (1.0 - 1e-12) && ratio <= s * s * (1.0 + 1e-12));
        let norm = |t: &Tensor| t.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm(&scaled[1]) <= norm(&base[1]) * (1.0 + 1e-12));
    }
}

#[test]
fn schedule_matches_warmup_then_cosine() {
    let cfg = OptimConfig {
        lr: 2e-3,
        warmup_lr: 1e-5,
        warmup_epochs: 3.0,
        total_epochs: 30,
        ..Default::default()
    };
    for k in 0..=300 {
        let epoch = k as f64 / 10.0;
        let expected = if epoch < 3.0 {
            1e-5 + (2e-3 - 1e-5) * epoch / 3.0
        } else {
            1e-3 * (1.0 + (std::f64::consts::PI * (epoch - 3.0) / 27.0).cos())
        };
        let got = lr_at(epoch / 30.0, &cfg);
        assert!((got - expected).abs() < 1e-15, "epoch {epoch}: {got} vs {expected}");
    }
}

#[test]
fn non_finite_gradients_skip_the_step() {
    let mut p = store(&[1.0, 2.0, 3.0, 4.0]);
    let mut opt = Optimizer::new(&p, config(Sharpness::Asam, 2.0));
    let before = p.values()[0].clone();
    let r = opt
        .step(&mut p, 0.1, |p, pass| {
            let mut e = bowl(p);
            if pass == 1 {
                e.grads[0][2] = f64::INFINITY;
            }
            Ok(e)
        })
        .unwrap();
    assert!(r.skipped);
    assert_eq!(opt.skipped, 1);
    assert_eq!(p.values()[0], before);
}
