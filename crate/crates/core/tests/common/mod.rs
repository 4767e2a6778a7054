//! Checks shared by the integration suites and the acceptance harness.
#![allow(dead_code)]

use eventspot::astrm::{Astrm, AstrmSpec};
use eventspot::autograd::{Tensor, Var};
use eventspot::gradcheck::{check_graph_gradients, check_tensor_gradients, GradCheckReport, Probe};
use eventspot::losses::{ic_loss, soft_ic_loss, ContrastiveSample, MemoryBank};
use eventspot::network::{BackboneSpec, Model, ModelSpec, Network, TemporalBlockSpec};
use eventspot::nn::{Mode, Session};
use eventspot::params::{BufferStore, ParamStore};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn rebuild(names: &[String], values: &[Tensor]) -> ParamStore {
    let mut params = ParamStore::new();
    for (n, v) in names.iter().zip(values) {
        params.add(n.clone(), v.clone());
    }
    params
}

pub struct AstrmFixture {
    pub params: ParamStore,
    pub buffers: BufferStore,
    pub module: Astrm,
}

pub fn astrm_fixture(c: usize, t: usize, seed: u64) -> AstrmFixture {
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = Astrm::new(&mut params, &mut buffers, "m", c, t, &AstrmSpec::default(), &mut rng).unwrap();
    for p in params.values_mut() {
        p.mapv_inplace(|_| rng.random_range(-0.6..0.6));
    }
    AstrmFixture {
        params,
        buffers,
        module,
    }
}

fn astrm_loss<'a>(
    f: &'a AstrmFixture,
    params: &'a ParamStore,
    x: &Tensor,
    coeffs: &Tensor,
    track: bool,
) -> (Session<'a>, Var, Var) {
    let mut s = Session::new(params, &f.buffers, Mode::Train, track);
    let xv = if track {
        s.graph.leaf(x.clone())
    } else {
        s.graph.constant(x.clone())
    };
    let y = f.module.forward(&mut s, xv);
    let out = s.graph.dot_const(y, coeffs.clone());
    (s, xv, out)
}

/// ASTRM on `[4, 1, 8, 6, 6]`, input and every parameter tensor probed.
pub fn astrm_gradcheck() -> GradCheckReport {
    let f = astrm_fixture(4, 8, 15);
    let x = random_tensor(&[4, 1, 8, 6, 6], 16);
    let coeffs = random_tensor(&[4, 1, 8, 6, 6], 17);
    let (s, xv, out) = astrm_loss(&f, &f.params, &x, &coeffs, true);
    let grads = s.graph.backward(out);
    let mut inputs = vec![x.clone()];
    let mut analytic = vec![grads.get(xv).unwrap().clone()];
    inputs.extend(f.params.values().iter().cloned());
    analytic.extend(s.param_grads(&grads));
    let names = f.params.names().to_vec();
    let probe = Probe {
        per_tensor: Some(24),
        seed: 3,
        ..Probe::default()
    };
    check_tensor_gradients(&inputs, &analytic, probe, |values| {
        let params = rebuild(&names, &values[1..]);
        let (s, _, out) = astrm_loss(&f, &params, &values[0], &coeffs, false);
        s.graph.value(out).sum()
    })
}

fn tiny_loss<'a>(
    net: &'a Network,
    params: &'a ParamStore,
    x: &Tensor,
    c: &(Tensor, Tensor),
    track: bool,
) -> (Session<'a>, Var, Var) {
    let mut s = Session::new(params, &net.buffers, Mode::Train, track);
    let xv = if track {
        s.graph.leaf(x.clone())
    } else {
        s.graph.constant(x.clone())
    };
    let out = net.model.forward(&mut s, xv);
    let a = s.graph.dot_const(out.logits, c.0.clone());
    let b = s.graph.dot_const(out.embeddings, c.1.clone());
    let loss = s.graph.add(a, b);
    (s, xv, loss)
}

/// Full model (stem 4, one stage of two bottlenecks, Bi-GRU hidden 4) on one
/// 8-frame 8x8 clip.
pub fn tiny_model_gradcheck() -> GradCheckReport {
    let spec = ModelSpec {
        backbone: BackboneSpec {
            stem_width: 4,
            widths: vec![8],
            blocks: vec![2],
            strides: vec![2],
            ..BackboneSpec::default()
        },
        temporal: TemporalBlockSpec {
            hidden: Some(4),
            ..TemporalBlockSpec::default()
        },
        projection_dim: 6,
    };
    let net = Model::seeded(&spec, 2, 8, 12).unwrap();
    let x = random_tensor(&[3, 1, 8, 8, 8], 13).mapv(|v| 0.5 + 0.5 * v);
    let coeffs = (random_tensor(&[1, 8, 2], 14), random_tensor(&[1, 8, 6], 15));
    let (s, xv, loss) = tiny_loss(&net, &net.params, &x, &coeffs, true);
    let grads = s.graph.backward(loss);
    let mut inputs = vec![x.clone()];
    let mut analytic = vec![grads.get(xv).unwrap().clone()];
    inputs.extend(net.params.values().iter().cloned());
    analytic.extend(s.param_grads(&grads));
    let names = net.params.names().to_vec();
    let probe = Probe {
        per_tensor: Some(6),
        seed: 1,
        ..Probe::default()
    };
    check_tensor_gradients(&inputs, &analytic, probe, |values| {
        let params = rebuild(&names, &values[1..]);
        let (s, _, loss) = tiny_loss(&net, &params, &values[0], &coeffs, false);
        s.graph.value(loss).sum()
    })
}

pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Bank contents as plain `(z, class, weight)` triples, in queue order.
pub type Entries = Vec<(Vec<f64>, usize, f64)>;

pub fn random_bank(
    rng: &mut ChaCha8Rng,
    k: usize,
    per_class: usize,
    dim: usize,
    unit_weights: bool,
) -> (MemoryBank, Entries) {
    let mut bank = MemoryBank::new(k, k * per_class, dim);
    let mut entries = Vec::new();
    for c in 0..k {
        for _ in 0..rng.random_range(1..=per_class) {
            let z = unit(rng, dim);
            let w = if unit_weights {
                1.0
            } else {
                rng.random_range(0.05..=1.0)
            };
            bank.push(&z, c, w).unwrap();
            entries.push((z, c, w));
        }
    }
    (bank, entries)
}

pub fn samples(queries: &[(Vec<f64>, usize, f64)]) -> Vec<ContrastiveSample> {
    queries
        .iter()
        .map(|(z, c, w)| ContrastiveSample {
            z: z.clone(),
            class_id: *c,
            weight: *w,
        })
        .collect()
}

/// Largest relative gap between the weighted loss at unit weights and the
/// hard-label loss over 100 random banks and query sets.
pub fn unit_weight_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=4);
        let dim = rng.random_range(2..=8);
        let tau = rng.random_range(0.05..2.0);
        let (bank, _) = random_bank(&mut rng, k, 4, dim, true);
        let hard: Vec<(Vec<f64>, usize)> = (0..rng.random_range(1..=6))
            .map(|_| (unit(&mut rng, dim), rng.random_range(0..k)))
            .collect();
        let soft: Vec<_> = hard.iter().map(|(z, c)| (z.clone(), *c, 1.0)).collect();
        let a = soft_ic_loss(&samples(&soft), &bank, tau);
        let b = ic_loss(&hard, &bank, tau);
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    worst
}

/// Worst relative error of the contrastive gradient over five random banks
/// of at most 12 entries.
pub fn soft_ic_gradcheck() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let (k, dim, rows) = (3, 6, 5);
        let (bank, _) = random_bank(&mut rng, k, 4, dim, false);
        assert!(bank.len() <= 12);
        let emb = Tensor::from_shape_fn(IxDyn(&[rows, dim]), |_| rng.random_range(-0.5..0.5));
        let queries: Vec<(usize, usize, f64)> = (0..rows)
            .map(|r| (r, rng.random_range(0..k), rng.random_range(0.2..=1.0)))
            .collect();
        let tau = if trial % 2 == 0 { 0.5 } else { 1.0 };
        let report = check_graph_gradients(&[emb], 1e-4, |g, v| g.soft_ic(v[0], &queries, &bank, tau));
        worst = worst.max(report.max_rel_error);
    }
    worst
}

/// Straight-line greedy matcher: walk predictions from the best score down,
/// scan every truth for the closest unclaimed one, then integrate the
/// precision envelope at each recall step.
pub fn oracle_ap(predictions: &[(usize, f64)], truths: &[usize], delta: usize) -> f64 {
    if truths.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let (a, b) = (predictions[order[i]], predictions[order[j]]);
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                order.swap(i, j);
            }
        }
    }
    let mut claimed = vec![false; truths.len()];
    let mut hits = Vec::new();
    for &i in &order {
        let frame = predictions[i].0;
        let mut pick: Option<usize> = None;
        for j in 0..truths.len() {
            if claimed[j] {
                continue;
            }
            let d = if truths[j] > frame {
                truths[j] - frame
            } else {
                frame - truths[j]
            };
            if d > delta {
                continue;
            }
            pick = match pick {
                None => Some(j),
                Some(p) => {
                    let dp = if truths[p] > frame {
                        truths[p] - frame
                    } else {
                        frame - truths[p]
                    };
                    if d < dp || (d == dp && truths[j] < truths[p]) {
                        Some(j)
                    } else {
                        Some(p)
                    }
                }
            };
        }
        if let Some(j) = pick {
            claimed[j] = true;
        }
        hits.push(pick.is_some());
    }
    let n = truths.len() as f64;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let mut tp = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1.0;
        }
        recall.push(tp / n);
        precision.push(tp / (k + 1) as f64);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for k in 0..hits.len() {
        if recall[k] > last {
            let mut best = 0.0f64;
            for &p in &precision[k..] {
                if p > best {
                    best = p;
                }
            }
            ap += (recall[k] - last) * best;
            last = recall[k];
        }
    }
    ap
}

pub struct ApInstance {
    pub predictions: Vec<(usize, f64)>,
    pub truths: Vec<usize>,
    pub delta: usize,
}

/// 200 instances with at most 20 truths, 40 predictions and δ ≤ 5. About a
/// fifth of the scores are drawn from a small grid to force ties.
pub fn ap_instances() -> Vec<ApInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..200)
        .map(|_| {
            let n_truth = rng.random_range(1..=20);
            let n_pred = rng.random_range(0..=40);
            let span = rng.random_range(20..120);
            let truths = (0..n_truth).map(|_| rng.random_range(0..span)).collect();
            let predictions = (0..n_pred)
                .map(|_| {
                    let score = if rng.random_bool(0.2) {
                        (rng.random_range(1..5) as f64) / 4.0
                    } else {
                        rng.random_range(0.0..1.0)
                    };
                    (rng.random_range(0..span), score)
                })
                .collect();
            ApInstance {
                predictions,
                truths,
                delta: rng.random_range(0..=5),
            }
        })
        .collect()
}
