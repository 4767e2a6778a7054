//! Mixup, per-frame binary cross-entropy, the instance contrastive (IC) loss
//! and its soft-label generalisation (SoftIC) over a per-class memory bank.
//!
//! Sign convention: the contrastive terms are log-likelihoods of a positive
//! against the bank negatives, so they are negated to obtain losses. For a
//! query `z` of class `c` with label weight `ω`:
//!
//! ```text
//! s_j = z · (w_j z_j) / τ      for (z_j, w_j) in M(c)
//! a_k = z · (w_k z_k) / τ      for (z_k, w_k) in M \ M(c)
//! L(z, ω) = -(1 / (ω |M(c)|)) Σ_j (s_j - log Σ_k exp(a_k))
//! ```
//!
//! and the batch loss is the mean of `L` over all contributing queries. IC is
//! the special case where every weight is 1. Queries with no positives or no
//! negatives in the bank are skipped; with nothing left the loss is 0.

use std::collections::VecDeque;

use ndarray::{Array2, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid_scalar, Function, GradSink, Graph, Tensor, Var};
use crate::data_synth::VideoClip;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveKind {
    Softic,
    Ic,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_sic: f64,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub contrastive: ContrastiveKind,
    /// Total bank capacity, split evenly over classes.
    pub bank_size: usize,
    /// Label weights below this do not produce contrastive queries or bank
    /// entries; mixup with small `α` yields weights arbitrarily close to 0.
    pub min_query_weight: f64,
    /// Epochs during which the bank is filled but the contrastive term is
    /// not applied.
    pub contrastive_warmup_epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            lambda_sic: 0.001,
            mixup: true,
            mixup_alpha: 0.1,
            contrastive: ContrastiveKind::Softic,
            bank_size: 256,
            min_query_weight: 0.05,
            contrastive_warmup_epochs: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("loss.temperature", "must be > 0"));
        }
        if !(self.lambda_sic >= 0.0 && self.lambda_sic.is_finite()) {
            return Err(Error::config("loss.lambda_sic", "must be >= 0"));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::config("loss.mixup_alpha", "must be > 0"));
        }
        if !(self.min_query_weight > 0.0 && self.min_query_weight <= 1.0) {
            return Err(Error::config("loss.min_query_weight", "must lie in (0, 1]"));
        }
        if self.contrastive != ContrastiveKind::None && self.bank_size < num_classes {
            return Err(Error::config(
                "loss.bank_size",
                format!("{} slots cannot hold {num_classes} classes", self.bank_size),
            ));
        }
        Ok(())
    }
}

/// Draw a mixing coefficient from `Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    Beta::new(alpha, alpha).expect("alpha > 0").sample(rng)
}

/// Convex combination `λ a + (1 - λ) b` of frames and labels. The result keeps
/// the identity of `a` and the shorter valid length of the two.
pub fn mixup(a: &VideoClip, b: &VideoClip, lambda: f64) -> Result<VideoClip> {
    if a.frames.shape() != b.frames.shape() || a.labels.dim() != b.labels.dim() {
        return Err(Error::Shape(format!(
            "mixup of clips {:?} and {:?}",
            a.frames.shape(),
            b.frames.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Numeric(format!("mixup coefficient {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    let mut out = a.clone();
    out.frames = &a.frames * lambda + &b.frames * (1.0 - lambda);
    out.labels = &a.labels * lambda + &b.labels * (1.0 - lambda);
    out.valid_len = a.valid_len.min(b.valid_len);
    Ok(out)
}

#[inline]
fn bce_cell(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over unmasked cells of `[T, K]` scores in
/// `(0, 1)`. Evaluated through logits for stability.
pub fn bce_loss(scores: &Array2<f64>, labels: &Array2<f64>, mask: &[bool]) -> f64 {
    assert_eq!(scores.dim(), labels.dim());
    assert_eq!(mask.len(), scores.nrows());
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (srow, yrow)) in scores.axis_iter(Axis(0)).zip(labels.axis_iter(Axis(0))).enumerate() {
        if !mask[t] {
            continue;
        }
        for (&s, &y) in srow.iter().zip(yrow.iter()) {
            let s = s.clamp(1e-15, 1.0 - 1e-15);
            total += bce_cell(s.ln() - (-s).ln_1p(), y);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

struct BceWithLogitsFn {
    logits: Var,
    labels: Tensor,
    weights: Tensor,
    count: f64,
}

impl Function for BceWithLogitsFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let scale = grad.first().copied().unwrap_or(0.0) / self.count;
        let x = graph.value(self.logits);
        let mut d = Tensor::zeros(x.raw_dim());
        ndarray::Zip::from(&mut d)
            .and(x)
            .and(&self.labels)
            .and(&self.weights)
            .for_each(|d, &x, &y, &m| *d = m * scale * (sigmoid_scalar(x) - y));
        sink.add(self.logits, d);
    }
}

impl Graph {
    /// Mean binary cross-entropy over cells whose `mask` entry is 1. `mask`
    /// broadcasts over the trailing class axis: logits `[..., K]`, mask `[...]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor, mask: &Tensor) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(labels.shape(), &shape[..], "labels must match logits");
        assert_eq!(mask.shape(), &shape[..shape.len() - 1], "mask must drop the class axis");
        let weights = mask
            .view()
            .insert_axis(Axis(mask.ndim()))
            .broadcast(IxDyn(&shape))
            .unwrap()
            .to_owned();
        let mut total = 0.0;
        let mut count = 0.0;
        ndarray::Zip::from(self.value(logits))
            .and(labels)
            .and(&weights)
            .for_each(|&x, &y, &m| {
                if m != 0.0 {
                    total += m * bce_cell(x, y);
                    count += m;
                }
            });
        let value = Tensor::from_elem(IxDyn(&[]), if count > 0.0 { total / count } else { 0.0 });
        let labels = labels.clone();
        self.push(value, &[logits], move || BceWithLogitsFn {
            logits,
            labels,
            weights,
            count: count.max(1.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub z: Vec<f64>,
    pub weight: f64,
}

/// Per-class FIFO queues of detached unit-norm embeddings and their label
/// weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub dim: usize,
    pub per_class: usize,
    queues: Vec<VecDeque<BankEntry>>,
}

impl MemoryBank {
    /// `total` slots split as `⌊total / K⌋` per class.
    pub fn new(num_classes: usize, total: usize, dim: usize) -> Self {
        Self {
            dim,
            per_class: total / num_classes.max(1),
            queues: vec![VecDeque::new(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn queue(&self, class_id: usize) -> &VecDeque<BankEntry> {
        &self.queues[class_id]
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, z: &[f64], class_id: usize, weight: f64) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!(
                "bank entries have {} dims, got {}",
                self.dim,
                z.len()
            )));
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() < 1e-6) {
            return Err(Error::Numeric(format!("bank entry norm {norm} is not 1")));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Numeric(format!("bank weight {weight} outside (0, 1]")));
        }
        if self.per_class == 0 {
            return Ok(());
        }
        let q = &mut self.queues[class_id];
        if q.len() == self.per_class {
            q.pop_front();
        }
        q.push_back(BankEntry { z: z.to_vec(), weight });
        Ok(())
    }

    pub fn clear(&mut self) {
        self.queues.iter_mut().for_each(VecDeque::clear);
    }
}

/// One query of the contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSample {
    pub z: Vec<f64>,
    pub class_id: usize,
    pub weight: f64,
}

/// Value and gradient of one query term; `None` when the query is skipped.
fn query_term(z: &[f64], class_id: usize, omega: f64, bank: &MemoryBank, tau: f64) -> Option<(f64, Vec<f64>)> {
    let pos = bank.queue(class_id);
    if pos.is_empty() {
        return None;
    }
    let negs: Vec<&BankEntry> = (0..bank.num_classes())
        .filter(|&c| c != class_id)
        .flat_map(|c| bank.queue(c).iter())
        .collect();
    if negs.is_empty() {
        return None;
    }
    let dot = |e: &BankEntry| e.weight * z.iter().zip(&e.z).map(|(a, b)| a * b).sum::<f64>() / tau;
    let a: Vec<f64> = negs.iter().map(|e| dot(e)).collect();
    let amax = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|v| (v - amax).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = amax + sum.ln();
    let mean_s = pos.iter().map(dot).sum::<f64>() / pos.len() as f64;
    let value = -(mean_s - lse) / omega;

    let mut grad = vec![0.0; z.len()];
    for e in pos {
        let c = e.weight / (tau * pos.len() as f64);
        grad.iter_mut().zip(&e.z).for_each(|(g, v)| *g += c * v);
    }
    for (e, x) in negs.iter().zip(&exps) {
        let c = x / sum * e.weight / tau;
        grad.iter_mut().zip(&e.z).for_each(|(g, v)| *g -= c * v);
    }
    grad.iter_mut().for_each(|g| *g *= -1.0 / omega);
    Some((value, grad))
}

/// SoftIC loss and its gradient with respect to every query embedding.
/// Skipped queries get zero gradients.
pub fn soft_ic_loss_with_grad(samples: &[ContrastiveSample], bank: &MemoryBank, tau: f64) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let mut used = 0usize;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(samples.len());
    for s in samples {
        assert!(s.weight != 0.0, "contrastive queries need a nonzero weight");
        match query_term(&s.z, s.class_id, s.weight, bank, tau) {
            Some((v, g)) => {
                total += v;
                used += 1;
                grads.push(g);
            }
            None => grads.push(vec![0.0; s.z.len()]),
        }
    }
    if used == 0 {
        return (0.0, grads);
    }
    let n = used as f64;
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    (total / n, grads)
}

pub fn soft_ic_loss(samples: &[ContrastiveSample], bank: &MemoryBank, tau: f64) -> f64 {
    soft_ic_loss_with_grad(samples, bank, tau).0
}

/// IC loss over hard-labelled queries; bank weights are ignored.
pub fn ic_loss(queries: &[(Vec<f64>, usize)], bank: &MemoryBank, tau: f64) -> f64 {
    let mut hard = bank.clone();
    for q in hard.queues.iter_mut() {
        q.iter_mut().for_each(|e| e.weight = 1.0);
    }
    let samples: Vec<ContrastiveSample> = queries
        .iter()
        .map(|(z, c)| ContrastiveSample {
            z: z.clone(),
            class_id: *c,
            weight: 1.0,
        })
        .collect();
    soft_ic_loss(&samples, &hard, tau)
}

/// Query rows of a batch: `(row, class, weight)` for every unmasked row of
/// `labels: [R, K]` with weight of at least `min_weight` on some class. Soft
/// labels give one query per such class; hard labels keep only the heaviest
/// class with weight 1.
pub fn contrastive_queries(
    labels: &Array2<f64>,
    mask: &[bool],
    soft: bool,
    min_weight: f64,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (r, row) in labels.axis_iter(Axis(0)).enumerate() {
        if !mask[r] {
            continue;
        }
        if soft {
            out.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, &w)| w >= min_weight)
                    .map(|(c, &w)| (r, c, w.min(1.0))),
            );
        } else if let Some((c, _)) = row.iter().enumerate().filter(|(_, &w)| w >= min_weight).fold(
            None,
            |best: Option<(usize, f64)>, (c, &w)| match best {
                Some((_, bw)) if bw >= w => best,
                _ => Some((c, w)),
            },
        ) {
            out.push((r, c, 1.0));
        }
    }
    out
}

struct PrecomputedGradFn {
    input: Var,
    grad: Tensor,
}

impl Function for PrecomputedGradFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        let scale = grad.first().copied().unwrap_or(0.0);
        sink.add(self.input, &self.grad * scale);
    }
}

impl Graph {
    /// SoftIC loss of the rows of `embeddings: [R, D]` selected by `queries`
    /// (`(row, class, weight)`) against a fixed bank.
    pub fn soft_ic(&mut self, embeddings: Var, queries: &[(usize, usize, f64)], bank: &MemoryBank, tau: f64) -> Var {
        let e = self.value(embeddings);
        assert_eq!(e.ndim(), 2, "embeddings must be [R, D]");
        let samples: Vec<ContrastiveSample> = queries
            .iter()
            .map(|&(r, c, w)| ContrastiveSample {
                z: e.index_axis(Axis(0), r).iter().copied().collect(),
                class_id: c,
                weight: w,
            })
            .collect();
        let (value, grads) = soft_ic_loss_with_grad(&samples, bank, tau);
        let mut grad = Tensor::zeros(e.raw_dim());
        for (&(r, _, _), g) in queries.iter().zip(&grads) {
            let mut row = grad.index_axis_mut(Axis(0), r);
            row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        self.push(Tensor::from_elem(IxDyn(&[]), value), &[embeddings], move || {
            PrecomputedGradFn {
                input: embeddings,
                grad,
            }
        })
    }
}

/// Push detached query embeddings into the bank.
pub fn update_bank(bank: &mut MemoryBank, embeddings: &Array2<f64>, queries: &[(usize, usize, f64)]) -> Result<()> {
    for &(r, c, w) in queries {
        bank.push(&embeddings.row(r).to_vec(), c, w)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bce: f64,
    pub sic: f64,
}

/// `L = L_BCE + λ_SIC · L_SIC` for a batch with logits `[B, T, K]`,
/// embeddings `[B, T, D]`, labels `[B, T, K]` and mask `[B, T]`.
/// `queries` index rows of the flattened `[B·T, D]` embeddings; pass an empty
/// slice to drop the contrastive term.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    g: &mut Graph,
    logits: Var,
    embeddings: Var,
    labels: &Tensor,
    mask: &Tensor,
    queries: &[(usize, usize, f64)],
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> LossTerms {
    let bce = g.bce_with_logits(logits, labels, mask);
    let bce_value = g.value(bce).sum();
    if cfg.lambda_sic == 0.0 || queries.is_empty() || cfg.contrastive == ContrastiveKind::None {
        return LossTerms {
            total: bce,
            bce: bce_value,
            sic: 0.0,
        };
    }
    let shape = g.shape(embeddings).to_vec();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(embeddings, &[rows, shape[shape.len() - 1]]);
    let sic = g.soft_ic(flat, queries, bank, cfg.temperature);
    let sic_value = g.value(sic).sum();
    let weighted = g.scale(sic, cfg.lambda_sic);
    LossTerms {
        total: g.add(bce, weighted),
        bce: bce_value,
        sic: sic_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn bank_is_fifo_per_class() {
        let mut bank = MemoryBank::new(2, 6, 2);
        assert_eq!(bank.per_class, 3);
        for i in 0..4 {
            bank.push(&unit(&[1.0, i as f64]), 0, 1.0).unwrap();
        }
        assert_eq!(bank.queue(0).len(), 3);
        assert_eq!(bank.queue(0)[0].z, unit(&[1.0, 1.0]));
        assert!(bank.queue(1).is_empty());
        bank.push(&unit(&[0.0, 1.0]), 1, 0.5).unwrap();
        assert_eq!(bank.queue(0).len(), 3);
        assert!(bank.push(&[2.0, 0.0], 0, 1.0).is_err());
        assert!(bank.push(&[1.0, 0.0], 0, 0.0).is_err());
    }

    #[test]
    fn one_positive_one_negative() {
        let mut bank = MemoryBank::new(2, 4, 2);
        let p = unit(&[1.0, 0.2]);
        let n = unit(&[-0.3, 1.0]);
        bank.push(&p, 0, 1.0).unwrap();
        bank.push(&n, 1, 1.0).unwrap();
        let z = unit(&[0.6, 0.8]);
        let dot = |a: &[f64], b: &[f64]| a[0] * b[0] + a[1] * b[1];
        let loss = ic_loss(&[(z.clone(), 0)], &bank, 1.0);
        assert!((loss + (dot(&z, &p) - dot(&z, &n))).abs() < 1e-15);
        bank.push(&n, 1, 1.0).unwrap();
        let doubled = ic_loss(&[(z.clone(), 0)], &bank, 1.0);
        assert!((doubled - loss - std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn skipped_queries_and_empty_bank() {
        let bank = MemoryBank::new(3, 9, 2);
        let s = ContrastiveSample {
            z: unit(&[1.0, 1.0]),
            class_id: 1,
            weight: 1.0,
        };
        assert_eq!(soft_ic_loss(&[s], &bank, 0.07), 0.0);
    }

    #[test]
    fn large_temperature_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bank = MemoryBank::new(3, 12, 3);
        for c in 0..3 {
            for _ in 0..3 {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                bank.push(&unit(&v), c, 1.0).unwrap();
            }
        }
        let loss = ic_loss(&[(unit(&[1.0, 2.0, 3.0]), 2)], &bank, 1e9);
        assert!((loss - (6.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn halving_omega_doubles_contribution() {
        let mut bank = MemoryBank::new(2, 4, 2);
        bank.push(&unit(&[1.0, 0.0]), 0, 0.7).unwrap();
        bank.push(&unit(&[0.0, 1.0]), 1, 0.4).unwrap();
        let q = |w| ContrastiveSample {
            z: unit(&[0.2, 0.9]),
            class_id: 0,
            weight: w,
        };
        let full = soft_ic_loss(&[q(0.8)], &bank, 0.5);
        let half = soft_ic_loss(&[q(0.4)], &bank, 0.5);
        assert!((half - 2.0 * full).abs() < 1e-14);
    }

    #[test]
    fn queries_from_labels() {
        let labels = ndarray::array![[0.0, 0.0], [0.3, 0.7], [1.0, 0.0], [0.0, 1.0], [1e-9, 0.0]];
        let mask = [true, true, true, false, true];
        assert_eq!(
            contrastive_queries(&labels, &mask, true, 0.05),
            vec![(1, 0, 0.3), (1, 1, 0.7), (2, 0, 1.0)]
        );
        assert_eq!(
            contrastive_queries(&labels, &mask, false, 0.05),
            vec![(1, 1, 1.0), (2, 0, 1.0)]
        );
        assert_eq!(contrastive_queries(&labels, &mask, true, 1e-12).len(), 4);
    }

    #[test]
    fn bce_with_logits_matches_pure_bce() {
        let logits = ndarray::array![[0.3, -1.2], [2.0, 0.1], [-0.4, 0.9]];
        let labels = ndarray::array![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
        let mask = [true, true, false];
        let scores = logits.mapv(sigmoid_scalar);
        let mut g = Graph::new();
        let x = g.constant(logits.clone().into_dyn());
        let m = Tensor::from_shape_vec(IxDyn(&[3]), vec![1.0, 1.0, 0.0]).unwrap();
        let l = g.bce_with_logits(x, &labels.clone().into_dyn(), &m);
        assert!((g.value(l).sum() - bce_loss(&scores, &labels, &mask)).abs() < 1e-12);
    }

    #[test]
    fn mixup_identity_and_convexity() {
        let clip = |c: usize| {
            let mut labels = Array2::zeros((2, 3));
            labels[[0, c]] = 1.0;
            VideoClip {
                video_id: format!("v{c}"),
                start_frame: 0,
                frames: Tensor::from_elem(IxDyn(&[3, 2, 1, 1]), 0.1 + c as f64 * 0.37),
                labels,
                valid_len: 2,
            }
        };
        let (a, b) = (clip(0), clip(1));
        assert_eq!(mixup(&a, &b, 1.0).unwrap(), a);
        let m = mixup(&a, &b, 0.5).unwrap();
        assert_eq!(m.labels.row(0).to_vec(), vec![0.5, 0.5, 0.0]);
        assert!(mixup(&a, &b, 1.5).is_err());
    }
}
