//! AdamW with decoupled weight decay, wrapped by SAM or ASAM, and a cosine
//! learning-rate schedule with linear warmup.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharpness {
    /// Plain AdamW, one evaluation per step.
    None,
    Sam,
    Asam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub sharpness: Sharpness,
    pub rho: f64,
    pub eta_asam: f64,
    pub warmup_epochs: f64,
    /// Schedule horizon; set from the run's epoch count.
    #[serde(skip)]
    pub total_epochs: usize,
    pub warmup_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            sharpness: Sharpness::Asam,
            rho: 0.1,
            eta_asam: 0.01,
            warmup_epochs: 3.0,
            total_epochs: 30,
            warmup_lr: 1e-5,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr) {
            return Err(Error::config("optim.lr", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optim.weight_decay", "must be >= 0"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("optim.betas", "must lie in [0, 1)"));
        }
        if !positive(self.eps) {
            return Err(Error::config("optim.eps", "must be > 0"));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config("optim.rho", "must be >= 0"));
        }
        if !(self.eta_asam >= 0.0 && self.eta_asam.is_finite()) {
            return Err(Error::config("optim.eta_asam", "must be >= 0"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("optim.total_epochs", "must be >= 1"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.total_epochs as f64) {
            return Err(Error::config("optim.warmup_epochs", "must lie in [0, total_epochs]"));
        }
        if !positive(self.warmup_lr) {
            return Err(Error::config("optim.warmup_lr", "must be > 0"));
        }
        Ok(())
    }
}

/// Learning rate at `fraction` of the whole run, in `[0, 1]`.
pub fn lr_at(fraction: f64, cfg: &OptimConfig) -> f64 {
    let total = cfg.total_epochs as f64;
    let e = fraction.clamp(0.0, 1.0) * total;
    if e < cfg.warmup_epochs {
        return cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * e / cfg.warmup_epochs;
    }
    let span = total - cfg.warmup_epochs;
    if span <= 0.0 {
        return cfg.lr;
    }
    let progress = (e - cfg.warmup_epochs) / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Loss value and per-parameter gradients (store order) at one point.
pub struct Evaluation {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    pub skipped: bool,
}

fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

/// Perturbation `ε` for gradients `grads` at parameters `params`.
pub fn perturbation(params: &[Tensor], grads: &[Tensor], cfg: &OptimConfig) -> Vec<Tensor> {
    match cfg.sharpness {
        Sharpness::None => grads.iter().map(|g| Tensor::zeros(g.raw_dim())).collect(),
        Sharpness::Sam => {
            let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
            let scale = cfg.rho / (norm + 1e-12);
            grads.iter().map(|g| g * scale).collect()
        }
        Sharpness::Asam => {
            let scaled: Vec<Tensor> = params
                .iter()
                .zip(grads)
                .map(|(w, g)| {
                    let mut t = w.mapv(|v| v.abs() + cfg.eta_asam);
                    t *= g;
                    t
                })
                .collect();
            let norm = scaled.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
            let scale = cfg.rho / (norm + 1e-12);
            params
                .iter()
                .zip(scaled)
                .map(|(w, mut tg)| {
                    ndarray::Zip::from(&mut tg)
                        .and(w)
                        .for_each(|e, &w| *e *= (w.abs() + cfg.eta_asam) * scale);
                    tg
                })
                .collect()
        }
    }
}

/// AdamW moments plus the sharpness-aware outer loop.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    pub step: u64,
    pub skipped: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(params: &ParamStore, cfg: OptimConfig) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.raw_dim())).collect();
        Self {
            cfg,
            step: 0,
            skipped: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One AdamW update with learning rate `lr`.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        let eps = self.cfg.eps;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p *= decay;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }

    /// One training step. `loss_fn(params, pass)` is called once per pass:
    /// pass 0 at the current parameters and, unless sharpness is disabled,
    /// pass 1 at the perturbed parameters. Steps whose gradients are not
    /// finite leave the parameters untouched and are counted in `skipped`.
    pub fn step<F>(&mut self, params: &mut ParamStore, lr: f64, mut loss_fn: F) -> Result<StepReport>
    where
        F: FnMut(&ParamStore, usize) -> Result<Evaluation>,
    {
        let first = loss_fn(params, 0)?;
        if first.grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                first.grads.len(),
                params.len()
            )));
        }
        let skip = |s: &mut Self, loss| {
            s.skipped += 1;
            log::warn!("skipping step with non-finite gradients");
            Ok(StepReport { loss, skipped: true })
        };
        if !all_finite(&first.grads) || !first.loss.is_finite() {
            return skip(self, first.loss);
        }
        let grads = if self.cfg.sharpness == Sharpness::None {
            first.grads
        } else {
            let eps = perturbation(params.values(), &first.grads, &self.cfg);
            let saved = params.values().to_vec();
            for (p, e) in params.values_mut().iter_mut().zip(&eps) {
                *p += e;
            }
            let second = loss_fn(params, 1);
            params.values_mut().clone_from_slice(&saved);
            let second = second?;
            if !all_finite(&second.grads) {
                return skip(self, first.loss);
            }
            second.grads
        };
        self.apply(params.values_mut(), &grads, lr);
        Ok(StepReport {
            loss: first.loss,
            skipped: false,
        })
    }
}
