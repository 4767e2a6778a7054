//! Central finite-difference checks for the autodiff tape.
//!
//! The relative error of one coordinate is `|analytic - numeric| /
//! max(|analytic|, |numeric|, REL_FLOOR)`. The floor keeps coordinates whose
//! true gradient is (near) zero from turning round-off into huge ratios.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

/// Step used by the gradient suites.
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub worst_values: (f64, f64),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of a scalar function at `point`.
pub fn finite_diff<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Selects which coordinates of each input are probed.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub step: f64,
    /// `None` checks every element; `Some(n)` checks a seeded sample of at
    /// most `n` elements per input tensor.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for Probe {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            per_tensor: None,
            seed: 0,
        }
    }
}

/// Check every element of every input (all inputs become gradient leaves).
pub fn check_graph_gradients<F>(inputs: &[Tensor], step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    check_graph_gradients_with(
        inputs,
        Probe {
            step,
            ..Probe::default()
        },
        build,
    )
}

pub fn check_graph_gradients_with<F>(inputs: &[Tensor], probe: Probe, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.raw_dim())))
        .collect();
    check_tensor_gradients(inputs, &analytic, probe, |values| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).sum()
    })
}

/// Compare precomputed analytic gradients of `eval` at `inputs` against
/// central differences. `eval` sees the inputs with one coordinate moved.
pub fn check_tensor_gradients<F>(inputs: &[Tensor], analytic: &[Tensor], probe: Probe, mut eval: F) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
    };
    let mut values: Vec<Tensor> = inputs.iter().map(|t| t.as_standard_layout().into_owned()).collect();
    for k in 0..inputs.len() {
        let grad = analytic[k].as_standard_layout();
        let grad = grad.as_slice().unwrap();
        let n = values[k].len();
        let indices: Vec<usize> = match probe.per_tensor {
            Some(m) if m < n => {
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let original = values[k].as_slice().unwrap()[i];
            values[k].as_slice_mut().unwrap()[i] = original + probe.step;
            let plus = eval(&values);
            values[k].as_slice_mut().unwrap()[i] = original - probe.step;
            let minus = eval(&values);
            values[k].as_slice_mut().unwrap()[i] = original;
            let numeric = (plus - minus) / (2.0 * probe.step);
            let a = grad[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((k, i));
                report.worst_values = (a, numeric);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_quadratic() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = finite_diff(f, &[1.0, 2.0], 1e-5);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-9, 2e-9) < 1e-4);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
