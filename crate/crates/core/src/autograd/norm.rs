use ndarray::{Axis, IxDyn, Zip};

use super::ops::{as_matrix, reshape};
use super::{Function, GradSink, Graph, Tensor, Var};

/// Per-channel statistics of one training-mode batch norm evaluation.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention used for running statistics.
    pub var_unbiased: Vec<f64>,
}

struct BatchNormTrainFn {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl Function for BatchNormTrainFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let c = self.inv_std.len();
        let m = grad.len() / c;
        let g = as_matrix(grad, c, m);
        let xhat = as_matrix(&self.xhat, c, m);
        let gamma = graph.value(self.gamma).as_slice().unwrap();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for ch in 0..c {
            let (gr, xr) = (g.row(ch), xhat.row(ch));
            sum_g[ch] = gr.sum();
            sum_gx[ch] = Zip::from(&gr).and(&xr).fold(0.0, |a, &g, &x| a + g * x);
        }
        if sink.wants(self.gamma) {
            sink.add(self.gamma, Tensor::from_shape_vec(IxDyn(&[c]), sum_gx.clone()).unwrap());
        }
        if sink.wants(self.beta) {
            sink.add(self.beta, Tensor::from_shape_vec(IxDyn(&[c]), sum_g.clone()).unwrap());
        }
        if sink.wants(self.x) {
            let mut dx = Vec::with_capacity(grad.len());
            let mf = m as f64;
            for ch in 0..c {
                let k = gamma[ch] * self.inv_std[ch] / mf;
                let (gr, xr) = (g.row(ch), xhat.row(ch));
                dx.extend(
                    gr.iter()
                        .zip(xr.iter())
                        .map(|(&gv, &xv)| k * (mf * gv - sum_g[ch] - xv * sum_gx[ch])),
                );
            }
            let shape = graph.shape(self.x).to_vec();
            sink.add(self.x, Tensor::from_shape_vec(IxDyn(&shape), dx).unwrap());
        }
    }
}

struct BatchNormEvalFn {
    x: Var,
    gamma: Var,
    beta: Var,
    inv_std: Vec<f64>,
    xhat: Tensor,
}

impl Function for BatchNormEvalFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let c = self.inv_std.len();
        let m = grad.len() / c;
        let g = as_matrix(grad, c, m);
        if sink.wants(self.gamma) {
            let xhat = as_matrix(&self.xhat, c, m);
            let d: Vec<f64> = (0..c)
                .map(|ch| {
                    Zip::from(&g.row(ch))
                        .and(&xhat.row(ch))
                        .fold(0.0, |a, &g, &x| a + g * x)
                })
                .collect();
            sink.add(self.gamma, Tensor::from_shape_vec(IxDyn(&[c]), d).unwrap());
        }
        if sink.wants(self.beta) {
            sink.add(self.beta, g.sum_axis(Axis(1)).into_dyn());
        }
        if sink.wants(self.x) {
            let gamma = graph.value(self.gamma).as_slice().unwrap();
            let mut dx = g.to_owned();
            for (ch, mut row) in dx.rows_mut().into_iter().enumerate() {
                row *= gamma[ch] * self.inv_std[ch];
            }
            let shape = graph.shape(self.x).to_vec();
            sink.add(self.x, reshape(dx.into_dyn(), &shape));
        }
    }
}

struct L2NormalizeFn {
    x: Var,
    out: Tensor,
    norms: Vec<f64>,
}

impl Function for L2NormalizeFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let d = *self.out.shape().last().unwrap();
        let rows = self.norms.len();
        let y = as_matrix(&self.out, rows, d);
        let g = as_matrix(grad, rows, d);
        let mut dx = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let (yr, gr) = (y.row(r), g.row(r));
            let dot = yr.dot(&gr);
            let inv = 1.0 / self.norms[r];
            dx.extend(yr.iter().zip(gr.iter()).map(|(&yv, &gv)| (gv - yv * dot) * inv));
        }
        let shape = graph.shape(self.x).to_vec();
        sink.add(self.x, Tensor::from_shape_vec(IxDyn(&shape), dx).unwrap());
    }
}

impl Graph {
    /// Batch norm over axis 0 using the statistics of `x` itself.
    /// Returns the normalised output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let m = self.value(x).len() / c;
        let xm = as_matrix(self.value(x), c, m);
        let gv = self.value(gamma).as_slice().unwrap();
        let bv = self.value(beta).as_slice().unwrap();
        let mut xhat = Vec::with_capacity(c * m);
        let mut out = Vec::with_capacity(c * m);
        let mut stats = BatchStats {
            mean: Vec::with_capacity(c),
            var_unbiased: Vec::with_capacity(c),
        };
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let row = xm.row(ch);
            let mean = row.sum() / m as f64;
            let ss = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean));
            let var = ss / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for &v in row.iter() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(gv[ch] * h + bv[ch]);
            }
            stats.mean.push(mean);
            stats.var_unbiased.push(if m > 1 { ss / (m - 1) as f64 } else { var });
            inv_std.push(is);
        }
        let value = Tensor::from_shape_vec(IxDyn(&shape), out).unwrap();
        let xhat = Tensor::from_shape_vec(IxDyn(&[c * m]), xhat).unwrap();
        let v = self.push(value, &[x, gamma, beta], move || BatchNormTrainFn {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        });
        (v, stats)
    }

    /// Batch norm over axis 0 with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let m = self.value(x).len() / c;
        let xm = as_matrix(self.value(x), c, m);
        let gv = self.value(gamma).as_slice().unwrap();
        let bv = self.value(beta).as_slice().unwrap();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(c * m);
        let mut out = Vec::with_capacity(c * m);
        for ch in 0..c {
            for &v in xm.row(ch).iter() {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gv[ch] * h + bv[ch]);
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&shape), out).unwrap();
        let xhat = Tensor::from_shape_vec(IxDyn(&[c * m]), xhat).unwrap();
        self.push(value, &[x, gamma, beta], move || BatchNormEvalFn {
            x,
            gamma,
            beta,
            inv_std,
            xhat,
        })
    }

    /// Scale every vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("l2_normalize needs an axis");
        let rows = self.value(x).len() / d.max(1);
        let xm = as_matrix(self.value(x), rows, d);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = xm.row(r);
            let n = row.dot(&row).sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::from_shape_vec(IxDyn(&shape), out).unwrap();
        let cached = value.clone();
        self.push(value, &[x], move || L2NormalizeFn { x, out: cached, norms })
    }
}
