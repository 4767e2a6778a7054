//! Long-range temporal blocks operating on `[B, T, D_in]` sequences.
//!
//! Built-in kinds are `bigru`, `bilstm` and `identity`. Other kinds can be
//! registered with [`TemporalRegistry::register`].

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Session};
use crate::params::{uniform, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalBlockSpec {
    pub kind: String,
    /// Hidden size per direction. Defaults to the backbone output width.
    pub hidden: Option<usize>,
    pub layers: usize,
}

impl Default for TemporalBlockSpec {
    fn default() -> Self {
        Self {
            kind: "bigru".into(),
            hidden: None,
            layers: 1,
        }
    }
}

impl TemporalBlockSpec {
    pub fn identity() -> Self {
        Self {
            kind: "identity".into(),
            ..Self::default()
        }
    }
}

/// A sequence model mapping `[B, T, D_in]` to `[B, T, output_dim()]`.
pub trait TemporalModule: Send + Sync {
    fn output_dim(&self) -> usize;
    fn forward(&self, s: &mut Session<'_>, x: Var) -> Var;
}

pub type TemporalBuilder =
    fn(&mut ParamStore, &str, usize, &TemporalBlockSpec, &mut dyn RngCore) -> Result<Box<dyn TemporalModule>>;

#[derive(Clone)]
pub struct TemporalRegistry {
    builders: BTreeMap<String, TemporalBuilder>,
}

impl Default for TemporalRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("identity", build_identity);
        r.register("bigru", build_bigru);
        r.register("bilstm", build_bilstm);
        r
    }
}

impl TemporalRegistry {
    pub fn register(&mut self, kind: &str, builder: TemporalBuilder) {
        self.builders.insert(kind.to_string(), builder);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(
        &self,
        params: &mut ParamStore,
        name: &str,
        input_dim: usize,
        spec: &TemporalBlockSpec,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn TemporalModule>> {
        if spec.layers == 0 {
            return Err(Error::config("temporal.layers", "must be >= 1"));
        }
        if spec.hidden == Some(0) {
            return Err(Error::config("temporal.hidden", "must be >= 1"));
        }
        let builder = self.builders.get(&spec.kind).ok_or_else(|| {
            let known: Vec<&str> = self.kinds().collect();
            Error::config(
                "temporal.kind",
                format!("unknown kind `{}`; known: {}", spec.kind, known.join(", ")),
            )
        })?;
        builder(params, name, input_dim, spec, rng)
    }
}

pub struct Identity {
    dim: usize,
}

impl TemporalModule for Identity {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, _s: &mut Session<'_>, x: Var) -> Var {
        x
    }
}

fn build_identity(
    _: &mut ParamStore,
    _: &str,
    input_dim: usize,
    _: &TemporalBlockSpec,
    _: &mut dyn RngCore,
) -> Result<Box<dyn TemporalModule>> {
    Ok(Box::new(Identity { dim: input_dim }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cell {
    Gru,
    Lstm,
}

impl Cell {
    fn gates(self) -> usize {
        match self {
            Cell::Gru => 3,
            Cell::Lstm => 4,
        }
    }
}

/// Weights of one direction of one recurrent layer, in PyTorch layout:
/// gate rows are `(r, z, n)` for GRU and `(i, f, g, o)` for LSTM.
#[derive(Clone, Debug)]
pub struct Direction {
    pub weight_ih: ParamId,
    pub weight_hh: ParamId,
    pub bias_ih: ParamId,
    pub bias_hh: ParamId,
}

impl Direction {
    fn new(
        params: &mut ParamStore,
        name: &str,
        cell: Cell,
        input: usize,
        hidden: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let rows = cell.gates() * hidden;
        Self {
            weight_ih: params.add(format!("{name}.weight_ih"), uniform(&[rows, input], bound, rng)),
            weight_hh: params.add(format!("{name}.weight_hh"), uniform(&[rows, hidden], bound, rng)),
            bias_ih: params.add(format!("{name}.bias_ih"), uniform(&[rows], bound, rng)),
            bias_hh: params.add(format!("{name}.bias_hh"), uniform(&[rows], bound, rng)),
        }
    }
}

/// Bidirectional recurrent stack; outputs `[forward; backward]` per frame.
pub struct BiRecurrent {
    cell: Cell,
    hidden: usize,
    pub layers: Vec<(Direction, Direction)>,
}

impl BiRecurrent {
    fn new(
        params: &mut ParamStore,
        name: &str,
        cell: Cell,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut stack = Vec::with_capacity(layers);
        let mut input = input_dim;
        for l in 0..layers {
            let fwd = Direction::new(params, &format!("{name}.l{l}.forward"), cell, input, hidden, rng);
            let bwd = Direction::new(params, &format!("{name}.l{l}.backward"), cell, input, hidden, rng);
            stack.push((fwd, bwd));
            input = 2 * hidden;
        }
        Self {
            cell,
            hidden,
            layers: stack,
        }
    }

    fn run_direction(&self, s: &mut Session<'_>, x: Var, dir: &Direction, reverse: bool) -> Var {
        let shape = s.graph.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let h_dim = self.hidden;
        let w_ih = s.param(dir.weight_ih);
        let b_ih = s.param(dir.bias_ih);
        let w_hh = s.param(dir.weight_hh);
        let b_hh = s.param(dir.bias_hh);
        let gates_x = s.graph.linear(x, w_ih, Some(b_ih));
        let g = &mut s.graph;
        let mut h = g.constant(Tensor::zeros(IxDyn(&[b, h_dim])));
        let mut c = g.constant(Tensor::zeros(IxDyn(&[b, h_dim])));
        let mut outputs = vec![None; t];
        let rows = self.cell.gates() * h_dim;
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            let xt = g.slice_axis(gates_x, 1, ti, 1);
            let xt = g.reshape(xt, &[b, rows]);
            let ht = g.linear(h, w_hh, Some(b_hh));
            match self.cell {
                Cell::Gru => {
                    let xr = g.slice_axis(xt, 1, 0, h_dim);
                    let xz = g.slice_axis(xt, 1, h_dim, h_dim);
                    let xn = g.slice_axis(xt, 1, 2 * h_dim, h_dim);
                    let hr = g.slice_axis(ht, 1, 0, h_dim);
                    let hz = g.slice_axis(ht, 1, h_dim, h_dim);
                    let hn = g.slice_axis(ht, 1, 2 * h_dim, h_dim);
                    let r = g.add(xr, hr);
                    let r = g.sigmoid(r);
                    let z = g.add(xz, hz);
                    let z = g.sigmoid(z);
                    let rn = g.mul(r, hn);
                    let n = g.add(xn, rn);
                    let n = g.tanh(n);
                    // (1 - z) * n + z * h
                    let d = g.sub(h, n);
                    let zd = g.mul(z, d);
                    h = g.add(n, zd);
                }
                Cell::Lstm => {
                    let pre = g.add(xt, ht);
                    let i = g.slice_axis(pre, 1, 0, h_dim);
                    let f = g.slice_axis(pre, 1, h_dim, h_dim);
                    let gg = g.slice_axis(pre, 1, 2 * h_dim, h_dim);
                    let o = g.slice_axis(pre, 1, 3 * h_dim, h_dim);
                    let i = g.sigmoid(i);
                    let f = g.sigmoid(f);
                    let gg = g.tanh(gg);
                    let o = g.sigmoid(o);
                    let fc = g.mul(f, c);
                    let ig = g.mul(i, gg);
                    c = g.add(fc, ig);
                    let tc = g.tanh(c);
                    h = g.mul(o, tc);
                }
            }
            outputs[ti] = Some(g.reshape(h, &[b, 1, h_dim]));
        }
        let outputs: Vec<Var> = outputs.into_iter().map(Option::unwrap).collect();
        g.concat(&outputs, 1)
    }
}

impl TemporalModule for BiRecurrent {
    fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let mut y = x;
        for (fwd, bwd) in &self.layers {
            let f = self.run_direction(s, y, fwd, false);
            let b = self.run_direction(s, y, bwd, true);
            y = s.graph.concat(&[f, b], 2);
        }
        y
    }
}

fn build_bigru(
    params: &mut ParamStore,
    name: &str,
    input_dim: usize,
    spec: &TemporalBlockSpec,
    rng: &mut dyn RngCore,
) -> Result<Box<dyn TemporalModule>> {
    let hidden = spec.hidden.unwrap_or(input_dim);
    Ok(Box::new(BiRecurrent::new(
        params,
        name,
        Cell::Gru,
        input_dim,
        hidden,
        spec.layers,
        rng,
    )))
}

fn build_bilstm(
    params: &mut ParamStore,
    name: &str,
    input_dim: usize,
    spec: &TemporalBlockSpec,
    rng: &mut dyn RngCore,
) -> Result<Box<dyn TemporalModule>> {
    let hidden = spec.hidden.unwrap_or(input_dim);
    Ok(Box::new(BiRecurrent::new(
        params,
        name,
        Cell::Lstm,
        input_dim,
        hidden,
        spec.layers,
        rng,
    )))
}

/// Per-frame linear map, usable as a minimal custom temporal block.
pub struct FrameLinear {
    pub linear: Linear,
    pub dim: usize,
}

impl TemporalModule for FrameLinear {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        self.linear.forward(s, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::params::BufferStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_linear(
        params: &mut ParamStore,
        name: &str,
        input_dim: usize,
        spec: &TemporalBlockSpec,
        mut rng: &mut dyn RngCore,
    ) -> Result<Box<dyn TemporalModule>> {
        let dim = spec.hidden.unwrap_or(input_dim);
        Ok(Box::new(FrameLinear {
            linear: Linear::new(params, name, input_dim, dim, &mut rng),
            dim,
        }))
    }

    #[test]
    fn unknown_kind_is_config_error() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = TemporalBlockSpec {
            kind: "transformer".into(),
            ..Default::default()
        };
        let err = TemporalRegistry::default()
            .build(&mut params, "t", 4, &spec, &mut rng)
            .err()
            .unwrap();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "temporal.kind"));
    }

    #[test]
    fn plugin_registration() {
        let mut reg = TemporalRegistry::default();
        reg.register("frame_linear", frame_linear);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = TemporalBlockSpec {
            kind: "frame_linear".into(),
            hidden: Some(6),
            layers: 1,
        };
        let m = reg.build(&mut params, "t", 4, &spec, &mut rng).unwrap();
        assert_eq!(m.output_dim(), 6);
        let buffers = BufferStore::new();
        let mut s = Session::new(&params, &buffers, Mode::Eval, false);
        let x = s.graph.constant(Tensor::ones(IxDyn(&[2, 5, 4])));
        let y = m.forward(&mut s, x);
        assert_eq!(s.graph.shape(y), &[2, 5, 6]);
    }

    #[test]
    fn lstm_output_shape_and_gradients() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = TemporalBlockSpec {
            kind: "bilstm".into(),
            hidden: Some(3),
            layers: 2,
        };
        let m = TemporalRegistry::default()
            .build(&mut params, "t", 4, &spec, &mut rng)
            .unwrap();
        assert_eq!(m.output_dim(), 6);
        let buffers = BufferStore::new();
        let x = Tensor::from_shape_fn(IxDyn(&[2, 5, 4]), |_| rng.random_range(-1.0..1.0));
        let coeffs = Tensor::from_shape_fn(IxDyn(&[2, 5, 6]), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &ParamStore, track: bool| {
            let mut s = Session::new(p, &buffers, Mode::Train, track);
            let xv = s.graph.constant(x.clone());
            let y = m.forward(&mut s, xv);
            let l = s.graph.dot_const(y, coeffs.clone());
            let grads = track.then(|| s.param_grads(&s.graph.backward(l)));
            (s.graph.value(l).sum(), grads)
        };
        let analytic = loss(&params, true).1.unwrap();
        let report = crate::gradcheck::check_tensor_gradients(
            params.values(),
            &analytic,
            crate::gradcheck::Probe {
                step: 1e-5,
                ..Default::default()
            },
            |values| {
                let mut p = params.clone();
                p.values_mut().clone_from_slice(values);
                loss(&p, false).0
            },
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
