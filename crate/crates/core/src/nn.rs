//! Layer building blocks and the forward-pass session that binds stored
//! parameters onto a fresh autodiff graph.

use ndarray::IxDyn;
use rand::Rng;

use crate::autograd::{BatchStats, Gradients, Graph, Tensor, Var};
use crate::params::{kaiming_normal, uniform, BufferId, BufferStore, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// One forward (and optionally backward) evaluation.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    buffers: &'a BufferStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grad: bool,
    bn_updates: Vec<(BufferId, BufferId, BatchStats)>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamStore, buffers: &'a BufferStore, mode: Mode, track_grad: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            buffers,
            bound: vec![None; params.len()],
            mode,
            track_grad,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Graph node of a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.track_grad {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        self.buffers.get(id)
    }

    /// Gradients for every stored parameter, in store order. Parameters not
    /// touched by this forward pass get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .values()
            .iter()
            .zip(&self.bound)
            .map(|(p, v)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.raw_dim()))
            })
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<(BufferId, BufferId, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Fold training-mode batch statistics into running statistics.
pub fn apply_bn_updates(buffers: &mut BufferStore, updates: &[(BufferId, BufferId, BatchStats)]) {
    for (mean_id, var_id, stats) in updates {
        let mean = buffers.get_mut(*mean_id);
        for (r, &b) in mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let var = buffers.get_mut(*var_id);
        for (r, &b) in var.iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_normal(&[cout, cin, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout]))));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// `k×1×1` convolution along time.
#[derive(Clone, Debug)]
pub struct TimeConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl TimeConv {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_normal(&[cout, cin, kernel], cin * kernel, rng),
        );
        let bias = Some(params.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout]))));
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.time_conv(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform(&[output, input], bound, rng));
        let bias = Some(params.add(format!("{name}.bias"), uniform(&[output], bound, rng)));
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.linear(x, w, b)
    }
}

/// Batch norm over the channel axis (axis 0 of a channel-first volume).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(params: &mut ParamStore, buffers: &mut BufferStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.weight"), Tensor::ones(IxDyn(&[channels]))),
            beta: params.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[channels]))),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(IxDyn(&[channels]))),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::ones(IxDyn(&[channels]))),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm_train(x, gamma, beta, BN_EPS);
                s.bn_updates.push((self.running_mean, self.running_var, stats));
                y
            }
            Mode::Eval => {
                let mean = s.buffers.get(self.running_mean).as_slice().unwrap().to_vec();
                let var = s.buffers.get(self.running_var).as_slice().unwrap().to_vec();
                s.graph.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_ten_to_five_has_55_parameters() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut params, "fc", 10, 5, &mut rng);
        assert_eq!(crate::params::count_parameters(&params), 55);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let bn = BatchNorm::new(&mut params, &mut buffers, "bn", 1);
        let updates = {
            let mut s = Session::new(&params, &buffers, Mode::Train, false);
            let x = s.graph.constant(ndarray::array![[1.0, 3.0]].into_dyn());
            bn.forward(&mut s, x);
            s.take_bn_updates()
        };
        apply_bn_updates(&mut buffers, &updates);
        assert!((buffers.get(bn.running_mean)[0] - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((buffers.get(bn.running_var)[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}
