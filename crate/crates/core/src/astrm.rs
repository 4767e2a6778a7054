//! Adaptive spatio-temporal refinement.
//!
//! Three gates are computed from the same input volume `x: [C, B, T, H, W]`:
//!
//! * local spatial gate `F_s = σ(conv7x7([mean_c(x); max_c(x)]))`, shape `[1, B, T, H, W]`
//! * local temporal gate `F_t = σ(conv1x1x1(BN(ReLU(conv3x1x1(x)))))`, shape `[C, B, T, H, W]`
//! * global temporal kernel `G_t = σ(FC(ReLU(FC(GAP_hw(x)))))`, shape `[C, B, K_t]`
//!
//! and combined as `((x ⊙ (1 + F_s)) ⊙ (1 + F_t)) ∗ G_t`, where `∗` is a
//! depthwise temporal convolution with the per-sample, per-channel kernel
//! `G_t` and zero padding `K_t / 2`. The kernel is used as produced by the
//! sigmoid, without normalisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, Session, TimeConv};
use crate::params::{BufferStore, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AstrmSpec {
    /// Temporal kernel size `K_t` of the adaptive convolution (odd).
    pub kernel_size: usize,
    /// Channel reduction `r_t` of the local temporal branch.
    pub temporal_reduction: usize,
    /// Hidden width of the global branch, as a multiple of the clip length.
    pub global_hidden_ratio: usize,
}

impl Default for AstrmSpec {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            temporal_reduction: 2,
            global_hidden_ratio: 2,
        }
    }
}

impl AstrmSpec {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config(
                "astrm.kernel_size",
                format!("must be odd and positive, got {}", self.kernel_size),
            ));
        }
        if self.temporal_reduction == 0 || channels % self.temporal_reduction != 0 {
            return Err(Error::config(
                "astrm.temporal_reduction",
                format!(
                    "{} channels are not divisible by reduction {}",
                    channels, self.temporal_reduction
                ),
            ));
        }
        if self.global_hidden_ratio == 0 {
            return Err(Error::config("astrm.global_hidden_ratio", "must be >= 1"));
        }
        Ok(())
    }

    /// Number of trainable scalars of one module on `channels` channels and
    /// clips of `clip_len` frames.
    pub fn parameter_count(&self, channels: usize, clip_len: usize) -> usize {
        let reduced = channels / self.temporal_reduction;
        let hidden = clip_len * self.global_hidden_ratio;
        let spatial = 2 * 7 * 7 + 1;
        let temporal = (channels * reduced * 3 + reduced) + 2 * reduced + (reduced * channels + channels);
        let global = (clip_len * hidden + hidden) + (hidden * self.kernel_size + self.kernel_size);
        spatial + temporal + global
    }
}

#[derive(Clone, Debug)]
pub struct Astrm {
    pub channels: usize,
    pub clip_len: usize,
    pub kernel_size: usize,
    pub spatial: Conv2d,
    pub temporal_reduce: TimeConv,
    pub temporal_bn: BatchNorm,
    pub temporal_expand: Conv2d,
    pub global_fc1: Linear,
    pub global_fc2: Linear,
}

impl Astrm {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        buffers: &mut BufferStore,
        name: &str,
        channels: usize,
        clip_len: usize,
        spec: &AstrmSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(channels)?;
        let reduced = channels / spec.temporal_reduction;
        let hidden = clip_len * spec.global_hidden_ratio;
        Ok(Self {
            channels,
            clip_len,
            kernel_size: spec.kernel_size,
            spatial: Conv2d::new(params, &format!("{name}.spatial"), 2, 1, 7, 1, 3, true, rng),
            temporal_reduce: TimeConv::new(params, &format!("{name}.temporal_reduce"), channels, reduced, 3, rng),
            temporal_bn: BatchNorm::new(params, buffers, &format!("{name}.temporal_bn"), reduced),
            temporal_expand: Conv2d::new(
                params,
                &format!("{name}.temporal_expand"),
                reduced,
                channels,
                1,
                1,
                0,
                true,
                rng,
            ),
            global_fc1: Linear::new(params, &format!("{name}.global_fc1"), clip_len, hidden, rng),
            global_fc2: Linear::new(params, &format!("{name}.global_fc2"), hidden, spec.kernel_size, rng),
        })
    }

    /// `[1, B, T, H, W]` gate from channel-pooled maps.
    pub fn spatial_gate(&self, s: &mut Session<'_>, x: Var) -> Var {
        let avg = s.graph.mean_axes(x, &[0], true);
        let max = s.graph.max_axis(x, 0);
        let pooled = s.graph.concat(&[avg, max], 0);
        let logits = self.spatial.forward(s, pooled);
        s.graph.sigmoid(logits)
    }

    /// `[C, B, T, H, W]` gate; no spatial pooling.
    pub fn temporal_gate(&self, s: &mut Session<'_>, x: Var) -> Var {
        let y = self.temporal_reduce.forward(s, x);
        let y = s.graph.relu(y);
        let y = self.temporal_bn.forward(s, y);
        let y = self.temporal_expand.forward(s, y);
        s.graph.sigmoid(y)
    }

    /// `[C, B, K_t]` kernel from spatially averaged features.
    pub fn global_kernel(&self, s: &mut Session<'_>, x: Var) -> Var {
        let shape = s.graph.shape(x).to_vec();
        assert_eq!(
            shape[2], self.clip_len,
            "global temporal branch is sized for clips of {} frames",
            self.clip_len
        );
        let spatial_axes: Vec<usize> = (3..shape.len()).collect();
        let pooled = s.graph.mean_axes(x, &spatial_axes, false);
        let h = self.global_fc1.forward(s, pooled);
        let h = s.graph.relu(h);
        let k = self.global_fc2.forward(s, h);
        s.graph.sigmoid(k)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let fs = self.spatial_gate(s, x);
        let fs1 = s.graph.add_scalar(fs, 1.0);
        let xs = s.graph.mul(x, fs1);
        let ft = self.temporal_gate(s, x);
        let ft1 = s.graph.add_scalar(ft, 1.0);
        let xst = s.graph.mul(xs, ft1);
        let kernel = self.global_kernel(s, x);
        s.graph.adaptive_time_conv(xst, kernel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::nn::Mode;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize, t: usize) -> (ParamStore, BufferStore, Astrm) {
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Astrm::new(
            &mut params,
            &mut buffers,
            "astrm",
            c,
            t,
            &AstrmSpec::default(),
            &mut rng,
        )
        .unwrap();
        (params, buffers, m)
    }

    #[test]
    fn parameter_count_matches_store() {
        for &(c, t) in &[(4, 8), (16, 128), (2, 1)] {
            let (params, _, _) = build(c, t);
            assert_eq!(params.num_scalars(), AstrmSpec::default().parameter_count(c, t));
        }
    }

    #[test]
    fn indivisible_channels_rejected() {
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Astrm::new(&mut params, &mut buffers, "a", 5, 4, &AstrmSpec::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "astrm.temporal_reduction"));
    }

    #[test]
    fn zero_parameters_give_half_gates() {
        let (mut params, buffers, m) = build(4, 5);
        params.values_mut().iter_mut().for_each(|v| v.fill(0.0));
        let mut s = Session::new(&params, &buffers, Mode::Train, false);
        let x = s.graph.constant(Tensor::from_shape_fn(IxDyn(&[4, 1, 5, 3, 3]), |i| {
            (i[0] + 2 * i[2] + i[3] * i[4]) as f64 * 0.1 - 0.4
        }));
        for gate in [
            m.spatial_gate(&mut s, x),
            m.temporal_gate(&mut s, x),
            m.global_kernel(&mut s, x),
        ] {
            assert!(s.graph.value(gate).iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn temporal_gate_handles_single_frame() {
        let (params, buffers, m) = build(4, 1);
        let mut s = Session::new(&params, &buffers, Mode::Eval, false);
        let x = s.graph.constant(Tensor::from_elem(IxDyn(&[4, 1, 1, 2, 2]), 0.3));
        let y = m.forward(&mut s, x);
        assert_eq!(s.graph.shape(y), &[4, 1, 1, 2, 2]);
        assert!(s.graph.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_input_maps_to_zero() {
        let (params, buffers, m) = build(4, 6);
        let mut s = Session::new(&params, &buffers, Mode::Eval, false);
        let x = s.graph.constant(Tensor::zeros(IxDyn(&[4, 2, 6, 3, 3])));
        let y = m.forward(&mut s, x);
        assert!(s.graph.value(y).iter().all(|&v| v == 0.0));
    }
}
