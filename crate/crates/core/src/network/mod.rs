//! End-to-end spotting model: per-frame CNN backbone with ASTRM, spatial
//! average pooling, a temporal block, a per-frame classifier and a
//! projection head for contrastive features.

mod backbone;
pub mod temporal;

use ndarray::Axis;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneSpec, Bottleneck};
pub use temporal::{TemporalBlockSpec, TemporalModule, TemporalRegistry};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mode, Session};
use crate::params::{count_parameters, BufferStore, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub temporal: TemporalBlockSpec,
    pub projection_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            temporal: TemporalBlockSpec::default(),
            projection_dim: 128,
        }
    }
}

/// Graph nodes produced by one forward pass over a `[3, B, T, H, W]` batch.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B, T, K]`
    pub logits: Var,
    /// `[B, T, projection_dim]`, unit norm along the last axis.
    pub embeddings: Var,
}

pub struct Model {
    pub spec: ModelSpec,
    pub num_classes: usize,
    pub clip_len: usize,
    backbone: Backbone,
    temporal: Box<dyn TemporalModule>,
    classifier: Linear,
    proj1: Linear,
    proj2: Linear,
}

/// A model together with its parameters and running statistics.
pub struct Network {
    pub model: Model,
    pub params: ParamStore,
    pub buffers: BufferStore,
}

impl Model {
    pub fn build(
        spec: &ModelSpec,
        num_classes: usize,
        clip_len: usize,
        registry: &TemporalRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<Network> {
        if num_classes == 0 {
            return Err(Error::config("dataset.num_classes", "must be >= 1"));
        }
        if clip_len == 0 {
            return Err(Error::config("clip_len", "must be >= 1"));
        }
        if spec.projection_dim == 0 {
            return Err(Error::config("model.projection_dim", "must be >= 1"));
        }
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut rng = rng;
        let backbone = Backbone::new(&mut params, &mut buffers, &spec.backbone, 3, clip_len, &mut rng)?;
        let width = spec.backbone.output_width();
        let temporal = registry.build(&mut params, "temporal", width, &spec.temporal, rng)?;
        let d_out = temporal.output_dim();
        let classifier = Linear::new(&mut params, "classifier", d_out, num_classes, &mut rng);
        let proj1 = Linear::new(&mut params, "projection.fc1", d_out, d_out, &mut rng);
        let proj2 = Linear::new(&mut params, "projection.fc2", d_out, spec.projection_dim, &mut rng);
        let model = Model {
            spec: spec.clone(),
            num_classes,
            clip_len,
            backbone,
            temporal,
            classifier,
            proj1,
            proj2,
        };
        Ok(Network { model, params, buffers })
    }

    /// Build with the default temporal registry and a seeded generator.
    pub fn seeded(spec: &ModelSpec, num_classes: usize, clip_len: usize, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, num_classes, clip_len, &TemporalRegistry::default(), &mut rng)
    }

    pub fn embedding_dim(&self) -> usize {
        self.temporal.output_dim()
    }

    /// Per-frame `[B, T, D_out]` features before the heads.
    pub fn features(&self, s: &mut Session<'_>, frames: Var) -> Var {
        let pooled = self.backbone.forward(s, frames);
        let seq = s.graph.permute(pooled, &[1, 2, 0]);
        self.temporal.forward(s, seq)
    }

    pub fn forward(&self, s: &mut Session<'_>, frames: Var) -> ModelOutput {
        let shape = s.graph.shape(frames);
        assert_eq!(shape.len(), 5, "frames must be [3, B, T, H, W]");
        assert_eq!(shape[0], 3, "frames must have 3 channels");
        let feats = self.features(s, frames);
        let logits = self.classifier.forward(s, feats);
        let h = self.proj1.forward(s, feats);
        let h = s.graph.relu(h);
        let z = self.proj2.forward(s, h);
        let embeddings = s.graph.l2_normalize(z);
        ModelOutput { logits, embeddings }
    }
}

impl Network {
    pub fn num_parameters(&self) -> usize {
        count_parameters(&self.params)
    }

    /// Eval-mode sigmoid scores `[B, T, K]` for `[3, B, T, H, W]` frames.
    pub fn predict(&self, frames: &Tensor) -> Result<Tensor> {
        self.check_frames(frames)?;
        let mut s = Session::new(&self.params, &self.buffers, Mode::Eval, false);
        let x = s.graph.constant(frames.clone());
        let out = self.model.forward(&mut s, x);
        Ok(s.graph.value(out.logits).mapv(crate::autograd::sigmoid_scalar))
    }

    /// Eval-mode scores of a single `[3, T, H, W]` clip, shape `[T, K]`.
    pub fn predict_clip(&self, frames: &Tensor) -> Result<Tensor> {
        let batched = frames.clone().insert_axis(Axis(1));
        Ok(self.predict(&batched)?.index_axis_move(Axis(0), 0))
    }

    pub fn check_frames(&self, frames: &Tensor) -> Result<()> {
        let s = frames.shape();
        if s.len() != 5 || s[0] != 3 {
            return Err(Error::Shape(format!("expected frames [3, B, T, H, W], got {s:?}")));
        }
        if s[2] != self.model.clip_len && self.model.spec.backbone.astrm_enabled {
            return Err(Error::Shape(format!(
                "model was built for clips of {} frames, got {}",
                self.model.clip_len, s[2]
            )));
        }
        Ok(())
    }
}

/// Stack `[3, T, H, W]` clips into a `[3, B, T, H, W]` batch.
pub fn stack_clips(clips: &[&Tensor]) -> Tensor {
    let views: Vec<_> = clips.iter().map(|c| c.view().insert_axis(Axis(1))).collect();
    ndarray::concatenate(Axis(1), &views)
        .expect("clips share a shape")
        .as_standard_layout()
        .into_owned()
}
