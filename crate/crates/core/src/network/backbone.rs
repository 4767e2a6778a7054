use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::astrm::{Astrm, AstrmSpec};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Session};
use crate::params::{BufferStore, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub stem_width: usize,
    pub stem_stride: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
    /// Output width divided by the inner width of each bottleneck.
    pub bottleneck_ratio: usize,
    pub astrm_enabled: bool,
    pub astrm: AstrmSpec,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            stem_width: 16,
            stem_stride: 2,
            widths: vec![16, 32, 64],
            blocks: vec![2, 2, 2],
            strides: vec![2, 2, 2],
            bottleneck_ratio: 1,
            astrm_enabled: true,
            astrm: AstrmSpec::default(),
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 {
            return Err(Error::config("backbone.stem_width", "must be >= 1"));
        }
        if self.stem_stride == 0 {
            return Err(Error::config("backbone.stem_stride", "must be >= 1"));
        }
        if self.widths.is_empty() {
            return Err(Error::config("backbone.widths", "need at least one stage"));
        }
        if self.blocks.len() != self.widths.len() {
            return Err(Error::config(
                "backbone.blocks",
                format!("{} entries for {} stages", self.blocks.len(), self.widths.len()),
            ));
        }
        if self.strides.len() != self.widths.len() {
            return Err(Error::config(
                "backbone.strides",
                format!("{} entries for {} stages", self.strides.len(), self.widths.len()),
            ));
        }
        if self.blocks.contains(&0) {
            return Err(Error::config("backbone.blocks", "every stage needs a block"));
        }
        if self.strides.contains(&0) {
            return Err(Error::config("backbone.strides", "strides must be >= 1"));
        }
        if self.bottleneck_ratio == 0 {
            return Err(Error::config("backbone.bottleneck_ratio", "must be >= 1"));
        }
        for &w in &self.widths {
            if w == 0 || w % self.bottleneck_ratio != 0 {
                return Err(Error::config(
                    "backbone.widths",
                    format!(
                        "width {w} is not a positive multiple of bottleneck_ratio {}",
                        self.bottleneck_ratio
                    ),
                ));
            }
            if self.astrm_enabled {
                self.astrm.validate(w / self.bottleneck_ratio)?;
            }
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Spatial size after the whole stack for a `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let down = |n: usize, s: usize| (n + 2 - 3) / s + 1;
        let mut hw = (down(h, self.stem_stride), down(w, self.stem_stride));
        for (&s, &n) in self.strides.iter().zip(&self.blocks) {
            hw = (down(hw.0, s), down(hw.1, s));
            for _ in 1..n {
                hw = (down(hw.0, 1), down(hw.1, 1));
            }
        }
        hw
    }
}

#[derive(Clone, Debug)]
struct Shortcut {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    astrm: Option<Astrm>,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    shortcut: Option<Shortcut>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        params: &mut ParamStore,
        buffers: &mut BufferStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        spec: &BackboneSpec,
        clip_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mid = cout / spec.bottleneck_ratio;
        let astrm = if spec.astrm_enabled {
            Some(Astrm::new(
                params,
                buffers,
                &format!("{name}.astrm"),
                mid,
                clip_len,
                &spec.astrm,
                rng,
            )?)
        } else {
            None
        };
        let shortcut = (stride != 1 || cin != cout).then(|| Shortcut {
            conv: Conv2d::new(
                params,
                &format!("{name}.shortcut.conv"),
                cin,
                cout,
                1,
                stride,
                0,
                false,
                rng,
            ),
            bn: BatchNorm::new(params, buffers, &format!("{name}.shortcut.bn"), cout),
        });
        Ok(Self {
            conv1: Conv2d::new(params, &format!("{name}.conv1"), cin, mid, 1, 1, 0, false, rng),
            bn1: BatchNorm::new(params, buffers, &format!("{name}.bn1"), mid),
            astrm,
            conv2: Conv2d::new(params, &format!("{name}.conv2"), mid, mid, 3, stride, 1, false, rng),
            bn2: BatchNorm::new(params, buffers, &format!("{name}.bn2"), mid),
            conv3: Conv2d::new(params, &format!("{name}.conv3"), mid, cout, 1, 1, 0, false, rng),
            bn3: BatchNorm::new(params, buffers, &format!("{name}.bn3"), cout),
            shortcut,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let y = self.conv1.forward(s, x);
        let y = self.bn1.forward(s, y);
        let mut y = s.graph.relu(y);
        if let Some(astrm) = &self.astrm {
            y = astrm.forward(s, y);
        }
        let y = self.conv2.forward(s, y);
        let y = self.bn2.forward(s, y);
        let y = s.graph.relu(y);
        let y = self.conv3.forward(s, y);
        let y = self.bn3.forward(s, y);
        let identity = match &self.shortcut {
            Some(sc) => {
                let r = sc.conv.forward(s, x);
                sc.bn.forward(s, r)
            }
            None => x,
        };
        let sum = s.graph.add(y, identity);
        s.graph.relu(sum)
    }
}

/// Per-frame 2-D convolutional stack over `[3, B, T, H, W]` volumes with
/// ASTRM after the first convolution of every bottleneck.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Bottleneck>,
}

impl Backbone {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        buffers: &mut BufferStore,
        spec: &BackboneSpec,
        in_channels: usize,
        clip_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let stem = Conv2d::new(
            params,
            "stem.conv",
            in_channels,
            spec.stem_width,
            3,
            spec.stem_stride,
            1,
            false,
            rng,
        );
        let stem_bn = BatchNorm::new(params, buffers, "stem.bn", spec.stem_width);
        let mut blocks = Vec::new();
        let mut cin = spec.stem_width;
        for (stage, ((&width, &n), &stride)) in spec.widths.iter().zip(&spec.blocks).zip(&spec.strides).enumerate() {
            for b in 0..n {
                let name = format!("stage{}.block{}", stage + 1, b + 1);
                let st = if b == 0 { stride } else { 1 };
                blocks.push(Bottleneck::new(
                    params, buffers, &name, cin, width, st, spec, clip_len, rng,
                )?);
                cin = width;
            }
        }
        Ok(Self { stem, stem_bn, blocks })
    }

    /// `[3, B, T, H, W]` frames to `[C, B, T]` spatially averaged features.
    pub fn forward(&self, s: &mut Session<'_>, frames: Var) -> Var {
        let y = self.stem.forward(s, frames);
        let y = self.stem_bn.forward(s, y);
        let mut y = s.graph.relu(y);
        for block in &self.blocks {
            y = block.forward(s, y);
        }
        s.graph.mean_axes(y, &[3, 4], false)
    }
}
