//! Reduced CSP-style feature extractor.
//!
//! Layer list (`ch(b) = max(1, round(b * width_mult))`, `h = max(1, c / 2)`):
//!
//! | layer            | conv                      | output stride |
//! |------------------|---------------------------|---------------|
//! | stem             | 3x3/2, 3 -> ch(32)        | 2             |
//! | stage i, down    | 3x3/2, c_{i-1} -> c_i     | 4, 8, 16, 32  |
//! | stage i, split a | 1x1, c_i -> h             |               |
//! | stage i, split b | 1x1, c_i -> h             |               |
//! | residual (xD)    | 1x1 h -> h, 3x3 h -> h    |               |
//! | stage i, post b  | 1x1, h -> h               |               |
//! | stage i, merge   | 1x1, 2h -> c_i            |               |
//!
//! with `c_i = ch(64), ch(128), ch(256), ch(512)`. Every conv is followed by
//! batch norm and ReLU. Stage outputs are the taps `c_early` (stride 4), `c3`
//! (stride 8), `c4` (stride 16) and `c5` (stride 32).

use crate::error::{MdspError, Result};
use crate::nn::{Builder, ConvBn, Ctx};
use crate::spec::NetworkSpec;
use crate::tensor::{Activation, Element, Owner, Var};

pub const STAGE_BASE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const STEM_BASE_CHANNELS: usize = 32;
pub const TAP_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Backbone taps. `c4` and `c5` are absent when only the stride-8 and
/// shallower part of the backbone was evaluated.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub c_early: Var,
    pub c3: Var,
    pub c4: Option<Var>,
    pub c5: Option<Var>,
}

#[derive(Debug, Clone)]
struct Residual {
    reduce: ConvBn,
    conv: ConvBn,
}

#[derive(Debug, Clone)]
struct CspStage {
    down: ConvBn,
    split_a: ConvBn,
    split_b: ConvBn,
    blocks: Vec<Residual>,
    post_b: ConvBn,
    merge: ConvBn,
}

impl CspStage {
    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let x = self.down.forward(cx, x)?;
        let a = self.split_a.forward(cx, x)?;
        let mut b = self.split_b.forward(cx, x)?;
        for r in &self.blocks {
            let y = r.reduce.forward(cx, b)?;
            let y = r.conv.forward(cx, y)?;
            b = cx.tape.add(b, y)?;
        }
        let b = self.post_b.forward(cx, b)?;
        let cat = cx.tape.concat_channels(&[a, b])?;
        self.merge.forward(cx, cat)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    input_size: usize,
    stem: ConvBn,
    stages: Vec<CspStage>,
    channels: [usize; 4],
}

pub fn stage_channels(spec: &NetworkSpec) -> [usize; 4] {
    STAGE_BASE_CHANNELS.map(|b| spec.channels(b))
}

/// Trainable scalars of a bias-free conv plus its batch-norm scale and shift.
pub(crate) fn conv_bn_params(cin: usize, cout: usize, k: usize) -> usize {
    k * k * cin * cout + 2 * cout
}

/// Closed-form parameter count of the layer list above.
pub fn count_backbone_params(spec: &NetworkSpec) -> usize {
    let stem = spec.channels(STEM_BASE_CHANNELS);
    let mut n = conv_bn_params(3, stem, 3);
    let mut prev = stem;
    for c in stage_channels(spec) {
        let h = (c / 2).max(1);
        n += conv_bn_params(prev, c, 3)
            + 2 * conv_bn_params(c, h, 1)
            + spec.backbone_depth * (conv_bn_params(h, h, 1) + conv_bn_params(h, h, 3))
            + conv_bn_params(h, h, 1)
            + conv_bn_params(2 * h, c, 1);
        prev = c;
    }
    n
}

impl Backbone {
    pub fn build<T: Element>(spec: &NetworkSpec, b: &mut Builder<'_, T>) -> Result<Self> {
        if spec.input_size == 0 || !spec.input_size.is_multiple_of(32) {
            return Err(MdspError::Config(format!(
                "input_size {} is not a positive multiple of 32",
                spec.input_size
            )));
        }
        let relu = Activation::Relu;
        b.set_owner(Owner::BackboneShallow);
        let stem_ch = spec.channels(STEM_BASE_CHANNELS);
        let stem = b.conv_bn("backbone.stem", 3, stem_ch, 3, 2, relu);
        let channels = stage_channels(spec);
        let mut prev = stem_ch;
        let mut stages = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            if i >= 2 {
                b.set_owner(Owner::BackboneDeep);
            }
            let h = (c / 2).max(1);
            let p = format!("backbone.stage{}", i + 1);
            let stage = CspStage {
                down: b.conv_bn(&format!("{p}.down"), prev, c, 3, 2, relu),
                split_a: b.conv_bn(&format!("{p}.split_a"), c, h, 1, 1, relu),
                split_b: b.conv_bn(&format!("{p}.split_b"), c, h, 1, 1, relu),
                blocks: (0..spec.backbone_depth)
                    .map(|r| Residual {
                        reduce: b.conv_bn(&format!("{p}.res{r}.reduce"), h, h, 1, 1, relu),
                        conv: b.conv_bn(&format!("{p}.res{r}.conv"), h, h, 3, 1, relu),
                    })
                    .collect(),
                post_b: b.conv_bn(&format!("{p}.post_b"), h, h, 1, 1, relu),
                merge: b.conv_bn(&format!("{p}.merge"), 2 * h, c, 1, 1, relu),
            };
            stages.push(stage);
            prev = c;
        }
        Ok(Self { input_size: spec.input_size, stem, stages, channels })
    }

    /// Tap channel counts `(c_early, c3, c4, c5)`.
    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    /// Runs the backbone. With `deep = false` only the stride-4 and stride-8
    /// stages are evaluated.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, image: Var, deep: bool) -> Result<FeaturePyramid> {
        let s = cx.tape.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(MdspError::Shape(format!(
                "backbone expects (N, 3, {}, {}) input, got {:?}",
                self.input_size, self.input_size, s
            )));
        }
        let x = self.stem.forward(cx, image)?;
        let c_early = self.stages[0].forward(cx, x)?;
        let c3 = self.stages[1].forward(cx, c_early)?;
        let (c4, c5) = if deep {
            let c4 = self.stages[2].forward(cx, c3)?;
            let c5 = self.stages[3].forward(cx, c4)?;
            (Some(c4), Some(c5))
        } else {
            (None, None)
        };
        Ok(FeaturePyramid { c_early, c3, c4, c5 })
    }
}
