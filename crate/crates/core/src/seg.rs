//! Four-stage refinement decoder for semantic segmentation.
//!
//! Stage 1 reads the first (stride-32) Conv Set output; stages 2 and 3 fuse
//! in the next Conv Set outputs; stage 4 fuses the stride-4 backbone tap.
//! Each stage ends in a chained residual pooling block. A final 3x3 conv
//! produces class logits, upsampled x4 to the input resolution.

use crate::error::{MdspError, Result};
use crate::nn::{Builder, Conv, Ctx};
use crate::spec::NetworkSpec;
use crate::tensor::{Element, Owner, Tensor, Var};

pub const DECODER_BASE_CHANNELS: usize = 256;
pub const CRP_STAGES: usize = 4;
const CRP_POOL: usize = 5;
const CRP_LINK_GAIN: f64 = 0.1;

/// Chained residual pooling: `out = x + sum_i conv_i(pool(...))`, where each
/// link pools (5x5, stride 1) the previous link's output and applies a bias-free
/// 1x1 conv.
#[derive(Debug, Clone)]
pub struct CrpBlock {
    pub convs: Vec<Conv>,
}

impl CrpBlock {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        Self { convs: (0..CRP_STAGES).map(|i| b.conv_gain(&format!("{name}.{i}"), channels, channels, 1, 1, false, CRP_LINK_GAIN)).collect() }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut top = x;
        let mut acc = x;
        for conv in &self.convs {
            top = cx.tape.maxpool2d(top, CRP_POOL, 1, CRP_POOL / 2)?;
            top = conv.forward(cx, top)?;
            acc = cx.tape.add(acc, top)?;
        }
        Ok(acc)
    }
}

/// Aligns both branches with 1x1 convs, upsamples the coarse one x2, sums,
/// and applies ReLU.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub coarse: Conv,
    pub fine: Conv,
}

impl FusionBlock {
    fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, coarse_ch: usize, fine_ch: usize, out: usize) -> Self {
        Self {
            coarse: b.conv_gain(&format!("{name}.coarse"), coarse_ch, out, 1, 1, false, 1.0),
            fine: b.conv_gain(&format!("{name}.fine"), fine_ch, out, 1, 1, false, 1.0),
        }
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, coarse: Var, fine: Var) -> Result<Var> {
        let c = self.coarse.forward(cx, coarse)?;
        let c = cx.tape.upsample_nearest(c, 2)?;
        let f = self.fine.forward(cx, fine)?;
        if cx.tape.shape(c) != cx.tape.shape(f) {
            return Err(crate::error::shape_mismatch("fusion", cx.tape.shape(c), cx.tape.shape(f)));
        }
        let s = cx.tape.add(c, f)?;
        Ok(cx.tape.relu(s))
    }
}

#[derive(Debug, Clone)]
pub struct SegHead {
    pub width: usize,
    entry: Conv,
    crps: Vec<CrpBlock>,
    fusions: Vec<FusionBlock>,
    classifier: Conv,
}

impl SegHead {
    /// `convset_ch` are the Conv Set output channels (coarse to fine),
    /// `early_ch` the stride-4 tap channels.
    pub fn build<T: Element>(spec: &NetworkSpec, convset_ch: [usize; 3], early_ch: usize, b: &mut Builder<'_, T>) -> Result<Self> {
        if spec.num_seg_classes < 2 {
            return Err(MdspError::Config(format!("segmentation needs at least 2 classes, got {}", spec.num_seg_classes)));
        }
        b.set_owner(Owner::Segment);
        let d = spec.channels(DECODER_BASE_CHANNELS);
        let entry = b.conv("seg.stage1.adapt", convset_ch[0], d, 1, 1, false);
        let fine = [convset_ch[1], convset_ch[2], early_ch];
        let fusions = (0..3).map(|i| FusionBlock::build(b, &format!("seg.stage{}.fusion", i + 2), d, fine[i], d)).collect();
        let crps = (0..4).map(|i| CrpBlock::build(b, &format!("seg.stage{}.crp", i + 1), d)).collect();
        let classifier = b.conv_gain("seg.classifier", d, spec.num_seg_classes, 3, 1, true, 1.0);
        Ok(Self { width: d, entry, crps, fusions, classifier })
    }

    pub fn crp_blocks(&self) -> &[CrpBlock] {
        &self.crps
    }

    /// Returns full-resolution class logits `(batch, classes, H, W)`.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, convset_taps: [Var; 3], c_early: Var) -> Result<Var> {
        let x = self.entry.forward(cx, convset_taps[0])?;
        let mut x = self.crps[0].forward(cx, x)?;
        let fine = [convset_taps[1], convset_taps[2], c_early];
        for i in 0..3 {
            let f = self.fusions[i].forward(cx, x, fine[i])?;
            x = self.crps[i + 1].forward(cx, f)?;
        }
        let logits = self.classifier.forward(cx, x)?;
        cx.tape.upsample_nearest(logits, 4)
    }
}

/// Per-pixel class probabilities of `(B, C, H, W)` logits.
pub fn softmax_channels<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    let mut out = vec![T::zero(); d.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let at = |k: usize| d[base + k * plane + p].as_f64();
            let mx = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (at(k) - mx).exp()).sum();
            for k in 0..c {
                out[base + k * plane + p] = T::from_f64((at(k) - mx).exp() / z);
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
