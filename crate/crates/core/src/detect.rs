//! Multi-scale anchor-based detection head.
//!
//! Three Conv Sets run coarse to fine on the stride-32, 16 and 8 backbone
//! taps. After each set, a 1x1 prediction layer emits `B * (1 + 4 + C)`
//! channels per cell, and a 1x1 reduction plus x2 upsample feeds the next
//! finer scale, where it is concatenated with the backbone tap.

use crate::backbone::FeaturePyramid;
use crate::error::{MdspError, Result};
use crate::nn::{Builder, Conv, ConvBn, Ctx};
use crate::spec::{NetworkSpec, Task, ANCHORS_PER_SCALE, DETECT_STRIDES};
use crate::tensor::{Activation, Element, Owner, Tensor, Var};

/// Channel fields of one anchor in a raw prediction tensor.
pub const FIELD_OBJ: usize = 0;
pub const FIELD_BOX: usize = 1;
pub const FIELD_CLASS: usize = 5;

/// Initial objectness bias; keeps early no-object loss small.
const OBJ_BIAS_INIT: f64 = -4.0;

/// Five alternating 1x1/3x3 convs: `in -> m -> 2m -> m -> 2m -> m`.
#[derive(Debug, Clone)]
pub struct ConvSet {
    layers: Vec<ConvBn>,
}

impl ConvSet {
    fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, cin: usize, mid: usize) -> Self {
        let relu = Activation::Relu;
        let plan = [(cin, mid, 1), (mid, 2 * mid, 3), (2 * mid, mid, 1), (mid, 2 * mid, 3), (2 * mid, mid, 1)];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k))| b.conv_bn(&format!("{name}.{i}"), ci, co, k, 1, relu))
            .collect();
        Self { layers }
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(cx, x)?;
        }
        Ok(x)
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| if l.conv.pad == 0 { 1 } else { 3 }).collect()
    }
}

/// Channel plan of the detection path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectChannels {
    /// Input channels of each Conv Set (after concatenation), coarse to fine.
    pub set_in: [usize; 3],
    /// Output channels of each Conv Set.
    pub set_out: [usize; 3],
    /// Output channels of the two reduction layers.
    pub reduce_out: [usize; 2],
}

impl DetectChannels {
    pub fn plan(taps: [usize; 4]) -> Self {
        let [_, c3, c4, c5] = taps;
        let m1 = (c5 / 2).max(1);
        let r1 = (m1 / 2).max(1);
        let m2 = (c4 / 2).max(1);
        let r2 = (m2 / 2).max(1);
        let m3 = (c3 / 2).max(1);
        Self { set_in: [c5, r1 + c4, r2 + c3], set_out: [m1, m2, m3], reduce_out: [r1, r2] }
    }
}

/// Closed-form parameter count of the detection branch: Conv Sets and
/// reductions whenever they are built, plus prediction layers when detection
/// is in the task mask.
pub fn count_head_params(spec: &NetworkSpec) -> usize {
    use crate::backbone::{conv_bn_params, stage_channels};
    let mask = spec.task_mask;
    if !mask.contains(Task::Detect) && !mask.contains(Task::Segment) {
        return 0;
    }
    let ch = DetectChannels::plan(stage_channels(spec));
    let mut n = 0;
    for i in 0..3 {
        let (ci, m) = (ch.set_in[i], ch.set_out[i]);
        n += conv_bn_params(ci, m, 1) + 2 * conv_bn_params(m, 2 * m, 3) + 2 * conv_bn_params(2 * m, m, 1);
        if mask.contains(Task::Detect) {
            n += m * spec.detect_depth() + spec.detect_depth();
        }
    }
    n + (0..2).map(|i| conv_bn_params(ch.set_out[i], ch.reduce_out[i], 1)).sum::<usize>()
}

#[derive(Debug, Clone)]
pub struct DetectHead {
    sets: Vec<ConvSet>,
    reduces: Vec<ConvBn>,
    preds: Option<Vec<Conv>>,
    pub channels: DetectChannels,
}

/// Outputs of the detection path on the tape.
#[derive(Debug, Clone)]
pub struct DetectVars {
    /// Raw prediction tensors, coarse to fine; absent when detection is not built.
    pub raw: Option<[Var; 3]>,
    /// Conv Set outputs, coarse to fine.
    pub taps: [Var; 3],
}

impl DetectHead {
    /// Builds the Conv Sets (always) and the prediction layers (only when
    /// detection is in the task mask).
    pub fn build<T: Element>(spec: &NetworkSpec, taps: [usize; 4], b: &mut Builder<'_, T>) -> Self {
        let ch = DetectChannels::plan(taps);
        let relu = Activation::Relu;
        b.set_owner(Owner::DetectShared);
        let sets = (0..3).map(|i| ConvSet::build(b, &format!("detect.convset{}", i + 1), ch.set_in[i], ch.set_out[i])).collect();
        let reduces = (0..2)
            .map(|i| b.conv_bn(&format!("detect.reduce{}", i + 1), ch.set_out[i], ch.reduce_out[i], 1, 1, relu))
            .collect();
        let preds = spec.task_mask.contains(Task::Detect).then(|| {
            b.set_owner(Owner::DetectPred);
            (0..3)
                .map(|i| b.conv(&format!("detect.pred{}", i + 1), ch.set_out[i], spec.detect_depth(), 1, 1, true))
                .collect()
        });
        Self { sets, reduces, preds, channels: ch }
    }

    pub fn has_predictions(&self) -> bool {
        self.preds.is_some()
    }

    pub fn conv_sets(&self) -> &[ConvSet] {
        &self.sets
    }

    pub fn prediction_layers(&self) -> Option<&[Conv]> {
        self.preds.as_deref()
    }

    /// Sets the objectness bias of every anchor in the prediction layers.
    pub fn init_objectness_bias<T: Element>(&self, store: &mut crate::tensor::ParamStore<T>, fields: usize) {
        if let Some(preds) = &self.preds {
            for p in preds {
                let bias = store.get_mut(p.bias.expect("prediction layers have bias"));
                for a in 0..ANCHORS_PER_SCALE {
                    bias.data_mut()[a * fields + FIELD_OBJ] = T::from_f64(OBJ_BIAS_INIT);
                }
            }
        }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut Ctx<'_, T>,
        pyramid: &FeaturePyramid,
        predict: bool,
    ) -> Result<DetectVars> {
        let (c4, c5) = match (pyramid.c4, pyramid.c5) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(MdspError::InvalidArgument("detection path needs the deep backbone taps".into())),
        };
        let inputs = [c5, c4, pyramid.c3];
        let mut taps = Vec::with_capacity(3);
        let mut carry: Option<Var> = None;
        for (i, set) in self.sets.iter().enumerate() {
            let x = match carry {
                None => inputs[i],
                Some(r) => {
                    let up = cx.tape.upsample_nearest(r, 2)?;
                    cx.tape.concat_channels(&[up, inputs[i]])?
                }
            };
            let t = set.forward(cx, x)?;
            taps.push(t);
            if i < 2 {
                carry = Some(self.reduces[i].forward(cx, t)?);
            }
        }
        let raw = match (&self.preds, predict) {
            (Some(preds), true) => {
                let mut out = Vec::with_capacity(3);
                for (p, &t) in preds.iter().zip(&taps) {
                    out.push(p.forward(cx, t)?);
                }
                Some([out[0], out[1], out[2]])
            }
            _ => None,
        };
        Ok(DetectVars { raw, taps: [taps[0], taps[1], taps[2]] })
    }
}

/// Raw detection tensors for one forward pass, coarse to fine. Each is
/// stored NCHW as `(batch, B * (5 + C), N, N)`; anchor `a` owns channels
/// `a * (5 + C) .. (a + 1) * (5 + C)` laid out as objectness, `tx, ty, tw, th`,
/// then `C` class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetectOutput<T = f32> {
    pub scales: Vec<Tensor<T>>,
    pub num_classes: usize,
}

impl<T: Element> RawDetectOutput<T> {
    pub fn fields(&self) -> usize {
        5 + self.num_classes
    }

    pub fn batch(&self) -> usize {
        self.scales[0].shape()[0]
    }

    /// Grid size of scale `s`.
    pub fn grid(&self, s: usize) -> usize {
        self.scales[s].shape()[2]
    }

    pub fn stride(&self, s: usize) -> usize {
        DETECT_STRIDES[s]
    }

    /// Flat index of `(batch, anchor, field, y, x)` within scale `s`.
    pub fn index(&self, s: usize, b: usize, anchor: usize, field: usize, y: usize, x: usize) -> usize {
        let sh = self.scales[s].shape();
        let (c, n) = (sh[1], sh[2]);
        ((b * c + anchor * self.fields() + field) * n + y) * n + x
    }

    pub fn get(&self, s: usize, b: usize, anchor: usize, field: usize, y: usize, x: usize) -> T {
        self.scales[s].data()[self.index(s, b, anchor, field, y, x)]
    }

    /// The same values in `(batch, N, N, B * (5 + C))` order.
    pub fn to_channels_last(&self, s: usize) -> Tensor<T> {
        let t = &self.scales[s];
        let (bn, c, h, w) = t.dims4().expect("raw output is 4-d");
        let mut data = Vec::with_capacity(t.numel());
        for b in 0..bn {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(t.at4(b, ch, y, x));
                    }
                }
            }
        }
        Tensor::new(vec![bn, h, w, c], data).expect("permuted shape")
    }

    pub fn batch_item(&self, b: usize) -> Result<Self> {
        Ok(Self {
            scales: self.scales.iter().map(|t| t.batch_item(b)).collect::<Result<_>>()?,
            num_classes: self.num_classes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_plan_at_full_width() {
        let ch = DetectChannels::plan([64, 128, 256, 512]);
        assert_eq!(ch.set_in, [512, 128 + 256, 64 + 128]);
        assert_eq!(ch.set_out, [256, 128, 64]);
        assert_eq!(ch.reduce_out, [128, 64]);
    }
}
