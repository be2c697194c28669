//! Bottom-up pose branch on the stride-8 backbone tap: a CPM feature adapter,
//! three part-affinity-field stages and one heatmap stage.

use crate::error::{MdspError, Result};
use crate::nn::{Builder, Conv, ConvBn, Ctx};
use crate::spec::NetworkSpec;
use crate::tensor::{Activation, Element, Owner, Tensor, Var};

pub const CPM_BASE_CHANNELS: usize = 128;
pub const BLOCK_LAYER_BASE_CHANNELS: usize = 64;
pub const STAGE_HIDDEN_BASE_CHANNELS: usize = 128;
pub const PAF_STAGES: usize = 3;
pub const BLOCKS_PER_STAGE: usize = 5;
const OUT_GAIN: f64 = 0.01;

/// Three sequential 3x3 layers whose outputs are concatenated.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    layers: Vec<ConvBn>,
}

impl ConvBlock {
    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(3);
        let mut h = x;
        for l in &self.layers {
            h = l.forward(cx, h)?;
            outs.push(h);
        }
        cx.tape.concat_channels(&outs)
    }
}

/// Five conv blocks, a 1x1 hidden layer and a 1x1 output layer.
#[derive(Debug, Clone)]
pub struct PoseStage {
    blocks: Vec<ConvBlock>,
    hidden: ConvBn,
    out: Conv,
    pub in_channels: usize,
}

impl PoseStage {
    fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, cin: usize, q: usize, r: usize, cout: usize) -> Self {
        let relu = Activation::Relu;
        let mut blocks = Vec::with_capacity(BLOCKS_PER_STAGE);
        let mut prev = cin;
        for i in 0..BLOCKS_PER_STAGE {
            let layers = (0..3)
                .map(|j| b.conv_bn(&format!("{name}.block{i}.{j}"), if j == 0 { prev } else { q }, q, 3, 1, relu))
                .collect();
            blocks.push(ConvBlock { layers });
            prev = 3 * q;
        }
        Self {
            blocks,
            hidden: b.conv_bn(&format!("{name}.hidden"), 3 * q, r, 1, 1, relu),
            out: b.conv_gain(&format!("{name}.out"), r, cout, 1, 1, true, OUT_GAIN),
            in_channels: cin,
        }
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for blk in &self.blocks {
            x = blk.forward(cx, x)?;
        }
        let h = self.hidden.forward(cx, x)?;
        self.out.forward(cx, h)
    }
}

#[derive(Debug, Clone)]
pub struct PoseHead {
    cpm: Vec<Conv>,
    stages: Vec<PoseStage>,
    pub cpm_channels: usize,
}

/// Pose outputs on the tape: one PAF tensor per PAF stage and the heatmaps.
#[derive(Debug, Clone)]
pub struct PoseVars {
    pub pafs: [Var; PAF_STAGES],
    pub heatmaps: Var,
}

/// Stride-8 pose outputs. PAF tensors have `2 * L` channels (x then y
/// component per limb); heatmaps have `K` channels plus an optional trailing
/// background channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRawOutput<T = f32> {
    pub pafs: Vec<Tensor<T>>,
    pub heatmaps: Tensor<T>,
}

impl<T: Element> PoseRawOutput<T> {
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        Ok(Self {
            pafs: self.pafs.iter().map(|t| t.batch_item(b)).collect::<Result<_>>()?,
            heatmaps: self.heatmaps.batch_item(b)?,
        })
    }
}

impl PoseHead {
    pub fn build<T: Element>(spec: &NetworkSpec, c3_channels: usize, b: &mut Builder<'_, T>) -> Result<Self> {
        if spec.num_keypoints == 0 {
            return Err(MdspError::Config("pose estimation needs at least one keypoint".into()));
        }
        b.set_owner(Owner::Pose);
        let p = spec.channels(CPM_BASE_CHANNELS);
        let q = spec.channels(BLOCK_LAYER_BASE_CHANNELS);
        let r = spec.channels(STAGE_HIDDEN_BASE_CHANNELS);
        let cpm = (0..3).map(|i| b.conv(&format!("pose.cpm.{i}"), if i == 0 { c3_channels } else { p }, p, 3, 1, true)).collect();
        let paf_ch = 2 * spec.num_limbs();
        let mut stages = Vec::with_capacity(PAF_STAGES + 1);
        for s in 0..PAF_STAGES {
            let cin = if s == 0 { p } else { paf_ch + p };
            stages.push(PoseStage::build(b, &format!("pose.paf{}", s + 1), cin, q, r, paf_ch));
        }
        stages.push(PoseStage::build(b, "pose.heatmap", paf_ch + p, q, r, spec.heatmap_channels()));
        Ok(Self { cpm, stages, cpm_channels: p })
    }

    pub fn stages(&self) -> &[PoseStage] {
        &self.stages
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, c3: Var) -> Result<PoseVars> {
        let mut f = c3;
        for conv in &self.cpm {
            f = conv.forward(cx, f)?;
            f = cx.tape.activation(f, Activation::Elu);
        }
        let mut pafs = Vec::with_capacity(PAF_STAGES);
        let mut prev: Option<Var> = None;
        for stage in &self.stages[..PAF_STAGES] {
            let x = match prev {
                None => f,
                Some(p) => cx.tape.concat_channels(&[p, f])?,
            };
            let out = stage.forward(cx, x)?;
            pafs.push(out);
            prev = Some(out);
        }
        let x = cx.tape.concat_channels(&[prev.expect("three PAF stages"), f])?;
        let heatmaps = self.stages[PAF_STAGES].forward(cx, x)?;
        Ok(PoseVars { pafs: [pafs[0], pafs[1], pafs[2]], heatmaps })
    }
}
