//! The full multitask network: shared backbone plus detection, segmentation
//! and pose heads, built according to the spec's task mask.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::backbone::{Backbone, FeaturePyramid};
use crate::detect::{DetectHead, RawDetectOutput};
use crate::error::{MdspError, Result};
use crate::nn::{Builder, Ctx};
use crate::pose::{PoseHead, PoseRawOutput, PoseVars};
use crate::seg::SegHead;
use crate::spec::{NetworkSpec, Task, TaskSet};
use crate::tensor::io::{read_store, write_store};
use crate::tensor::{Element, Owner, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Mdsp<T = f32> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub detect: Option<DetectHead>,
    pub seg: Option<SegHead>,
    pub pose: Option<PoseHead>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub pyramid: FeaturePyramid,
    pub detect: Option<[Var; 3]>,
    pub convset_taps: Option<[Var; 3]>,
    pub seg: Option<Var>,
    pub pose: Option<PoseVars>,
}

/// Materialized network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput<T = f32> {
    pub detect: Option<RawDetectOutput<T>>,
    pub seg_logits: Option<Tensor<T>>,
    pub pose: Option<PoseRawOutput<T>>,
}

impl<T: Element> NetworkOutput<T> {
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        Ok(Self {
            detect: self.detect.as_ref().map(|d| d.batch_item(b)).transpose()?,
            seg_logits: self.seg_logits.as_ref().map(|t| t.batch_item(b)).transpose()?,
            pose: self.pose.as_ref().map(|p| p.batch_item(b)).transpose()?,
        })
    }
}

impl ForwardVars {
    pub fn collect<T: Element>(&self, tape: &Tape<T>, num_det_classes: usize) -> NetworkOutput<T> {
        NetworkOutput {
            detect: self.detect.map(|d| RawDetectOutput {
                scales: d.iter().map(|&v| tape.value(v).clone()).collect(),
                num_classes: num_det_classes,
            }),
            seg_logits: self.seg.map(|v| tape.value(v).clone()),
            pose: self.pose.as_ref().map(|p| PoseRawOutput {
                pafs: p.pafs.iter().map(|&v| tape.value(v).clone()).collect(),
                heatmaps: tape.value(p.heatmaps).clone(),
            }),
        }
    }
}

const CHECKPOINT_FORMAT: &str = "mdsp-checkpoint-1";

impl<T: Element> Mdsp<T> {
    /// Builds the network with deterministic initialization from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed, Owner::BackboneShallow);
        let backbone = Backbone::build(spec, &mut b)?;
        let taps = backbone.channels();
        let mask = spec.task_mask;
        let detect = (mask.contains(Task::Detect) || mask.contains(Task::Segment)).then(|| DetectHead::build(spec, taps, &mut b));
        let seg = if mask.contains(Task::Segment) {
            let d = detect.as_ref().expect("conv sets exist when segmenting");
            Some(SegHead::build(spec, d.channels.set_out, taps[0], &mut b)?)
        } else {
            None
        };
        let pose = if mask.contains(Task::Pose) { Some(PoseHead::build(spec, taps[1], &mut b)?) } else { None };
        if let Some(d) = &detect {
            d.init_objectness_bias(&mut store, 5 + spec.num_det_classes);
        }
        Ok(Self { spec: spec.clone(), store, backbone, detect, seg, pose })
    }

    pub fn tasks(&self) -> TaskSet {
        self.spec.task_mask
    }

    /// Records a forward pass for `tasks` (a subset of the built tasks).
    /// Heads outside `tasks` are not evaluated.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var, tasks: TaskSet, train: bool) -> Result<ForwardVars> {
        if !tasks.is_subset_of(self.spec.task_mask) {
            return Err(MdspError::InvalidArgument(format!(
                "tasks {} not built (network has {})",
                tasks, self.spec.task_mask
            )));
        }
        let mut cx = Ctx::new(tape, &self.store, train);
        let deep = tasks.contains(Task::Detect) || tasks.contains(Task::Segment);
        let pyramid = self.backbone.forward(&mut cx, image, deep)?;
        let dv = if deep {
            let head = self.detect.as_ref().expect("detection path built");
            Some(head.forward(&mut cx, &pyramid, tasks.contains(Task::Detect))?)
        } else {
            None
        };
        let seg = if tasks.contains(Task::Segment) {
            let taps = dv.as_ref().expect("conv sets evaluated").taps;
            Some(self.seg.as_ref().expect("seg head built").forward(&mut cx, taps, pyramid.c_early)?)
        } else {
            None
        };
        let pose = if tasks.contains(Task::Pose) {
            Some(self.pose.as_ref().expect("pose head built").forward(&mut cx, pyramid.c3)?)
        } else {
            None
        };
        Ok(ForwardVars {
            pyramid,
            detect: dv.as_ref().and_then(|d| d.raw),
            convset_taps: dv.map(|d| d.taps),
            seg,
            pose,
        })
    }

    /// Eval-mode forward of all built tasks without gradient tracking.
    pub fn infer(&self, images: &Tensor<T>) -> Result<NetworkOutput<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let vars = self.forward(&mut tape, x, self.spec.task_mask, false)?;
        Ok(vars.collect(&tape, self.spec.num_det_classes))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn cast<U: Element>(&self) -> Mdsp<U> {
        Mdsp {
            spec: self.spec.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            detect: self.detect.clone(),
            seg: self.seg.clone(),
            pose: self.pose.clone(),
        }
    }

    /// Writes the checkpoint container (values stored as `f32`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        let meta = vec![
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("spec".to_string(), serde_json::to_string(&self.spec)?),
        ];
        write_store(&mut f, &self.store.cast::<f32>(), &meta)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let (stored, meta) = read_store::<T, _>(&mut r)?;
        let get = |k: &str| meta.iter().find(|(mk, _)| mk == k).map(|(_, v)| v.as_str());
        if get("format") != Some(CHECKPOINT_FORMAT) {
            return Err(MdspError::Format(format!("{} is not an mdsp checkpoint", path.display())));
        }
        let spec: NetworkSpec = serde_json::from_str(
            get("spec").ok_or_else(|| MdspError::Format("checkpoint has no spec header".into()))?,
        )?;
        let mut model = Self::build(&spec, 0)?;
        model.store.load_from(&stored)?;
        Ok(model)
    }

    /// Loads a checkpoint and checks it against an expected spec.
    pub fn load_expecting(path: &Path, expected: &NetworkSpec) -> Result<Self> {
        let model = Self::load(path)?;
        let mut a = model.spec.clone();
        let mut b = expected.clone();
        // Anchors are data-derived and travel with the checkpoint.
        a.anchors.clear();
        b.anchors.clear();
        if a != b {
            let expected_model = Self::build(expected, 0)?;
            let theirs = expected_model.store.entries();
            let ours = model.store.entries();
            let shape_diff = ours
                .iter()
                .zip(theirs.iter())
                .find(|(x, y)| x.name != y.name || x.tensor.shape() != y.tensor.shape())
                .map(|(x, y)| format!("; first differing entry: {} {:?} in checkpoint, {} {:?} configured", x.name, x.tensor.shape(), y.name, y.tensor.shape()))
                .or_else(|| (ours.len() != theirs.len()).then(|| format!("; {} entries in checkpoint, {} configured", ours.len(), theirs.len())))
                .unwrap_or_default();
            return Err(MdspError::Mismatch(format!(
                "checkpoint spec (input {}, width {}, tasks {}, classes {}/{}, keypoints {}) vs configured spec (input {}, width {}, tasks {}, classes {}/{}, keypoints {}){}",
                a.input_size, a.width_mult, a.task_mask, a.num_det_classes, a.num_seg_classes, a.num_keypoints,
                b.input_size, b.width_mult, b.task_mask, b.num_det_classes, b.num_seg_classes, b.num_keypoints, shape_diff
            )));
        }
        Ok(model)
    }
}

/// Exact number of trainable scalars of the network built for `tasks`.
pub fn param_count(spec: &NetworkSpec, tasks: TaskSet) -> Result<usize> {
    let spec = spec.clone().with_tasks(tasks);
    Ok(Mdsp::<f32>::build(&spec, 0)?.num_params())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatch_names_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec = NetworkSpec::new(64, 0.125);
        Mdsp::<f32>::build(&spec, 0).unwrap().save(&path).unwrap();
        assert!(Mdsp::<f32>::load_expecting(&path, &spec).is_ok());
        let msg = Mdsp::<f32>::load_expecting(&path, &NetworkSpec::new(64, 0.25)).unwrap_err().to_string();
        assert!(msg.contains("width 0.125") && msg.contains("width 0.25"), "{}", msg);
        assert!(msg.contains("[4, 3, 3, 3]") && msg.contains("[8, 3, 3, 3]"), "{}", msg);
    }
}
