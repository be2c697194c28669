//! Structural hyperparameters of the network and task selection.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MdspError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Segment,
    Pose,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Detect, Task::Segment, Task::Pose];

    fn bit(self) -> u8 {
        match self {
            Task::Detect => 1,
            Task::Segment => 2,
            Task::Pose => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Detect => "detect",
            Task::Segment => "segment",
            Task::Pose => "pose",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "detect" | "det" | "dct" => Ok(Task::Detect),
            "segment" | "seg" => Ok(Task::Segment),
            "pose" => Ok(Task::Pose),
            other => Err(MdspError::Config(format!("unknown task {:?} (expected detect, segment, pose)", other))),
        }
    }
}

/// A subset of {detect, segment, pose}.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TaskSet(u8);

impl TaskSet {
    pub const EMPTY: TaskSet = TaskSet(0);
    pub const ALL: TaskSet = TaskSet(7);

    pub fn of(tasks: &[Task]) -> Self {
        TaskSet(tasks.iter().fold(0, |acc, t| acc | t.bit()))
    }

    pub fn contains(self, t: Task) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn with(self, t: Task) -> Self {
        TaskSet(self.0 | t.bit())
    }

    pub fn without(self, t: Task) -> Self {
        TaskSet(self.0 & !t.bit())
    }

    pub fn intersects(self, other: TaskSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_subset_of(self, other: TaskSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Active tasks in canonical order (detect, segment, pose).
    pub fn tasks(self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|t| self.contains(*t)).collect()
    }

    /// All seven nonempty subsets.
    pub fn nonempty_subsets() -> Vec<TaskSet> {
        (1..8u8).map(TaskSet).collect()
    }

    /// Parses a comma separated list such as `detect,segment`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = TaskSet::EMPTY;
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            set = set.with(Task::parse(part)?);
        }
        Ok(set)
    }
}

impl fmt::Debug for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskSet({})", self)
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.tasks().iter().map(|t| t.name()).collect();
        write!(f, "{}", names.join(","))
    }
}

impl Serialize for TaskSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tasks().serialize(s)
    }
}

impl<'de> Deserialize<'de> for TaskSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tasks = Vec::<Task>::deserialize(d)?;
        Ok(TaskSet::of(&tasks))
    }
}

/// Anchor prior `(w, h)` in input pixels.
pub type Anchor = (f64, f64);

/// Number of anchors per detection scale.
pub const ANCHORS_PER_SCALE: usize = 3;

/// Detection strides, coarse to fine.
pub const DETECT_STRIDES: [usize; 3] = [32, 16, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub width_mult: f64,
    pub num_det_classes: usize,
    pub num_seg_classes: usize,
    pub num_keypoints: usize,
    pub limb_defs: Vec<(usize, usize)>,
    /// Nine anchors sorted ascending by area: 0..3 on stride 8, 3..6 on
    /// stride 16, 6..9 on stride 32.
    pub anchors: Vec<Anchor>,
    pub input_size: usize,
    pub task_mask: TaskSet,
    /// Residual blocks per backbone stage.
    #[serde(default = "default_depth")]
    pub backbone_depth: usize,
    /// Predict an extra background heatmap channel.
    #[serde(default = "default_true")]
    pub heatmap_background: bool,
}

fn default_depth() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// The 7-keypoint seated-person schema used by the synthetic data:
/// head, left/right shoulder, left/right hip, left/right knee.
pub const DEFAULT_KEYPOINTS: [&str; 7] = ["head", "l_shoulder", "r_shoulder", "l_hip", "r_hip", "l_knee", "r_knee"];

pub const DEFAULT_LIMBS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6)];

/// Left/right keypoint pairs swapped by a horizontal mirror.
pub const DEFAULT_FLIP_PAIRS: [(usize, usize); 3] = [(1, 2), (3, 4), (5, 6)];

/// YOLOv3 COCO anchors at 416 input, used as scaled defaults.
const BASE_ANCHORS_416: [Anchor; 9] = [
    (10.0, 13.0),
    (16.0, 30.0),
    (33.0, 23.0),
    (30.0, 61.0),
    (62.0, 45.0),
    (59.0, 119.0),
    (116.0, 90.0),
    (156.0, 198.0),
    (373.0, 326.0),
];

impl NetworkSpec {
    /// Defaults for the synthetic occupancy scenes: 4 detection classes,
    /// 5 segmentation classes (including Empty), the 7-keypoint schema.
    pub fn new(input_size: usize, width_mult: f64) -> Self {
        Self {
            width_mult,
            num_det_classes: 4,
            num_seg_classes: 5,
            num_keypoints: DEFAULT_KEYPOINTS.len(),
            limb_defs: DEFAULT_LIMBS.to_vec(),
            anchors: Self::default_anchors(input_size),
            input_size,
            task_mask: TaskSet::ALL,
            backbone_depth: 1,
            heatmap_background: true,
        }
    }

    pub fn with_tasks(mut self, tasks: TaskSet) -> Self {
        self.task_mask = tasks;
        self
    }

    pub fn default_anchors(input_size: usize) -> Vec<Anchor> {
        let s = input_size as f64 / 416.0;
        BASE_ANCHORS_416.iter().map(|&(w, h)| (w * s, h * s)).collect()
    }

    /// `max(1, round(base * width_mult))`.
    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(1)
    }

    pub fn num_limbs(&self) -> usize {
        self.limb_defs.len()
    }

    /// Depth of each raw detection tensor: `B * (1 + 4 + C)`.
    pub fn detect_depth(&self) -> usize {
        ANCHORS_PER_SCALE * (5 + self.num_det_classes)
    }

    pub fn heatmap_channels(&self) -> usize {
        self.num_keypoints + usize::from(self.heatmap_background)
    }

    /// Anchors of a detection scale, indexed coarse to fine (0 = stride 32).
    pub fn scale_anchors(&self, scale: usize) -> &[Anchor] {
        let group = 2 - scale;
        &self.anchors[group * ANCHORS_PER_SCALE..(group + 1) * ANCHORS_PER_SCALE]
    }

    /// Global anchor index (0..9, by area) to `(scale, slot)`, scale coarse to fine.
    pub fn anchor_location(anchor: usize) -> (usize, usize) {
        (2 - anchor / ANCHORS_PER_SCALE, anchor % ANCHORS_PER_SCALE)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult <= 1.0) {
            return Err(MdspError::Config(format!("width_mult {} not in (0, 1]", self.width_mult)));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(MdspError::Config(format!("input_size {} is not a positive multiple of 32", self.input_size)));
        }
        if self.backbone_depth == 0 {
            return Err(MdspError::Config("backbone_depth must be at least 1".into()));
        }
        if self.anchors.len() != 3 * ANCHORS_PER_SCALE {
            return Err(MdspError::Config(format!("expected 9 anchors, got {}", self.anchors.len())));
        }
        if self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(MdspError::Config("anchor extents must be positive".into()));
        }
        if self.anchors.windows(2).any(|p| p[0].0 * p[0].1 > p[1].0 * p[1].1) {
            return Err(MdspError::Config("anchors must be sorted ascending by area".into()));
        }
        if self.task_mask.contains(Task::Detect) && self.num_det_classes == 0 {
            return Err(MdspError::Config("detection needs at least one class".into()));
        }
        if self.task_mask.contains(Task::Segment) && self.num_seg_classes < 2 {
            return Err(MdspError::Config(format!(
                "segmentation needs at least 2 classes, got {}",
                self.num_seg_classes
            )));
        }
        if self.task_mask.contains(Task::Pose) {
            if self.num_keypoints == 0 {
                return Err(MdspError::Config("pose estimation needs at least one keypoint".into()));
            }
            if self.limb_defs.is_empty() {
                return Err(MdspError::Config("pose estimation needs at least one limb".into()));
            }
        }
        if let Some(&(a, b)) = self.limb_defs.iter().find(|&&(a, b)| a >= self.num_keypoints || b >= self.num_keypoints || a == b) {
            return Err(MdspError::Config(format!(
                "limb ({}, {}) invalid for {} keypoints",
                a, b, self.num_keypoints
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taskset_parse_and_display() {
        let t = TaskSet::parse("detect,pose").unwrap();
        assert!(t.contains(Task::Detect) && t.contains(Task::Pose) && !t.contains(Task::Segment));
        assert_eq!(t.to_string(), "detect,pose");
        assert_eq!(TaskSet::nonempty_subsets().len(), 7);
        assert!(TaskSet::parse("detect,jump").is_err());
    }

    #[test]
    fn default_spec_is_valid() {
        let s = NetworkSpec::new(64, 0.125);
        s.validate().unwrap();
        assert_eq!(s.detect_depth(), 27);
        assert_eq!(s.scale_anchors(0), &s.anchors[6..9]);
        assert_eq!(NetworkSpec::anchor_location(5), (1, 2));
    }

    #[test]
    fn rejects_bad_input_size_and_anchors() {
        let mut s = NetworkSpec::new(64, 0.125);
        s.input_size = 70;
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::new(64, 0.125);
        s.anchors.swap(0, 8);
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::new(64, 0.125);
        s.limb_defs.push((0, 7));
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let s = NetworkSpec::new(416, 1.0).with_tasks(TaskSet::parse("segment").unwrap());
        let j = serde_json::to_string(&s).unwrap();
        let back: NetworkSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
    }
}
