use crate::error::{MdspError, Result};
use crate::spec::{Task, TaskSet};

use super::{Element, Tensor};

/// Index of an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which part of the network an entry belongs to. Determines the learning
/// rate group and which tasks can update it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    /// Backbone layers up to and including the stride-8 tap (shared by all tasks).
    BackboneShallow,
    /// Backbone layers past the stride-8 tap (detection and segmentation only).
    BackboneDeep,
    /// Conv Sets and reduction layers of the detection path (shared with segmentation).
    DetectShared,
    /// Detection prediction layers.
    DetectPred,
    Segment,
    Pose,
}

impl Owner {
    pub fn name(self) -> &'static str {
        match self {
            Owner::BackboneShallow => "backbone_shallow",
            Owner::BackboneDeep => "backbone_deep",
            Owner::DetectShared => "detect_shared",
            Owner::DetectPred => "detect_pred",
            Owner::Segment => "segment",
            Owner::Pose => "pose",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "backbone_shallow" => Owner::BackboneShallow,
            "backbone_deep" => Owner::BackboneDeep,
            "detect_shared" => Owner::DetectShared,
            "detect_pred" => Owner::DetectPred,
            "segment" => Owner::Segment,
            "pose" => Owner::Pose,
            _ => return None,
        })
    }

    /// Tasks whose losses reach entries with this owner.
    pub fn users(self) -> TaskSet {
        match self {
            Owner::BackboneShallow => TaskSet::ALL,
            Owner::BackboneDeep | Owner::DetectShared => TaskSet::of(&[Task::Detect, Task::Segment]),
            Owner::DetectPred => TaskSet::of(&[Task::Detect]),
            Owner::Segment => TaskSet::of(&[Task::Segment]),
            Owner::Pose => TaskSet::of(&[Task::Pose]),
        }
    }

    pub fn is_backbone(self) -> bool {
        matches!(self, Owner::BackboneShallow | Owner::BackboneDeep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable parameter.
    Param,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl EntryKind {
    pub fn name(self) -> &'static str {
        match self {
            EntryKind::Param => "param",
            EntryKind::Buffer => "buffer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub kind: EntryKind,
    pub owner: Owner,
    pub tensor: Tensor<T>,
}

/// Ordered, named collection of parameters and buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: EntryKind, owner: Owner, mut tensor: Tensor<T>) -> ParamId {
        tensor.requires_grad = kind == EntryKind::Param;
        self.entries.push(Entry { name: name.into(), kind, owner, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(i, _)| ParamId(i))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Param).map(|e| e.tensor.numel()).sum()
    }

    pub fn num_params_where(&self, pred: impl Fn(Owner) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param && pred(e.owner))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.grad = None);
    }

    /// Overwrites values from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(MdspError::Mismatch(format!(
                "model has {} entries, checkpoint has {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(MdspError::Mismatch(format!(
                    "model entry {} {:?} vs checkpoint entry {} {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, owner: e.owner, tensor: e.tensor.cast() })
                .collect(),
        }
    }

    /// Entry-wise bit equality of values (gradients ignored).
    pub fn values_equal(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
