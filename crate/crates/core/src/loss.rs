//! Task losses and their weighted combination.

use crate::detect::{FIELD_BOX, FIELD_CLASS, FIELD_OBJ};
use crate::error::{MdspError, Result};
use crate::postprocess::LabelMap;
use crate::spec::{Task, TaskSet, ANCHORS_PER_SCALE};
use crate::synth::{CellTarget, DetectTargets, PoseTargets};
use crate::tensor::{Activation, Element, Tape, Tensor, Var};

pub const W_OBJ: f64 = 1.0;
pub const W_NOOBJ: f64 = 10.0;
pub const W_BOX: f64 = 10.0;
pub const W_CLASS: f64 = 1.0;
pub const DWA_TEMPERATURE: f64 = 2.0;

/// Index lists of one detection scale, gathered over the batch.
#[derive(Default)]
struct ScaleIndex<T> {
    obj: Vec<usize>,
    noobj: Vec<usize>,
    xy: Vec<usize>,
    xy_t: Vec<T>,
    wh: Vec<usize>,
    wh_t: Vec<T>,
    class: Vec<usize>,
    labels: Vec<usize>,
}

/// `1 * BCE(obj) + 10 * BCE(noobj) + 10 * MSE(box) + 1 * CE(class)`.
///
/// The objectness terms are averaged over their cells, the box term sums the
/// four squared coordinate errors `(sigmoid(tx), sigmoid(ty), tw, th)` and
/// averages over object cells, and the class term averages over object cells.
/// Ignored cells contribute nothing.
pub fn detection_loss<T: Element>(
    tape: &mut Tape<T>,
    raw: &[Var; 3],
    targets: &[DetectTargets],
    num_classes: usize,
) -> Result<Var> {
    let fields = 5 + num_classes;
    let mut per_scale: Vec<ScaleIndex<T>> = Vec::new();
    for (s, &v) in raw.iter().enumerate() {
        let sh = tape.shape(v).to_vec();
        if sh.len() != 4 || sh[0] != targets.len() || sh[1] != ANCHORS_PER_SCALE * fields || sh[2] != sh[3] {
            return Err(MdspError::Shape(format!(
                "detection_loss: scale {} output {:?} for batch {} with {} fields",
                s,
                sh,
                targets.len(),
                fields
            )));
        }
        let n = sh[2];
        let mut ix = ScaleIndex::default();
        for (b, t) in targets.iter().enumerate() {
            let st = t
                .scales
                .get(s)
                .filter(|st| st.grid == n)
                .ok_or_else(|| MdspError::Shape(format!("detection_loss: targets do not match grid {} at scale {}", n, s)))?;
            for a in 0..ANCHORS_PER_SCALE {
                for y in 0..n {
                    for x in 0..n {
                        let at = |f: usize| ((b * sh[1] + a * fields + f) * n + y) * n + x;
                        match st.cells[st.index(a, y, x)] {
                            CellTarget::NoObject => ix.noobj.push(at(FIELD_OBJ)),
                            CellTarget::Ignore => {}
                            CellTarget::Object { fx, fy, tw, th, class_id } => {
                                ix.obj.push(at(FIELD_OBJ));
                                ix.xy.extend([at(FIELD_BOX), at(FIELD_BOX + 1)]);
                                ix.xy_t.extend([T::from_f64(fx), T::from_f64(fy)]);
                                ix.wh.extend([at(FIELD_BOX + 2), at(FIELD_BOX + 3)]);
                                ix.wh_t.extend([T::from_f64(tw), T::from_f64(th)]);
                                ix.class.extend((0..num_classes).map(|c| at(FIELD_CLASS + c)));
                                ix.labels.push(class_id);
                            }
                        }
                    }
                }
            }
        }
        per_scale.push(ix);
    }
    let n_obj: usize = per_scale.iter().map(|ix| ix.obj.len()).sum();
    let n_noobj: usize = per_scale.iter().map(|ix| ix.noobj.len()).sum();
    let mut terms = Vec::new();
    for (ix, &v) in per_scale.into_iter().zip(raw.iter()) {
        if !ix.noobj.is_empty() {
            let k = ix.noobj.len();
            let g = tape.gather(v, ix.noobj)?;
            let l = tape.bce_with_logits(g, vec![T::zero(); k], n_noobj as f64)?;
            terms.push(tape.scale(l, T::from_f64(W_NOOBJ)));
        }
        if ix.obj.is_empty() {
            continue;
        }
        let k = ix.obj.len();
        let g = tape.gather(v, ix.obj)?;
        let l = tape.bce_with_logits(g, vec![T::one(); k], n_obj as f64)?;
        terms.push(tape.scale(l, T::from_f64(W_OBJ)));

        let g = tape.gather(v, ix.xy)?;
        let s = tape.activation(g, Activation::Sigmoid);
        let l_xy = tape.squared_error(s, ix.xy_t, n_obj as f64)?;
        let g = tape.gather(v, ix.wh)?;
        let l_wh = tape.squared_error(g, ix.wh_t, n_obj as f64)?;
        let l = tape.add(l_xy, l_wh)?;
        terms.push(tape.scale(l, T::from_f64(W_BOX)));

        let g = tape.gather_as(v, ix.class, vec![k, num_classes])?;
        let l = tape.cross_entropy(g, ix.labels, 1, n_obj as f64)?;
        terms.push(tape.scale(l, T::from_f64(W_CLASS)));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(&terms)
}

/// Mean per-pixel softmax cross entropy of `(B, C, H, W)` logits.
pub fn segmentation_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[&LabelMap]) -> Result<Var> {
    let sh = tape.shape(logits).to_vec();
    if sh.len() != 4 || sh[0] != labels.len() {
        return Err(MdspError::Shape(format!("segmentation_loss: logits {:?} for {} label maps", sh, labels.len())));
    }
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let mut flat = Vec::with_capacity(labels.len() * h * w);
    for m in labels {
        if m.width != w || m.height != h {
            return Err(MdspError::Shape(format!(
                "segmentation_loss: label map {}x{} for logits {}x{}",
                m.width, m.height, w, h
            )));
        }
        if let Some(&bad) = m.data.iter().find(|&&v| v as usize >= c) {
            return Err(MdspError::InvalidArgument(format!("label {} out of range for {} classes", bad, c)));
        }
        flat.extend(m.data.iter().map(|&v| v as usize));
    }
    let denom = flat.len() as f64;
    tape.cross_entropy(logits, flat, 1, denom)
}

fn stacked<T: Element>(parts: impl Iterator<Item = Vec<f64>>) -> Vec<T> {
    parts.flat_map(|p| p.into_iter().map(T::from_f64)).collect()
}

/// Sum over the PAF stages of their mean squared error, plus the heatmap
/// mean squared error.
pub fn pose_loss<T: Element>(tape: &mut Tape<T>, pafs: &[Var], heatmaps: Var, targets: &[PoseTargets]) -> Result<Var> {
    let paf_t: Vec<T> = stacked(targets.iter().map(|t| t.paf.clone()));
    let heat_t: Vec<T> = stacked(targets.iter().map(|t| t.heatmap.clone()));
    let mut terms = Vec::with_capacity(pafs.len() + 1);
    for &p in pafs {
        let n = tape.value(p).numel();
        terms.push(tape.squared_error(p, paf_t.clone(), n as f64)?);
    }
    let n = tape.value(heatmaps).numel();
    terms.push(tape.squared_error(heatmaps, heat_t, n as f64)?);
    tape.add_all(&terms)
}

/// Unweighted per-task losses of one step; masked tasks are absent.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PartialLosses {
    pub detect: Option<Var>,
    pub segment: Option<Var>,
    pub pose: Option<Var>,
}

impl PartialLosses {
    pub fn get(&self, task: Task) -> Option<Var> {
        match task {
            Task::Detect => self.detect,
            Task::Segment => self.segment,
            Task::Pose => self.pose,
        }
    }

    pub fn set(&mut self, task: Task, v: Var) {
        match task {
            Task::Detect => self.detect = Some(v),
            Task::Segment => self.segment = Some(v),
            Task::Pose => self.pose = Some(v),
        }
    }
}

/// `sum_k lambda_k * L_k` over the tasks in `mask`.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    partial: &PartialLosses,
    lambdas: &[(Task, f64)],
    mask: TaskSet,
) -> Result<Var> {
    if lambdas.len() != mask.len() || lambdas.iter().any(|(t, _)| !mask.contains(*t)) {
        return Err(MdspError::InvalidArgument(format!(
            "total_loss: weights for {:?} do not match the active tasks {}",
            lambdas.iter().map(|(t, _)| t.name()).collect::<Vec<_>>(),
            mask
        )));
    }
    let mut terms = Vec::new();
    for task in mask.tasks() {
        let l = partial
            .get(task)
            .ok_or_else(|| MdspError::InvalidArgument(format!("total_loss: no {} loss for an active task", task.name())))?;
        let lam = lambdas.iter().find(|(t, _)| *t == task).map(|(_, w)| *w).expect("checked above");
        terms.push(tape.scale(l, T::from_f64(lam)));
    }
    tape.add_all(&terms)
}

/// `K * softmax(r / T)` with `r_k = prev_k / prev2_k`. A ratio with a zero
/// or non-finite denominator is taken as 1. The result does not depend on the
/// order in which tasks are listed.
pub fn dwa_weights(prev: &[f64], prev2: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if prev.len() != prev2.len() || prev.is_empty() {
        return Err(MdspError::InvalidArgument(format!(
            "dwa_weights: histories of length {} and {}",
            prev.len(),
            prev2.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(MdspError::InvalidArgument(format!("dwa temperature must be positive, got {}", temperature)));
    }
    let r: Vec<f64> = prev
        .iter()
        .zip(prev2)
        .map(|(&a, &b)| {
            let r = a / b;
            if b > 0.0 && r.is_finite() {
                r
            } else {
                1.0
            }
        })
        .collect();
    let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|&v| ((v - mx) / temperature).exp()).collect();
    let mut sorted = e.clone();
    sorted.sort_by(f64::total_cmp);
    let z: f64 = sorted.iter().sum();
    let k = prev.len() as f64;
    Ok(e.iter().map(|&v| k * v / z).collect())
}

/// Per-epoch loss history driving the task weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DwaState {
    tasks: Vec<Task>,
    pub temperature: f64,
    history: Vec<Vec<f64>>,
}

impl DwaState {
    pub fn new(tasks: TaskSet, temperature: f64) -> Self {
        Self::with_order(tasks.tasks(), temperature)
    }

    /// Like [`DwaState::new`] with tasks kept in the given order.
    pub fn with_order(tasks: Vec<Task>, temperature: f64) -> Self {
        Self { tasks, temperature, history: Vec::new() }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn epochs_recorded(&self) -> usize {
        self.history.len()
    }

    /// Records one epoch of mean task losses, in task order.
    pub fn record(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.tasks.len() {
            return Err(MdspError::InvalidArgument(format!(
                "dwa: {} losses for {} tasks",
                losses.len(),
                self.tasks.len()
            )));
        }
        self.history.push(losses.to_vec());
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        Ok(())
    }

    /// Weights for the next epoch; all ones until two epochs are recorded.
    pub fn weights(&self) -> Result<Vec<(Task, f64)>> {
        let w = match self.history.as_slice() {
            [prev2, prev] => dwa_weights(prev, prev2, self.temperature)?,
            _ => vec![1.0; self.tasks.len()],
        };
        Ok(self.tasks.iter().copied().zip(w).collect())
    }
}
