//! Minibatch SGD training of the multitask network.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdspError, Result};
use crate::loss::{detection_loss, pose_loss, segmentation_loss, total_loss, DwaState, PartialLosses, DWA_TEMPERATURE};
use crate::model::Mdsp;
use crate::nn::{apply_bn_updates, BN_MOMENTUM};
use crate::spec::{Task, TaskSet};
use crate::synth::{augment, encode_detect_targets, encode_pose_targets, Sample};
use crate::tensor::{clip_grad_norm, Element, Owner, Sgd, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Head learning rate for the first half of training.
    pub lr_head: f64,
    /// Head learning rate from epoch `epochs / 2` on.
    pub lr_drop_to: f64,
    /// Backbone learning rate as a fraction of the head rate.
    pub backbone_lr_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Tasks that receive a loss. Must be built in the model.
    pub tasks: TaskSet,
    pub seed: u64,
    pub augment: bool,
    pub shuffle: bool,
    pub dwa_temperature: f64,
    pub head_lr_scale: HeadLrScale,
    /// Global gradient L2 norm cap per step; 0 disables clipping.
    pub grad_clip: f64,
}

/// Multipliers on the head learning rate per head. The detection factor
/// also covers the Conv Sets shared with segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadLrScale {
    pub detect: f64,
    pub segment: f64,
    pub pose: f64,
}

impl Default for HeadLrScale {
    fn default() -> Self {
        Self { detect: 1.0, segment: 1.0, pose: 1.0 }
    }
}

impl HeadLrScale {
    pub fn for_owner(&self, owner: Owner) -> f64 {
        match owner {
            Owner::BackboneShallow | Owner::BackboneDeep => 1.0,
            Owner::DetectShared | Owner::DetectPred => self.detect,
            Owner::Segment => self.segment,
            Owner::Pose => self.pose,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr_head: 1e-4,
            lr_drop_to: 1e-5,
            backbone_lr_ratio: 0.1,
            momentum: 0.9,
            weight_decay: 5e-5,
            tasks: TaskSet::ALL,
            seed: 0,
            augment: true,
            shuffle: true,
            dwa_temperature: DWA_TEMPERATURE,
            head_lr_scale: HeadLrScale::default(),
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MdspError::Config(m));
        if !(self.lr_head > self.lr_drop_to && self.lr_drop_to > 0.0) {
            return bad(format!("need lr_head > lr_drop_to > 0, got {} and {}", self.lr_head, self.lr_drop_to));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.backbone_lr_ratio >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("backbone_lr_ratio, momentum and weight_decay must be in range".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task must be trained".into());
        }
        if !(self.dwa_temperature > 0.0) {
            return bad(format!("dwa_temperature must be positive, got {}", self.dwa_temperature));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        let h = self.head_lr_scale;
        if ![h.detect, h.segment, h.pose].iter().all(|v| *v > 0.0 && v.is_finite()) {
            return bad(format!("head_lr_scale entries must be positive, got {:?}", h));
        }
        Ok(())
    }

    /// Learning rate of an entry owned by `owner` during `epoch`; zero when
    /// none of the trained tasks reaches it.
    pub fn lr_for(&self, owner: Owner, epoch: usize) -> f64 {
        if !owner.users().intersects(self.tasks) {
            0.0
        } else if owner.is_backbone() {
            self.head_lr(epoch) * self.backbone_lr_ratio
        } else {
            self.head_lr(epoch) * self.head_lr_scale.for_owner(owner)
        }
    }

    /// Head learning rate used during `epoch` (0-based).
    pub fn head_lr(&self, epoch: usize) -> f64 {
        if epoch < self.epochs / 2 {
            self.lr_head
        } else {
            self.lr_drop_to
        }
    }
}

/// Per-task values in canonical task order.
pub type TaskValues = [Option<f64>; 3];

fn slot(t: Task) -> usize {
    match t {
        Task::Detect => 0,
        Task::Segment => 1,
        Task::Pose => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean unweighted task losses over the epoch's steps.
    pub losses: TaskValues,
    pub lambdas: TaskValues,
    /// Mean weighted total loss.
    pub total: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn loss(&self, t: Task) -> Option<f64> {
        self.losses[slot(t)]
    }

    pub fn lambda(&self, t: Task) -> Option<f64> {
        self.lambdas[slot(t)]
    }
}

pub const LOG_HEADER: &str = "epoch,l_dct,l_seg,l_pose,lam_dct,lam_seg,lam_pose,total";

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{}\n", LOG_HEADER);
    let cell = |v: Option<f64>| v.map(|x| format!("{:.6e}", x)).unwrap_or_default();
    for l in logs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6e}",
            l.epoch,
            cell(l.losses[0]),
            cell(l.losses[1]),
            cell(l.losses[2]),
            cell(l.lambdas[0]),
            cell(l.lambdas[1]),
            cell(l.lambdas[2]),
            l.total
        );
    }
    s
}

pub fn write_log_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    std::fs::write(path, log_csv(logs))?;
    Ok(())
}

/// Tape-level losses of one minibatch.
pub struct StepLosses {
    pub partial: PartialLosses,
    pub total: crate::tensor::Var,
}

/// Records the forward pass and losses of `batch` for `tasks`.
pub fn step_losses<T: Element>(
    model: &Mdsp<T>,
    tape: &mut Tape<T>,
    batch: &[Sample],
    tasks: TaskSet,
    lambdas: &[(Task, f64)],
) -> Result<StepLosses> {
    let spec = &model.spec;
    let images: Vec<Tensor<T>> = batch.iter().map(|s| s.image.cast()).collect();
    let x = tape.constant(Tensor::stack(&images)?);
    let fv = model.forward(tape, x, tasks, true)?;
    let mut partial = PartialLosses::default();
    if let Some(raw) = fv.detect.filter(|_| tasks.contains(Task::Detect)) {
        let targets = batch.iter().map(|s| encode_detect_targets(&s.ann, spec)).collect::<Result<Vec<_>>>()?;
        partial.set(Task::Detect, detection_loss(tape, &raw, &targets, spec.num_det_classes)?);
    }
    if let Some(logits) = fv.seg.filter(|_| tasks.contains(Task::Segment)) {
        let labels: Vec<_> = batch.iter().map(|s| &s.ann.label_map).collect();
        partial.set(Task::Segment, segmentation_loss(tape, logits, &labels)?);
    }
    if let Some(p) = fv.pose.as_ref().filter(|_| tasks.contains(Task::Pose)) {
        let targets: Vec<_> = batch.iter().map(|s| encode_pose_targets(&s.ann, spec)).collect();
        partial.set(Task::Pose, pose_loss(tape, &p.pafs, p.heatmaps, &targets)?);
    }
    let total = total_loss(tape, &partial, lambdas, tasks)?;
    Ok(StepLosses { partial, total })
}

/// Trains `model` in place and returns one log entry per epoch. `on_epoch`
/// is called after every epoch.
pub fn train<T: Element>(
    model: &mut Mdsp<T>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MdspError::InvalidArgument("training set is empty".into()));
    }
    if !cfg.tasks.is_subset_of(model.tasks()) {
        return Err(MdspError::InvalidArgument(format!(
            "cannot train {} on a network built for {}",
            cfg.tasks,
            model.tasks()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::<T>::new(cfg.momentum, cfg.weight_decay);
    let mut dwa = DwaState::new(cfg.tasks, cfg.dwa_temperature);
    let active = cfg.tasks.tasks();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.head_lr(epoch);
        let lambdas = dwa.weights()?;
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sums = vec![0.0; active.len()];
        let mut total_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| if cfg.augment { augment(&data[i], &mut rng) } else { data[i].clone() })
                .collect();
            let mut tape = Tape::new();
            let step = step_losses(model, &mut tape, &batch, cfg.tasks, &lambdas)?;
            let total = tape.value(step.total).item()?.as_f64();
            if !total.is_finite() {
                return Err(MdspError::Diverged(format!("non-finite loss at epoch {} step {}", epoch + 1, steps + 1)));
            }
            for (k, &t) in active.iter().enumerate() {
                let v = step.partial.get(t).expect("active task has a loss");
                sums[k] += tape.value(v).item()?.as_f64();
            }
            total_sum += total;
            steps += 1;

            tape.backward_into(step.total, &mut model.store)?;
            let updates = tape.take_bn_updates();
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut model.store, cfg.grad_clip);
            }
            sgd.step(&mut model.store, |e| cfg.lr_for(e.owner, epoch));
            apply_bn_updates(&mut model.store, &updates, BN_MOMENTUM);
            model.store.zero_grad();
        }
        let means: Vec<f64> = sums.iter().map(|s| s / steps as f64).collect();
        dwa.record(&means)?;
        let mut log = EpochLog { epoch: epoch + 1, losses: [None; 3], lambdas: [None; 3], total: total_sum / steps as f64, lr };
        for (k, &t) in active.iter().enumerate() {
            log.losses[slot(t)] = Some(means[k]);
            log.lambdas[slot(t)] = lambdas.iter().find(|(u, _)| *u == t).map(|(_, w)| *w);
        }
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_at_half() {
        let cfg = TrainConfig { epochs: 4, ..Default::default() };
        assert_eq!(cfg.head_lr(1), 1e-4);
        assert_eq!(cfg.head_lr(2), 1e-5);
    }

    #[test]
    fn rejects_bad_rates() {
        let cfg = TrainConfig { lr_head: 1e-5, lr_drop_to: 1e-4, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { tasks: TaskSet::EMPTY, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_leaves_masked_columns_empty() {
        let log = EpochLog { epoch: 1, losses: [Some(1.0), None, None], lambdas: [Some(1.0), None, None], total: 1.0, lr: 1e-4 };
        let csv = log_csv(&[log]);
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(line.split(',').count(), 8);
        assert!(line.contains(",,"));
    }
}
