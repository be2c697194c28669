//! Task masks: what trains, what stays fixed, and where gradients reach.

use mdsp::eval::{evaluate, EvalConfig};
use mdsp::postprocess::DecodeConfig;
use mdsp::synth::{generate_dataset, GenSpec, Sample};
use mdsp::tensor::{EntryKind, Owner, Tape};
use mdsp::train::{step_losses, train, TrainConfig};
use mdsp::{Mdsp, NetworkSpec, Task, TaskSet};

fn data() -> Vec<Sample> {
    generate_dataset(&GenSpec::new(64), 4).unwrap()
}

fn cfg(tasks: TaskSet, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, lr_head: 0.01, lr_drop_to: 0.001, tasks, augment: true, ..TrainConfig::default() }
}

#[test]
fn masked_tasks_leave_their_entries_untouched() {
    let spec = NetworkSpec::new(64, 0.125);
    let data = data();
    let init = Mdsp::<f32>::build(&spec, 5).unwrap();
    for tasks in TaskSet::nonempty_subsets() {
        let mut m = init.clone();
        train(&mut m, &data, &cfg(tasks, 2), |_| {}).unwrap();
        let (mut fixed, mut moved) = (0, 0);
        for (a, b) in init.store.entries().iter().zip(m.store.entries()) {
            let same = a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if a.owner.users().intersects(tasks) {
                moved += (!same && a.kind == EntryKind::Param) as usize;
            } else {
                assert!(same, "{}: {} changed while training {}", tasks, a.name, tasks);
                fixed += 1;
            }
        }
        assert!(moved > 0, "{}: nothing trained", tasks);
        if tasks != TaskSet::ALL {
            assert!(fixed > 0, "{}: no entry is exclusive to a masked task", tasks);
        }
    }
}

#[test]
fn every_task_subset_builds_trains_and_evaluates() {
    let data = data();
    for tasks in TaskSet::nonempty_subsets() {
        let spec = NetworkSpec::new(64, 0.125).with_tasks(tasks);
        let mut m = Mdsp::<f32>::build(&spec, 1).unwrap();
        let logs = train(&mut m, &data, &cfg(tasks, 1), |_| {}).unwrap();
        assert_eq!(logs.len(), 1);
        for t in Task::ALL {
            assert_eq!(logs[0].loss(t).is_some(), tasks.contains(t), "{}", tasks);
        }
        let report = evaluate(&m, &data, tasks, &DecodeConfig::default(), &EvalConfig::default()).unwrap();
        assert_eq!(report.detection.is_some(), tasks.contains(Task::Detect));
        assert_eq!(report.segmentation.is_some(), tasks.contains(Task::Segment));
        assert_eq!(report.pose.is_some(), tasks.contains(Task::Pose));
        let other = TaskSet::ALL.tasks().into_iter().find(|t| !tasks.contains(*t));
        if let Some(t) = other {
            assert!(train(&mut m, &data, &cfg(TaskSet::of(&[t]), 1), |_| {}).is_err());
        }
    }
}

fn grads_by_owner(m: &Mdsp<f64>, tasks: TaskSet, data: &[Sample]) -> Vec<(String, Owner, f64)> {
    let lambdas: Vec<(Task, f64)> = tasks.tasks().into_iter().map(|t| (t, 1.0)).collect();
    let mut tape = Tape::new();
    let s = step_losses(m, &mut tape, data, tasks, &lambdas).unwrap();
    let g = tape.backward(s.total).unwrap();
    m.store
        .param_ids()
        .map(|id| {
            let n = g.param(id).map_or(0.0, |v| v.iter().map(|x| x.abs()).sum());
            let e = m.store.entry(id);
            (e.name.clone(), e.owner, n)
        })
        .collect()
}

#[test]
fn pose_gradients_stop_at_the_stride_8_tap() {
    let spec = NetworkSpec::new(64, 0.125);
    let m = Mdsp::<f64>::build(&spec, 2).unwrap();
    let g = grads_by_owner(&m, TaskSet::of(&[Task::Pose]), &data()[..2]);
    for (name, owner, n) in &g {
        match owner {
            Owner::BackboneShallow | Owner::Pose => {}
            _ => assert_eq!(*n, 0.0, "{} received pose gradient", name),
        }
    }
    assert!(g.iter().filter(|e| e.1 == Owner::BackboneShallow).all(|e| e.2 > 0.0));
    assert!(g.iter().filter(|e| e.1 == Owner::Pose).all(|e| e.2 > 0.0));
}

#[test]
fn segmentation_alone_trains_the_conv_sets() {
    let spec = NetworkSpec::new(64, 0.125);
    let m = Mdsp::<f64>::build(&spec, 3).unwrap();
    let g = grads_by_owner(&m, TaskSet::of(&[Task::Segment]), &data()[..2]);
    let shared: Vec<_> = g.iter().filter(|e| e.1 == Owner::DetectShared).collect();
    assert!(!shared.is_empty());
    let sets: Vec<_> = shared.iter().filter(|e| e.0.contains("convset")).collect();
    assert!(sets.len() >= 15 && sets.iter().all(|e| e.2 > 0.0), "{:?}", sets);
    assert!(g.iter().filter(|e| e.1 == Owner::DetectPred || e.1 == Owner::Pose).all(|e| e.2 == 0.0));
    assert!(g.iter().filter(|e| e.1.is_backbone()).all(|e| e.2 > 0.0));
}

/// Dropping one stage from the pose loss changes the gradient of that stage.
#[test]
fn every_paf_stage_is_supervised() {
    use mdsp::loss::pose_loss;
    use mdsp::synth::encode_pose_targets;
    let spec = NetworkSpec::new(64, 0.125).with_tasks(TaskSet::of(&[Task::Pose]));
    let m = Mdsp::<f64>::build(&spec, 4).unwrap();
    let data = data();
    let targets: Vec<_> = data[..2].iter().map(|s| encode_pose_targets(&s.ann, &spec)).collect();
    let images: Vec<_> = data[..2].iter().map(|s| s.image.cast()).collect();
    let run = |drop: Option<usize>| {
        let mut tape = Tape::new();
        let x = tape.constant(mdsp::Tensor::stack(&images).unwrap());
        let fv = m.forward(&mut tape, x, spec.task_mask, true).unwrap();
        let p = fv.pose.unwrap();
        let pafs: Vec<_> = (0..3).filter(|&i| Some(i) != drop).map(|i| p.pafs[i]).collect();
        let l = pose_loss(&mut tape, &pafs, p.heatmaps, &targets).unwrap();
        let g = tape.backward(l).unwrap();
        m.store.param_ids().map(|id| (m.store.entry(id).name.clone(), g.param(id).map(|v| v.to_vec()))).collect::<Vec<_>>()
    };
    let full = run(None);
    for stage in 0..3 {
        let prefix = format!("pose.paf{}", stage + 1);
        let dropped = run(Some(stage));
        let differs = full.iter().zip(&dropped).any(|(a, b)| a.0.starts_with(&prefix) && a.1 != b.1);
        assert!(differs, "stage {} is not in the loss", stage + 1);
    }
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let spec = NetworkSpec::new(64, 0.125);
    let init = Mdsp::<f32>::build(&spec, 6).unwrap();
    let mut m = init.clone();
    let logs = train(&mut m, &data(), &cfg(TaskSet::ALL, 0), |_| {}).unwrap();
    assert!(logs.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    init.save(&a).unwrap();
    m.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
