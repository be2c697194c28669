//! Seeded runs reproduce bit for bit.

use std::path::Path;

use mdsp::synth::{augment, generate_dataset, generate_scene, write_dataset, GenSpec};
use mdsp::train::{train, TrainConfig};
use mdsp::{Mdsp, NetworkSpec, TaskSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_training_runs_give_identical_checkpoints() {
    let data = generate_dataset(&GenSpec::new(64), 4).unwrap();
    let spec = NetworkSpec::new(64, 0.125);
    let cfg = TrainConfig { epochs: 3, batch_size: 2, lr_head: 0.01, lr_drop_to: 0.001, grad_clip: 15.0, tasks: TaskSet::ALL, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    for run in 0..2 {
        let mut m = Mdsp::<f32>::build(&spec, 11).unwrap();
        let logs = train(&mut m, &data, &cfg, |_| {}).unwrap();
        let path = dir.path().join(format!("{run}.ckpt"));
        m.save(&path).unwrap();
        ckpts.push((std::fs::read(&path).unwrap(), logs));
    }
    assert_eq!(ckpts[0].0, ckpts[1].0);
    assert_eq!(ckpts[0].1, ckpts[1].1);

    let mut other = Mdsp::<f32>::build(&spec, 11).unwrap();
    train(&mut other, &data, &TrainConfig { seed: 1, ..cfg }, |_| {}).unwrap();
    let path = dir.path().join("other.ckpt");
    other.save(&path).unwrap();
    assert_ne!(std::fs::read(&path).unwrap(), ckpts[0].0);
}

#[test]
fn synthetic_datasets_are_byte_reproducible() {
    let spec = GenSpec { seed: 42, ..GenSpec::new(64) };
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        write_dataset(&dir.path().join(run), &generate_dataset(&spec, 6).unwrap()).unwrap();
    }
    let (a, b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert!(a.len() >= 7);
    assert_eq!(a, b);

    write_dataset(&dir.path().join("c"), &generate_dataset(&GenSpec { seed: 43, ..spec }, 6).unwrap()).unwrap();
    assert_ne!(files(&dir.path().join("c")), a);
}

#[test]
fn augmentation_is_reproducible() {
    let s = generate_scene(&GenSpec::new(64), 3).unwrap();
    let a = augment(&s, &mut ChaCha8Rng::seed_from_u64(9));
    let b = augment(&s, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
}
