//! Run configuration: TOML sections merged with `--set` overrides.

use std::path::Path;

use mdsp::eval::EvalConfig;
use mdsp::postprocess::DecodeConfig;
use mdsp::synth::GenSpec;
use mdsp::train::TrainConfig;
use mdsp::{NetworkSpec, TaskSet};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

pub const RESOLVED_NAME: &str = "resolved-config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub width_mult: f64,
    pub backbone_depth: usize,
    /// Initialization seed.
    pub seed: u64,
    /// Nine `[w, h]` anchors in input pixels, ascending by area. Empty means
    /// the scaled defaults.
    pub anchors: Vec<(f64, f64)>,
    /// Replace the anchors with k-means clusters of the training boxes.
    pub kmeans_anchors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_size: 64, width_mult: 0.125, backbone_depth: 1, seed: 0, anchors: Vec::new(), kmeans_anchors: false }
    }
}

impl ModelConfig {
    pub fn spec(&self, tasks: TaskSet) -> NetworkSpec {
        let mut spec = NetworkSpec::new(self.input_size, self.width_mult).with_tasks(tasks);
        spec.backbone_depth = self.backbone_depth;
        if !self.anchors.is_empty() {
            spec.anchors = self.anchors.clone();
        }
        spec
    }

    /// Takes the structural fields over from a loaded network.
    pub fn adopt(&mut self, spec: &NetworkSpec) {
        self.input_size = spec.input_size;
        self.width_mult = spec.width_mult;
        self.backbone_depth = spec.backbone_depth;
        self.anchors = spec.anchors.clone();
        self.kmeans_anchors = false;
    }
}

/// Scene generator settings; the image size is `model.input_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub slots: (usize, usize),
    pub counts: [(usize, usize); 4],
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenSpec::default();
        Self { slots: g.slots, counts: g.counts, noise: g.noise, seed: g.seed }
    }
}

impl DataConfig {
    pub fn gen_spec(&self, image_size: usize) -> GenSpec {
        GenSpec { image_size, slots: self.slots, counts: self.counts, noise: self.noise, seed: self.seed }
    }
}

/// A merged configuration and whether it set anything under `[model]`.
pub struct Loaded {
    pub config: RunConfig,
    pub model_given: bool,
}

pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Loaded> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {}", p.display(), e)))?
        }
        None => Table::new(),
    };
    for s in sets {
        apply_set(&mut root, s)?;
    }
    let model_given = root.get("model").and_then(Value::as_table).is_some_and(|t| !t.is_empty());
    let config: RunConfig = Value::Table(root).try_into().map_err(|e: toml::de::Error| {
        let origin = path.map(|p| p.display().to_string()).unwrap_or_else(|| "--set".into());
        CliError::Config(format!("{}: {}", origin, e.message()))
    })?;
    Ok(Loaded { config, model_given })
}

/// Applies `section.key=value`. The value is read as a TOML value and falls
/// back to a plain string.
pub fn apply_set(root: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {:?}", assignment)))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("--set: bad key {:?}", key)));
    }
    let raw = raw.trim();
    let value = format!("v = {}", raw).parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.into()));
    let (last, sections) = parts.split_last().unwrap();
    let mut table = root;
    for part in sections {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {}: {} is not a section", key, part)))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot serialize config: {}", e)))
}

/// Writes the resolved configuration into `dir`.
pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(RESOLVED_NAME);
    std::fs::write(&path, to_toml(cfg)?).map_err(CliError::io(path))
}

pub fn parse_tasks(s: &str) -> Result<TaskSet> {
    let tasks = TaskSet::parse(s)?;
    if tasks.is_empty() {
        return Err(CliError::Usage("--tasks needs at least one of detect, segment, pose".into()));
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loaded(text: &str, sets: &[&str]) -> Result<Loaded> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        load(Some(&p), &sets.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = to_toml(&cfg).unwrap().parse::<Table>().unwrap().try_into().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_over_the_file() {
        let l = loaded("[train]\nepochs = 3\nlr_head = 0.01\n", &["train.epochs=7", "model.width_mult=0.25", "train.tasks=[\"pose\"]"]).unwrap();
        assert_eq!(l.config.train.epochs, 7);
        assert_eq!(l.config.train.lr_head, 0.01);
        assert_eq!(l.config.model.width_mult, 0.25);
        assert_eq!(l.config.train.tasks, TaskSet::parse("pose").unwrap());
        assert!(l.model_given);
        assert!(!loaded("", &[]).unwrap().model_given);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(loaded("[train]\nepoch = 3\n", &[]).is_err());
        assert!(loaded("[network]\nwidth = 1\n", &[]).is_err());
        assert!(loaded("", &["decode.conf=0.1"]).is_err());
        assert!(loaded("", &["decode"]).is_err());
        assert!(loaded("", &["train.epochs.x=1"]).is_err());
    }

    #[test]
    fn model_spec_follows_the_config() {
        let mut m = ModelConfig { input_size: 128, width_mult: 0.25, backbone_depth: 2, ..Default::default() };
        let s = m.spec(TaskSet::ALL);
        assert_eq!((s.input_size, s.width_mult, s.backbone_depth), (128, 0.25, 2));
        assert_eq!(s.anchors, NetworkSpec::default_anchors(128));
        m.anchors = vec![(1.0, 1.0); 9];
        assert_eq!(m.spec(TaskSet::ALL).anchors, vec![(1.0, 1.0); 9]);
    }
}
