//! Name-keyed builders for models and datasets.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic_dataset, DataResult, Dataset};
use crate::encoder::EncoderConfig;
use crate::model::{ChangeDetector, ModelConfig};
use crate::tensor::Result;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("unknown {kind} id `{id}`; available: {}", known.join(", "))]
    Unknown { kind: &'static str, id: String, known: Vec<String> },
    #[error("{kind} id `{id}` is registered twice")]
    Duplicate { kind: &'static str, id: String },
}

pub struct Registry<B> {
    kind: &'static str,
    entries: BTreeMap<&'static str, B>,
}

impl<B> Registry<B> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, id: &'static str, builder: B) -> Result<(), RegistryError> {
        if self.entries.contains_key(id) {
            return Err(RegistryError::Duplicate { kind: self.kind, id: id.to_string() });
        }
        self.entries.insert(id, builder);
        Ok(())
    }

    pub fn resolve(&self, id: &str) -> Result<&B, RegistryError> {
        self.entries.get(id).ok_or_else(|| RegistryError::Unknown {
            kind: self.kind,
            id: id.to_string(),
            known: self.ids().map(str::to_string).collect(),
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl<B> fmt::Debug for Registry<B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("kind", &self.kind).field("ids", &self.entries.keys()).finish()
    }
}

/// A registered architecture: its preset and a constructor.
#[derive(Debug, Clone, Copy)]
pub struct ModelBuilder {
    preset: Preset,
}

impl ModelBuilder {
    pub fn preset(&self) -> ModelConfig {
        (self.preset)()
    }

    pub fn build(&self, config: &ModelConfig, seed: u64) -> Result<ChangeDetector<f32>> {
        ChangeDetector::new(config, seed)
    }
}

type Preset = fn() -> ModelConfig;

/// Produces the dataset an experiment reads.
pub type DatasetBuilder = fn(&ExperimentConfig) -> DataResult<Dataset>;

fn resnet_tiny() -> ModelConfig {
    ModelConfig::default()
}

fn resnet_tiny_no_changefft() -> ModelConfig {
    ModelConfig { use_changefft: false, ..ModelConfig::default() }
}

fn resnet_micro() -> ModelConfig {
    ModelConfig::micro()
}

fn resnet_micro_no_changefft() -> ModelConfig {
    ModelConfig { use_changefft: false, ..ModelConfig::micro() }
}

fn resnet_tiny_wide() -> ModelConfig {
    ModelConfig { encoder: EncoderConfig { base_channels: 96, ..EncoderConfig::default() }, ..ModelConfig::default() }
}

pub fn models() -> Registry<ModelBuilder> {
    let mut r = Registry::new("model");
    let presets: [(&'static str, Preset); 5] = [
        ("minenetcd-resnet-tiny", resnet_tiny),
        ("minenetcd-resnet-tiny-no-changefft", resnet_tiny_no_changefft),
        ("minenetcd-resnet-tiny-wide", resnet_tiny_wide),
        ("minenetcd-micro", resnet_micro),
        ("minenetcd-micro-no-changefft", resnet_micro_no_changefft),
    ];
    for (id, preset) in presets {
        r.register(id, ModelBuilder { preset }).expect("ids are distinct");
    }
    r
}

/// Regenerates the synthetic corpus under `dataset_root`, then opens it.
fn synthetic(cfg: &ExperimentConfig) -> DataResult<Dataset> {
    generate_synthetic_dataset(&cfg.dataset_root, &cfg.synthetic)?;
    Dataset::open(&cfg.dataset_root)
}

fn folder(cfg: &ExperimentConfig) -> DataResult<Dataset> {
    Dataset::open(&cfg.dataset_root)
}

pub fn datasets() -> Registry<DatasetBuilder> {
    let mut r = Registry::new("dataset");
    r.register("synthetic", synthetic as DatasetBuilder).expect("ids are distinct");
    r.register("folder", folder as DatasetBuilder).expect("ids are distinct");
    r
}
