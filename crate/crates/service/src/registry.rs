use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use tsr_core::harness::pipeline::Model;
use tsr_core::training::Stage;

/// Named, immutable model snapshots.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<Model>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelEntry {
    pub name: String,
    pub stage: String,
    pub step: u64,
    pub config_hash: String,
    pub t_controllable: bool,
    pub default: bool,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, model: Model) {
        self.models.insert(name.into(), Arc::new(model));
    }

    /// Loads every `*.ckpt` in `dir`, keyed by file stem.
    pub fn load_dir(dir: &Path) -> tsr_core::Result<Self> {
        if !dir.is_dir() {
            return Err(tsr_core::Error::MissingFile(dir.to_path_buf()));
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        paths.sort();
        let mut reg = Self::new();
        for p in paths {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            reg.insert(name, Model::load(&p)?);
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Model>> {
        self.models.get(name)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// The stage-2 snapshot with the greatest name, else the greatest name.
    pub fn default_name(&self) -> Option<&str> {
        self.models
            .iter()
            .rev()
            .find(|(_, m)| m.t_controllable())
            .or_else(|| self.models.iter().next_back())
            .map(|(k, _)| k.as_str())
    }

    /// First snapshot (by name) trained as the given stage.
    pub fn first_of_stage(&self, stage: Stage) -> Option<(&str, &Arc<Model>)> {
        self.models
            .iter()
            .find(|(_, m)| m.meta.stage == stage.as_str())
            .map(|(k, m)| (k.as_str(), m))
    }

    pub fn entries(&self) -> Vec<ModelEntry> {
        let default = self.default_name();
        self.models
            .iter()
            .map(|(name, m)| ModelEntry {
                name: name.clone(),
                stage: m.meta.stage.clone(),
                step: m.meta.step,
                config_hash: m.meta.config_hash.clone(),
                t_controllable: m.t_controllable(),
                default: Some(name.as_str()) == default,
            })
            .collect()
    }
}
