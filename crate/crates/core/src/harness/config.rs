use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_ALPHA_GRID, DEFAULT_T_GRID};
use crate::imaging::PatchSpec;
use crate::losses::{ControlVariant, LossWeights};
use crate::nets::{CodecKind, NetConfig};
use crate::training::{Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub latent_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Identity,
            latent_channels: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus_dir: PathBuf,
    /// Procedural images written to `corpus_dir` by `synth-data` when it is empty.
    pub generate_count: usize,
    pub generate_size: usize,
    pub n_train_pairs: usize,
    pub n_eval_pairs: usize,
    /// Every `holdout_every`-th corpus image (by sorted name) is held out for evaluation.
    pub holdout_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("data/corpus"),
            generate_count: 100,
            generate_size: 64,
            n_train_pairs: 256,
            n_eval_pairs: 128,
            holdout_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Perceptual weight of the realness teacher's reconstruction objective.
    pub realness_percep_weight: f64,
    pub eps_weight: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            realness_percep_weight: 30.0,
            eps_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSections {
    pub teacher_f: TrainConfig,
    pub teacher_r: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub codec: TrainConfig,
}

impl Default for TrainSections {
    fn default() -> Self {
        let teacher = |stage, seed| TrainConfig {
            lr: 3e-4,
            steps: 3000,
            batch_size: 8,
            seed,
            stage,
            ..TrainConfig::default()
        };
        Self {
            teacher_f: teacher(Stage::TeacherF, 11),
            teacher_r: teacher(Stage::TeacherR, 12),
            stage1: TrainConfig {
                steps: 2000,
                seed: 13,
                stage: Stage::Stage1,
                ..TrainConfig::default()
            },
            stage2: TrainConfig {
                lr: 2e-4,
                steps: 5000,
                seed: 14,
                stage: Stage::Stage2,
                ..TrainConfig::default()
            },
            codec: TrainConfig {
                lr: 3e-3,
                steps: 2000,
                batch_size: 4,
                seed: 15,
                ..TrainConfig::default()
            },
        }
    }
}

/// One experiment: data, model shape, objectives and every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Standard deviation of the Gaussian draw used by the additive noise flow.
    pub noise_scale: f64,
    /// Euler steps used when integrating the Stage-2 flow at inference.
    pub flow_steps: usize,
    pub control_variant: ControlVariant,
    pub percep_seed: u64,
    pub t_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub data: DataConfig,
    pub degradation: DegradationSpec,
    pub patch: PatchSpec,
    pub net: NetConfig,
    pub codec: CodecConfig,
    pub weights: LossWeights,
    pub teachers: TeacherConfig,
    pub train: TrainSections,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            noise_scale: 0.1,
            flow_steps: 1,
            control_variant: ControlVariant::Anchored,
            percep_seed: 7,
            t_grid: DEFAULT_T_GRID.to_vec(),
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            data: DataConfig::default(),
            degradation: DegradationSpec::default(),
            patch: PatchSpec::default(),
            net: NetConfig::default(),
            codec: CodecConfig::default(),
            weights: LossWeights::default(),
            teachers: TeacherConfig::default(),
            train: TrainSections::default(),
        }
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Validation(format!("{name} must not be empty")));
    }
    if let Some(v) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("{name} entry {v} outside [0, 1]")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.degradation.validate()?;
        self.patch.validate()?;
        self.net.validate()?;
        self.weights.validate()?;
        if !self.patch.size.is_multiple_of(self.degradation.scale) {
            return Err(Error::Validation(format!(
                "patch.size {} not divisible by degradation.scale {}",
                self.patch.size, self.degradation.scale
            )));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Validation("noise_scale must be > 0".into()));
        }
        if self.flow_steps < 1 {
            return Err(Error::Validation("flow_steps must be >= 1".into()));
        }
        check_grid("t_grid", &self.t_grid)?;
        check_grid("alpha_grid", &self.alpha_grid)?;
        if self.data.holdout_every < 2 {
            return Err(Error::Validation("data.holdout_every must be >= 2".into()));
        }
        if self.teachers.realness_percep_weight < 0.0 || self.teachers.eps_weight < 0.0 {
            return Err(Error::Validation("teachers weights must be >= 0".into()));
        }
        for (name, t) in [
            ("train.teacher_f", &self.train.teacher_f),
            ("train.teacher_r", &self.train.teacher_r),
            ("train.stage1", &self.train.stage1),
            ("train.stage2", &self.train.stage2),
            ("train.codec", &self.train.codec),
        ] {
            t.validate(name)?;
        }
        if self.codec.kind == CodecKind::Learned {
            if self.codec.latent_channels < 1 {
                return Err(Error::Validation("codec.latent_channels must be >= 1".into()));
            }
            if !self.patch.size.is_multiple_of(2) {
                return Err(Error::Validation("learned codec needs an even patch.size".into()));
            }
        }
        Ok(())
    }

    /// Channels seen by the denoisers under the configured codec.
    pub fn latent_channels(&self) -> usize {
        match self.codec.kind {
            CodecKind::Identity => 3,
            CodecKind::Learned => self.codec.latent_channels,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            channels: self.latent_channels(),
            ..self.net.clone()
        }
    }

    /// Conditioning vector (prompt embeddings are out of scope, so zeros).
    pub fn cond(&self) -> Vec<f64> {
        vec![0.0; self.net.cond_dim]
    }

    /// SHA-256 of the validated config rendered as key-sorted compact JSON.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let s = serde_json::to_string(&v).expect("json value serializes");
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a TOML config. Keys left out of a table keep the value from
/// [`ExperimentConfig::default`], so a partial `[train.teacher_r]` section
/// inherits that section's defaults rather than the generic ones.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let parse_err = |e: toml::de::Error| Error::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    };
    // First pass: unknown keys and type errors, with line numbers.
    let _: ExperimentConfig = toml::from_str(text).map_err(parse_err)?;
    let over: toml::Value = toml::from_str(text).map_err(parse_err)?;
    let mut merged = toml::Value::try_from(ExperimentConfig::default()).expect("config serializes to toml");
    merge(&mut merged, over);
    let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Parse {
        line: 0,
        message: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_config_str(&std::fs::read_to_string(path)?)
}
