//! Glue from an [`ExperimentConfig`] to trained, checkpointed models.

use std::path::{Path, PathBuf};

use super::checkpoint::{Checkpoint, CheckpointMeta, EPOCH};
use super::config::ExperimentConfig;
use crate::degradation::{self, DegradationSpec, Pair};
use crate::diffusion;
use crate::error::{Error, Result};
use crate::eval::{self, KnobModel, MetricRow};
use crate::imaging::{self, ImageTensor};
use crate::losses::PercepExtractor;
use crate::nets::{Codec, CodecKind, DenoiserNet, ParamSet};
use crate::training::{self, RunLog, Stage, TrainEnv};

/// Salt mixed into the degradation seed for the held-out pairs so they never
/// share noise draws with the training pairs.
const EVAL_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Pair>,
    pub eval: Vec<Pair>,
}

/// Splits sorted corpus files: every `holdout_every`-th file is held out.
pub fn split_files(files: &[PathBuf], holdout_every: usize) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, f) in files.iter().enumerate() {
        if (i + 1) % holdout_every == 0 {
            held.push(f.clone());
        } else {
            train.push(f.clone());
        }
    }
    (train, held)
}

fn patches_of(files: &[PathBuf], cfg: &ExperimentConfig) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::new();
    for f in files {
        out.extend(imaging::crop_patches(&imaging::load_png(f)?, &cfg.patch)?);
    }
    Ok(out)
}

/// Writes the procedural corpus when `corpus_dir` has no PNGs yet.
pub fn ensure_corpus(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = &cfg.data.corpus_dir;
    let existing = if dir.is_dir() {
        degradation::list_pngs(dir)?
    } else {
        Vec::new()
    };
    if !existing.is_empty() {
        return Ok(existing);
    }
    degradation::generate_toy_corpus(dir, cfg.data.generate_count, cfg.data.generate_size, cfg.seed)
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let dir = &cfg.data.corpus_dir;
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.clone()));
    }
    let files = degradation::list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (train_files, eval_files) = split_files(&files, cfg.data.holdout_every);
    if train_files.is_empty() || eval_files.is_empty() {
        return Err(Error::Validation(format!(
            "corpus of {} images cannot be split with holdout_every = {}",
            files.len(),
            cfg.data.holdout_every
        )));
    }
    let train = degradation::synth_pairs_from_patches(
        &patches_of(&train_files, cfg)?,
        &cfg.degradation,
        cfg.patch.seed,
        cfg.data.n_train_pairs,
    )?;
    let eval_spec = DegradationSpec {
        seed: cfg.degradation.seed ^ EVAL_SEED_SALT,
        ..cfg.degradation.clone()
    };
    let eval = degradation::synth_pairs_from_patches(
        &patches_of(&eval_files, cfg)?,
        &eval_spec,
        cfg.patch.seed ^ EVAL_SEED_SALT,
        cfg.data.n_eval_pairs,
    )?;
    Ok(Datasets { train, eval })
}

pub fn extractor(cfg: &ExperimentConfig) -> PercepExtractor {
    PercepExtractor::new(cfg.percep_seed, 3)
}

/// Identity, or a learned codec fitted on the training ground truths.
pub fn build_codec(cfg: &ExperimentConfig, train: &[Pair]) -> Result<Codec> {
    match cfg.codec.kind {
        CodecKind::Identity => Ok(Codec::Identity),
        CodecKind::Learned => {
            let gts: Vec<ImageTensor> = train.iter().map(|p| p.gt.clone()).collect();
            Ok(training::train_codec(&gts, cfg.codec.latent_channels, &cfg.train.codec)?.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelBody {
    Restorer(DenoiserNet),
    /// Stage-2 snapshot: the Stage-1 restorer plus the learned flow field.
    Knob { stage1: DenoiserNet, flow: DenoiserNet },
}

/// A self-contained, immutable model snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub meta: CheckpointMeta,
    pub codec: Codec,
    pub body: ModelBody,
}

impl Model {
    pub fn t_controllable(&self) -> bool {
        matches!(self.body, ModelBody::Knob { .. })
    }

    /// The one-step restorer: the network itself, or the Stage-1 part of a
    /// knob model.
    pub fn restorer(&self) -> &DenoiserNet {
        match &self.body {
            ModelBody::Restorer(n) => n,
            ModelBody::Knob { stage1, .. } => stage1,
        }
    }

    pub fn knob(&self) -> Option<KnobModel<'_>> {
        match &self.body {
            ModelBody::Restorer(_) => None,
            ModelBody::Knob { stage1, flow } => Some(KnobModel {
                flow,
                stage1,
                codec: &self.codec,
                scale: self.meta.scale,
                cond: &self.meta.cond,
                flow_steps: self.meta.flow_steps,
            }),
        }
    }

    /// Knob models run `sr_at_t`; restorers ignore `t` after validating it.
    pub fn super_resolve(&self, x_lr: &ImageTensor, t: f64) -> Result<ImageTensor> {
        diffusion::check_timestep(t)?;
        match self.knob() {
            Some(k) => k.sr(x_lr, t),
            None => Ok(diffusion::student_restore(
                self.restorer(),
                &self.codec,
                x_lr,
                self.meta.scale,
                &self.meta.cond,
            )?
            .1),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = ParamSet::new();
        match &self.body {
            ModelBody::Restorer(n) => arrays.extend_prefixed("net.", &n.params),
            ModelBody::Knob { stage1, flow } => {
                arrays.extend_prefixed("stage1.", &stage1.params);
                arrays.extend_prefixed("flow.", &flow.params);
            }
        }
        if let Some(p) = self.codec.params() {
            arrays.extend_prefixed("codec.", p);
        }
        Checkpoint {
            meta: self.meta.clone(),
            arrays,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.meta.clone();
        meta.net.validate()?;
        let net = |prefix: &str| -> Result<DenoiserNet> {
            let params = ck.arrays.strip_prefix(prefix);
            let expected = DenoiserNet::init(0, meta.net.clone())?;
            for (name, t) in expected.params.iter() {
                match params.get(name) {
                    Some(p) if p.shape() == t.shape() => {}
                    Some(p) => return Err(Error::ShapeMismatch(p.shape().to_vec(), t.shape().to_vec())),
                    None => return Err(Error::MalformedCheckpoint(format!("missing array {prefix}{name}"))),
                }
            }
            if params.len() != expected.params.len() {
                return Err(Error::MalformedCheckpoint(format!("unexpected arrays under {prefix}")));
            }
            Ok(DenoiserNet {
                config: meta.net.clone(),
                params,
            })
        };
        let body = if meta.stage == Stage::Stage2.as_str() {
            ModelBody::Knob {
                stage1: net("stage1.")?,
                flow: net("flow.")?,
            }
        } else {
            ModelBody::Restorer(net("net.")?)
        };
        let codec = match meta.codec {
            CodecKind::Identity => Codec::Identity,
            CodecKind::Learned => {
                let params = ck.arrays.strip_prefix("codec.");
                for k in ["enc.w", "enc.b", "dec.w", "dec.b"] {
                    if params.get(k).is_none() {
                        return Err(Error::MalformedCheckpoint(format!("missing array codec.{k}")));
                    }
                }
                Codec::Learned { params, factor: 2 }
            }
        };
        if codec.latent_channels(3) != meta.net.channels {
            return Err(Error::MalformedCheckpoint(format!(
                "codec emits {} channels, net expects {}",
                codec.latent_channels(3),
                meta.net.channels
            )));
        }
        Ok(Self { meta, codec, body })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::checkpoint::save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&super::checkpoint::load_checkpoint(path)?)
    }
}

fn meta(cfg: &ExperimentConfig, stage: Stage, step: usize, seed: u64, codec: &Codec) -> CheckpointMeta {
    CheckpointMeta {
        config_hash: cfg.hash(),
        stage: stage.as_str().to_string(),
        step: step as u64,
        seed,
        created: EPOCH.to_string(),
        net: cfg.net_config(),
        scale: cfg.degradation.scale,
        codec: codec.kind(),
        cond: cfg.cond(),
        flow_steps: cfg.flow_steps,
    }
}

fn env<'a>(cfg: &'a ExperimentConfig, codec: &'a Codec, ex: &'a PercepExtractor, cond: &'a [f64]) -> TrainEnv<'a> {
    TrainEnv {
        codec,
        extractor: ex,
        scale: cfg.degradation.scale,
        noise_scale: cfg.noise_scale,
        cond,
    }
}

/// Pretrains one teacher from its own seeded init.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    which: Stage,
    data: &Datasets,
    codec: &Codec,
    steps: Option<usize>,
) -> Result<(Model, RunLog)> {
    let section = match which {
        Stage::TeacherF => &cfg.train.teacher_f,
        Stage::TeacherR => &cfg.train.teacher_r,
        other => {
            return Err(Error::Validation(format!(
                "{} is not a teacher stage",
                other.as_str()
            )))
        }
    };
    let tc = training::TrainConfig {
        steps: steps.unwrap_or(section.steps),
        ..section.clone()
    };
    let ex = extractor(cfg);
    let cond = cfg.cond();
    let e = env(cfg, codec, &ex, &cond);
    let init = DenoiserNet::init(tc.seed, cfg.net_config())?;
    let objective = training::TeacherObjective {
        percep_weight: match which {
            Stage::TeacherF => 0.0,
            _ => cfg.teachers.realness_percep_weight,
        },
        eps_weight: cfg.teachers.eps_weight,
    };
    let (net, mut log) = training::pretrain_teacher(&data.train, init, &e, &objective, &tc)?;
    log.config_hash = cfg.hash();
    Ok((
        Model {
            meta: meta(cfg, which, tc.steps, tc.seed, codec),
            codec: codec.clone(),
            body: ModelBody::Restorer(net),
        },
        log,
    ))
}

pub fn distill_stage1(
    cfg: &ExperimentConfig,
    data: &Datasets,
    teacher_f: &Model,
    teacher_r: &Model,
    steps: Option<usize>,
) -> Result<(Model, RunLog)> {
    if teacher_f.codec != teacher_r.codec {
        return Err(Error::Validation("teachers were trained with different codecs".into()));
    }
    let codec = &teacher_r.codec;
    let tc = &cfg.train.stage1;
    let steps = steps.unwrap_or(tc.steps);
    let ex = extractor(cfg);
    let cond = cfg.cond();
    let e = env(cfg, codec, &ex, &cond);
    let (net, mut log) = training::run_stage1(
        &data.train,
        teacher_f.restorer(),
        teacher_r.restorer(),
        &e,
        &cfg.weights,
        tc,
        steps,
        None,
    )?;
    log.config_hash = cfg.hash();
    Ok((
        Model {
            meta: meta(cfg, Stage::Stage1, steps, tc.seed, codec),
            codec: codec.clone(),
            body: ModelBody::Restorer(net),
        },
        log,
    ))
}

/// Stage 2 on the Stage-1 latents of the training inputs; the frozen
/// Stage-1 network is the teacher field and the student starts as its copy.
pub fn distill_stage2(
    cfg: &ExperimentConfig,
    data: &Datasets,
    stage1: &Model,
    steps: Option<usize>,
) -> Result<(Model, RunLog)> {
    let s1 = stage1.restorer();
    let tc = &cfg.train.stage2;
    let steps = steps.unwrap_or(tc.steps);
    let cond = cfg.cond();
    let latents = training::stage1_latents(s1, &data.train, &stage1.codec, cfg.degradation.scale, &cond)?;
    let (flow, mut log) =
        training::run_stage2(s1, s1, &latents, tc, steps, &cond, cfg.control_variant, None)?;
    log.config_hash = cfg.hash();
    Ok((
        Model {
            meta: meta(cfg, Stage::Stage2, steps, tc.seed, &stage1.codec),
            codec: stage1.codec.clone(),
            body: ModelBody::Knob {
                stage1: s1.clone(),
                flow,
            },
        },
        log,
    ))
}

fn split_pairs(pairs: &[Pair]) -> (Vec<ImageTensor>, Vec<ImageTensor>) {
    pairs.iter().map(|p| (p.lr.clone(), p.gt.clone())).unzip()
}

/// Metrics of one model at knob position `t` on the given pairs.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &Model, pairs: &[Pair], t: f64) -> Result<MetricRow> {
    let (lr, gt) = split_pairs(pairs);
    let out: Vec<ImageTensor> = lr
        .iter()
        .map(|x| model.super_resolve(x, t))
        .collect::<Result<_>>()?;
    eval::evaluate_set(t, &out, &gt, &extractor(cfg))
}

pub fn sweep_t_model(cfg: &ExperimentConfig, model: &Model, pairs: &[Pair]) -> Result<Vec<MetricRow>> {
    let knob = model.knob().ok_or_else(|| {
        Error::Validation(format!("{} checkpoint has no timestep knob", model.meta.stage))
    })?;
    let (lr, gt) = split_pairs(pairs);
    eval::sweep_t(&knob, &lr, &gt, &cfg.t_grid, &extractor(cfg))
}

pub fn sweep_alpha_models(
    cfg: &ExperimentConfig,
    fidelity: &Model,
    realness: &Model,
    pairs: &[Pair],
) -> Result<Vec<MetricRow>> {
    let (lr, gt) = split_pairs(pairs);
    let run = |m: &Model| -> Result<Vec<ImageTensor>> {
        lr.iter().map(|x| m.super_resolve(x, 0.0)).collect()
    };
    eval::sweep_alpha(&run(fidelity)?, &run(realness)?, &gt, &cfg.alpha_grid, &extractor(cfg))
}
