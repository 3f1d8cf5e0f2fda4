//! Optimizer, teacher pretraining and the two distillation loops.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::degradation::Pair;
use crate::diffusion;
use crate::error::{Error, Result};
use crate::losses::{
    rec_loss_graph, stage2_loss, ControlVariant, LossOutput, LossWeights, PercepExtractor,
    Stage1Context, Trainable,
};
use crate::nets::{collect_grads, Codec, DenoiserNet, EpsField, LowRankAdapter, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TeacherF,
    TeacherR,
    #[default]
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::TeacherF => "teacher_f",
            Stage::TeacherR => "teacher_r",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stage: Stage,
    pub use_adapter: bool,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    /// Emit a checkpoint every this many steps; 0 disables intermediate ones.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            stage: Stage::Stage1,
            use_adapter: false,
            adapter_rank: 4,
            adapter_scale: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("{section}.{m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.use_adapter && self.adapter_rank < 1 {
            return bad("adapter_rank must be >= 1".into());
        }
        Ok(())
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts the step and leaves
    /// both parameters and optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(p.shape().to_vec(), vec![]))?;
            p.check_same_shape(g)?;
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap();
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).unwrap();
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(name).unwrap();
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub parts: Vec<(&'static str, f64)>,
}

/// Append-only per-step loss record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<LogEntry>,
}

impl RunLog {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: LogEntry) {
        if let Some(last) = self.entries.last() {
            assert!(entry.step > last.step, "run log steps must increase");
        }
        self.entries.push(entry);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let part_names: Vec<&str> = self
            .entries
            .first()
            .map(|e| e.parts.iter().map(|p| p.0).collect())
            .unwrap_or_default();
        let mut s = String::from("step,loss,wall_ms");
        for p in &part_names {
            s.push(',');
            s.push_str(p);
        }
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!("{},{},{:.3}", e.step, e.loss, e.wall_ms));
            for (_, v) in &e.parts {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Called with `(step, current weights)` every `checkpoint_every` steps.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &DenoiserNet) -> Result<()>;

fn sample_batch<'a, T>(data: &'a [T], n: usize, rng: &mut impl Rng) -> Vec<&'a T> {
    (0..n).map(|_| &data[rng.gen_range(0..data.len())]).collect()
}

fn check_loss(step: usize, out: &LossOutput) -> Result<()> {
    if out.loss.is_finite() {
        return Ok(());
    }
    let detail = out
        .parts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    log::error!("non-finite loss at step {step}: {detail}");
    Err(Error::NonFiniteLoss { step, detail })
}

fn apply_step(opt: &mut AdamW, params: &mut ParamSet, grads: &ParamSet, step: usize) {
    if let Err(e) = opt.step(params, grads) {
        log::warn!("step {step} skipped: {e}");
    }
}

/// Objective for pretraining a toy teacher. The restorer branch minimizes
/// `mse + percep_weight * percep`; the noise branch predicts the Gaussian
/// draw `eps` (std `noise_scale`) from `z0 + t * eps`, where `z0` is the
/// restorer's own detached output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherObjective {
    pub percep_weight: f64,
    pub eps_weight: f64,
}

impl Default for TeacherObjective {
    fn default() -> Self {
        Self {
            percep_weight: 0.0,
            eps_weight: 1.0,
        }
    }
}

/// Shared pieces of every training run.
pub struct TrainEnv<'a> {
    pub codec: &'a Codec,
    pub extractor: &'a PercepExtractor,
    pub scale: usize,
    pub noise_scale: f64,
    pub cond: &'a [f64],
}

pub fn teacher_loss(
    net: &DenoiserNet,
    env: &TrainEnv,
    objective: &TeacherObjective,
    batch: &[&Pair],
    rng: &mut impl Rng,
) -> Result<LossOutput> {
    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let cb = env.codec.bind(&mut g, false);
    let w = LossWeights {
        lambda_l2: 1.0,
        lambda_lp: objective.percep_weight,
        ..LossWeights::zero()
    };
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = None;
    let (mut rec_sum, mut eps_sum) = (0.0, 0.0);
    for pair in batch {
        let z1 = g.constant(diffusion::encode_lr(env.codec, &pair.lr, env.scale)?);
        let z0 = net.restore_graph(&mut g, &p, z1, env.cond)?;
        let x0 = env.codec.decode_graph(&mut g, &cb, z0)?;
        let gt = g.constant(pair.gt.clone());
        let mut item = rec_loss_graph(&mut g, x0, gt, &w, env.extractor)?;
        rec_sum += g.scalar_value(item);
        if objective.eps_weight > 0.0 {
            let clean = g.value(z0).clone();
            let t = diffusion::sample_timestep(rng);
            let eps = diffusion::gaussian_like(&clean, env.noise_scale, rng);
            let zt = g.constant(diffusion::add_noise(&clean, t, &eps)?);
            let pred = net.forward_graph(&mut g, &p, zt, t, env.cond)?;
            let target = g.constant(eps);
            let r = g.sub(pred, target);
            let l = g.mean_sq(r);
            eps_sum += g.scalar_value(l);
            let l = g.scale(l, objective.eps_weight);
            item = g.add(item, l);
        }
        let item = g.scale(item, inv_n);
        total = Some(match total {
            Some(s) => g.add(s, item),
            None => item,
        });
    }
    let root = total.ok_or(Error::EmptyData)?;
    let grads = g.backward(root);
    Ok(LossOutput {
        loss: g.scalar_value(root),
        grads: collect_grads(&g, &grads, &p),
        parts: vec![("rec", rec_sum * inv_n), ("eps", eps_sum * inv_n)],
    })
}

pub fn pretrain_teacher(
    data: &[Pair],
    init: DenoiserNet,
    env: &TrainEnv,
    objective: &TeacherObjective,
    cfg: &TrainConfig,
) -> Result<(DenoiserNet, RunLog)> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut net = init;
    let mut opt = AdamW::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = RunLog::new(cfg.seed, "");
    for step in 0..cfg.steps {
        let started = Instant::now();
        let batch = sample_batch(data, cfg.batch_size, &mut rng);
        let out = teacher_loss(&net, env, objective, &batch, &mut rng)?;
        check_loss(step, &out)?;
        apply_step(&mut opt, &mut net.params, &out.grads, step);
        log.push(LogEntry {
            step,
            loss: out.loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            parts: out.parts,
        });
    }
    Ok((net, log))
}

pub fn pretrain_fidelity_teacher(
    data: &[Pair],
    init: DenoiserNet,
    env: &TrainEnv,
    cfg: &TrainConfig,
) -> Result<(DenoiserNet, RunLog)> {
    let objective = TeacherObjective {
        percep_weight: 0.0,
        ..TeacherObjective::default()
    };
    pretrain_teacher(data, init, env, &objective, cfg)
}

pub fn pretrain_realness_teacher(
    data: &[Pair],
    init: DenoiserNet,
    env: &TrainEnv,
    percep_weight: f64,
    cfg: &TrainConfig,
) -> Result<(DenoiserNet, RunLog)> {
    let objective = TeacherObjective {
        percep_weight,
        ..TeacherObjective::default()
    };
    pretrain_teacher(data, init, env, &objective, cfg)
}

/// Stage 1: the student starts from the realness teacher and is trained on
/// reconstruction plus both distillation terms. Teachers are read-only.
#[allow(clippy::too_many_arguments)]
pub fn run_stage1(
    data: &[Pair],
    teacher_f: &DenoiserNet,
    teacher_r: &DenoiserNet,
    env: &TrainEnv,
    weights: &LossWeights,
    cfg: &TrainConfig,
    steps: usize,
    mut hook: Option<CheckpointHook>,
) -> Result<(DenoiserNet, RunLog)> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut student = teacher_r.clone();
    let mut adapter = if cfg.use_adapter {
        Some(LowRankAdapter::new(&student, cfg.adapter_rank, cfg.adapter_scale, cfg.seed ^ 0xA5A5)?)
    } else {
        None
    };
    let ctx = Stage1Context {
        teacher_f,
        teacher_r,
        codec: env.codec,
        extractor: env.extractor,
        weights,
        scale: env.scale,
        noise_scale: env.noise_scale,
        cond: env.cond,
    };
    let mut opt = AdamW::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = RunLog::new(cfg.seed, "");
    for step in 0..steps {
        let started = Instant::now();
        let batch: Vec<Pair> = sample_batch(data, cfg.batch_size, &mut rng)
            .into_iter()
            .cloned()
            .collect();
        let trainable = Trainable {
            net: &student,
            adapter: adapter.as_ref(),
        };
        let out = ctx.loss(&trainable, &batch, &mut rng)?;
        check_loss(step, &out)?;
        match adapter.as_mut() {
            Some(a) => apply_step(&mut opt, &mut a.params, &out.grads, step),
            None => apply_step(&mut opt, &mut student.params, &out.grads, step),
        }
        log.push(LogEntry {
            step,
            loss: out.loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            parts: out.parts,
        });
        if let Some(h) = hook.as_mut() {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let current = match &adapter {
                    Some(a) => a.merge(&student)?,
                    None => student.clone(),
                };
                h(step + 1, &current)?;
            }
        }
    }
    if let Some(a) = adapter.take() {
        student = a.merge(&student)?;
    }
    Ok((student, log))
}

/// Stage-1 output latents for every LR image in `data`.
pub fn stage1_latents(
    stage1: &DenoiserNet,
    data: &[Pair],
    codec: &Codec,
    scale: usize,
    cond: &[f64],
) -> Result<Vec<Tensor>> {
    data.iter()
        .map(|p| Ok(diffusion::student_restore(stage1, codec, &p.lr, scale, cond)?.0))
        .collect()
}

/// Stage 2: fine-tunes a copy of the Stage-1 network against the frozen
/// teacher field on the control loss.
#[allow(clippy::too_many_arguments)]
pub fn run_stage2(
    student_init: &DenoiserNet,
    teacher: &dyn EpsField,
    latents: &[Tensor],
    cfg: &TrainConfig,
    steps: usize,
    cond: &[f64],
    variant: ControlVariant,
    mut hook: Option<CheckpointHook>,
) -> Result<(DenoiserNet, RunLog)> {
    if latents.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut student = student_init.clone();
    let mut adapter = if cfg.use_adapter {
        Some(LowRankAdapter::new(&student, cfg.adapter_rank, cfg.adapter_scale, cfg.seed ^ 0x5A5A)?)
    } else {
        None
    };
    let mut opt = AdamW::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = RunLog::new(cfg.seed, "");
    for step in 0..steps {
        let started = Instant::now();
        let batch: Vec<Tensor> = sample_batch(latents, cfg.batch_size, &mut rng)
            .into_iter()
            .cloned()
            .collect();
        let trainable = Trainable {
            net: &student,
            adapter: adapter.as_ref(),
        };
        let out = stage2_loss(&batch, teacher, &trainable, &mut rng, cond, variant)?;
        check_loss(step, &out)?;
        match adapter.as_mut() {
            Some(a) => apply_step(&mut opt, &mut a.params, &out.grads, step),
            None => apply_step(&mut opt, &mut student.params, &out.grads, step),
        }
        log.push(LogEntry {
            step,
            loss: out.loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            parts: out.parts,
        });
        if let Some(h) = hook.as_mut() {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let current = match &adapter {
                    Some(a) => a.merge(&student)?,
                    None => student.clone(),
                };
                h(step + 1, &current)?;
            }
        }
    }
    if let Some(a) = adapter.take() {
        student = a.merge(&student)?;
    }
    Ok((student, log))
}

/// Fits a learned codec to reconstruct the given images.
pub fn train_codec(
    images: &[Tensor],
    latent_channels: usize,
    cfg: &TrainConfig,
) -> Result<(Codec, RunLog)> {
    if images.is_empty() {
        return Err(Error::EmptyData);
    }
    let channels = images[0].shape()[0];
    let mut codec = Codec::init_learned(cfg.seed, channels, latent_channels);
    let mut opt = AdamW::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = RunLog::new(cfg.seed, "");
    for step in 0..cfg.steps {
        let started = Instant::now();
        let batch = sample_batch(images, cfg.batch_size, &mut rng);
        let mut g = Graph::new();
        let p = codec.bind(&mut g, true);
        let mut total = None;
        for x in &batch {
            let xv = g.constant((*x).clone());
            let z = codec.encode_graph(&mut g, &p, xv)?;
            let y = codec.decode_graph(&mut g, &p, z)?;
            let d = g.sub(y, xv);
            let l = g.mean_sq(d);
            let l = g.scale(l, 1.0 / batch.len() as f64);
            total = Some(match total {
                Some(s) => g.add(s, l),
                None => l,
            });
        }
        let root = total.unwrap();
        let loss = g.scalar_value(root);
        let grads = g.backward(root);
        let grads = collect_grads(&g, &grads, &p);
        if let Codec::Learned { params, .. } = &mut codec {
            apply_step(&mut opt, params, &grads, step);
        }
        log.push(LogEntry {
            step,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            parts: vec![],
        });
    }
    Ok((codec, log))
}
