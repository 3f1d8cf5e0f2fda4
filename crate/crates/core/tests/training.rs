mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{cond, jittered, normal_tensor, tiny_config, toy_pairs};
use tsr_core::losses::{ControlVariant, LossWeights, PercepExtractor};
use tsr_core::nets::{Codec, DenoiserNet, ParamSet};
use tsr_core::tensor::Tensor;
use tsr_core::training::{self, AdamW, LogEntry, RunLog, TrainConfig, TrainEnv};
use tsr_core::Error;

fn one_param(v: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    let n = v.len();
    p.insert("w", Tensor::from_vec(&[n], v).unwrap());
    p
}

#[test]
fn adamw_zero_gradient_is_a_no_op_without_decay() {
    let mut p = one_param(vec![0.5, -1.0, 2.0]);
    let before = p.clone();
    let mut opt = AdamW::new(1e-2, 0.9, 0.999, 0.0);
    for _ in 0..10 {
        opt.step(&mut p, &one_param(vec![0.0; 3])).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut p = one_param(vec![1.0, 1.0, 1.0]);
    let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0);
    opt.step(&mut p, &one_param(vec![3.0, -0.5, 1e-3])).unwrap();
    let got = p.get("w").unwrap().data().to_vec();
    // m_hat / sqrt(v_hat) = sign(g) on the first step, up to the epsilon.
    for (x, s) in got.iter().zip([1.0, -1.0, 1.0]) {
        assert!((x - (1.0 - 0.1 * s)).abs() < 2e-6, "{x}");
    }
}

/// Scalar AdamW written out from the update equations.
struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, b1: f64, b2: f64, wd: f64) {
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            p[i] -= lr * (mh / (vh.sqrt() + 1e-8) + wd * p[i]);
        }
    }
}

#[test]
fn adamw_matches_reference_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let init: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut p = one_param(init.clone());
    let mut q = init;
    let mut opt = AdamW::new(3e-3, 0.9, 0.99, 0.01);
    let mut reference = RefAdam { m: vec![0.0; 5], v: vec![0.0; 5], t: 0 };
    for _ in 0..100 {
        // Gradient of sum (x - 0.3)^2 plus deterministic jitter.
        let g: Vec<f64> = q.iter().map(|x| 2.0 * (x - 0.3) + rng.gen_range(-0.1..0.1)).collect();
        opt.step(&mut p, &one_param(g.clone())).unwrap();
        reference.step(&mut q, &g, 3e-3, 0.9, 0.99, 0.01);
    }
    for (a, b) in p.get("w").unwrap().data().iter().zip(&q) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(opt.steps_taken(), 100);
}

#[test]
fn adamw_rejects_non_finite_gradients_atomically() {
    let mut p = one_param(vec![1.0, 2.0]);
    let before = p.clone();
    let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0);
    let err = opt.step(&mut p, &one_param(vec![0.5, f64::NAN])).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(_)));
    assert_eq!(p, before);
    assert_eq!(opt.steps_taken(), 0);
    assert!(opt.step(&mut p, &one_param(vec![0.5])).is_err());
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate("x").is_ok());
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        TrainConfig { steps: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { use_adapter: true, adapter_rank: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate("train.stage1"), Err(Error::Validation(m)) if m.starts_with("train.stage1.")));
    }
}

struct Fixture {
    pairs: Vec<tsr_core::degradation::Pair>,
    tf: DenoiserNet,
    tr: DenoiserNet,
    ex: PercepExtractor,
    cond: Vec<f64>,
}

impl Fixture {
    fn new() -> Self {
        Self {
            pairs: toy_pairs(3, 4, 8, 2),
            tf: jittered(1, tiny_config(), 0.05),
            tr: jittered(2, tiny_config(), 0.05),
            ex: PercepExtractor::new(7, 3),
            cond: cond(),
        }
    }

    fn stage1(&self, cfg: &TrainConfig, steps: usize) -> (DenoiserNet, RunLog) {
        let env = TrainEnv {
            codec: &Codec::Identity,
            extractor: &self.ex,
            scale: 2,
            noise_scale: 0.1,
            cond: &self.cond,
        };
        training::run_stage1(&self.pairs, &self.tf, &self.tr, &env, &LossWeights::default(), cfg, steps, None)
            .unwrap()
    }
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn stage1_with_zero_steps_returns_the_realness_teacher() {
    let fx = Fixture::new();
    let (net, log) = fx.stage1(&small_cfg(0), 0);
    assert_eq!(net, fx.tr);
    assert!(log.entries.is_empty());
}

#[test]
fn stage1_leaves_teachers_untouched_and_is_deterministic() {
    let fx = Fixture::new();
    let (tf0, tr0) = (fx.tf.params.fingerprint(), fx.tr.params.fingerprint());
    let (a, la) = fx.stage1(&small_cfg(5), 10);
    let (b, lb) = fx.stage1(&small_cfg(5), 10);
    assert_eq!(fx.tf.params.fingerprint(), tf0);
    assert_eq!(fx.tr.params.fingerprint(), tr0);
    assert_eq!(a.params.fingerprint(), b.params.fingerprint());
    assert_eq!(la.losses(), lb.losses());
    assert_ne!(a, fx.tr);
    assert_eq!(la.entries.len(), 10);
    assert!(la.entries.iter().all(|e| e.parts.iter().any(|p| p.0 == "fl")));

    let (c, _) = fx.stage1(&small_cfg(6), 10);
    assert_ne!(a.params.fingerprint(), c.params.fingerprint());
}

#[test]
fn adapter_training_only_moves_within_the_low_rank_update() {
    let fx = Fixture::new();
    let cfg = TrainConfig {
        use_adapter: true,
        adapter_rank: 2,
        ..small_cfg(7)
    };
    let (net, _) = fx.stage1(&cfg, 5);
    // Biases are never adapted.
    for (name, p) in net.params.iter() {
        if !name.ends_with(".w") {
            assert_eq!(p, fx.tr.params.get(name).unwrap(), "{name}");
        }
    }
    assert_ne!(net, fx.tr);
}

#[test]
fn checkpoint_hook_fires_on_schedule() {
    let teacher = jittered(3, tiny_config(), 0.05);
    let latents: Vec<Tensor> = toy_pairs(4, 2, 8, 2).into_iter().map(|p| p.gt).collect();
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..small_cfg(1)
    };
    let mut seen = Vec::new();
    let mut hook = |step: usize, _: &DenoiserNet| {
        seen.push(step);
        Ok(())
    };
    let init = DenoiserNet::init(0, tiny_config()).unwrap();
    training::run_stage2(&init, &teacher, &latents, &cfg, 10, &cond(), ControlVariant::Anchored, Some(&mut hook))
        .unwrap();
    assert_eq!(seen, vec![3, 6, 9]);
}

#[test]
fn non_finite_loss_aborts_the_run() {
    let teacher = jittered(3, tiny_config(), 0.05);
    let latents = vec![normal_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[3, 4, 4], 0.3)];
    let mut init = DenoiserNet::init(0, tiny_config()).unwrap();
    init.params.get_mut("out.b").unwrap().data_mut()[0] = f64::NAN;
    let err = training::run_stage2(&init, &teacher, &latents, &small_cfg(0), 5, &cond(), ControlVariant::Anchored, None)
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
    assert!(matches!(
        training::run_stage2(&init, &teacher, &[], &small_cfg(0), 5, &cond(), ControlVariant::Anchored, None),
        Err(Error::EmptyData)
    ));
}

#[test]
fn run_log_csv_layout() {
    let mut log = RunLog::new(4, "abc");
    for step in 0..3 {
        log.push(LogEntry {
            step,
            loss: 1.0 / (step + 1) as f64,
            wall_ms: 2.0,
            parts: vec![("rec", 0.25), ("fl", 0.5)],
        });
    }
    let csv = log.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,wall_ms,rec,fl");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2], "1,0.5,2.000,0.25,0.5");
}

#[test]
#[should_panic(expected = "must increase")]
fn run_log_rejects_out_of_order_steps() {
    let mut log = RunLog::new(0, "");
    let e = LogEntry { step: 2, loss: 0.0, wall_ms: 0.0, parts: vec![] };
    log.push(e.clone());
    log.push(e);
}
