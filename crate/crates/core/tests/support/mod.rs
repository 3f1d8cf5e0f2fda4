//! Shared fixtures and the criterion-level oracle checks. Included by the
//! core integration tests and by the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsr_core::autograd::Graph;
use tsr_core::degradation::{self, DegradationSample, Pair};
use tsr_core::diffusion;
use tsr_core::eval;
use tsr_core::imaging;
use tsr_core::losses::{
    self, rec_loss_graph, stage2_loss_with_pairs, ControlVariant, LossWeights, PercepExtractor,
    Stage1Context, Stage1Draw, Trainable,
};
use tsr_core::nets::{collect_grads, Codec, ConstantField, DenoiserNet, LowRankAdapter, NetConfig, ParamSet};
use tsr_core::tensor::Tensor;
use tsr_core::training::{self, TeacherObjective, TrainConfig, TrainEnv};

pub const FD_H: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
/// Magnitude floor for the relative error, so gradients that are zero up to
/// rounding do not divide by ~0.
pub const FD_FLOOR: f64 = 1e-6;

pub fn tiny_config() -> NetConfig {
    NetConfig {
        width: 6,
        depth: 1,
        t_embed_dim: 4,
        channels: 3,
        cond_dim: 2,
    }
}

pub fn cond() -> Vec<f64> {
    vec![0.3, -0.2]
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::from_vec(shape, (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// A freshly initialized net with every parameter (including the zero head)
/// perturbed, so all gradient paths are live.
pub fn jittered(seed: u64, config: NetConfig, std: f64) -> DenoiserNet {
    let mut net = DenoiserNet::init(seed, config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    for (_, p) in net.params.iter_mut() {
        let noise = normal_tensor(&mut rng, p.shape(), std);
        p.add_assign(&noise);
    }
    net
}

/// LR/GT pairs with values well inside `(0, 1)`; LR is the bicubic
/// downscale of GT.
pub fn toy_pairs(seed: u64, n: usize, size: usize, scale: usize) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let gt = rand_tensor(&mut rng, &[3, size, size], 0.3, 0.7);
            let lr = imaging::resize_to(&gt, size / scale, size / scale).unwrap();
            Pair { lr, gt }
        })
        .collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error between `grads` and central differences of `f`
/// over every coordinate of `params`.
pub fn fd_max_rel_err(params: &ParamSet, grads: &ParamSet, f: impl Fn(&ParamSet) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for name in params.names() {
        let n = params.get(&name).unwrap().len();
        let analytic = grads.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += FD_H;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= FD_H;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Same as [`fd_max_rel_err`] for a single input tensor.
pub fn fd_tensor_rel_err(x: &Tensor, grad: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_H;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_H);
        worst = worst.max(rel_err(grad.data()[i], numeric));
    }
    worst
}

fn with_params(net: &DenoiserNet, params: &ParamSet) -> DenoiserNet {
    DenoiserNet {
        config: net.config.clone(),
        params: params.clone(),
    }
}

/// Fixtures shared by the gradient checks.
pub struct GradFixture {
    pub student: DenoiserNet,
    pub teacher_f: DenoiserNet,
    pub teacher_r: DenoiserNet,
    pub pairs: Vec<Pair>,
    pub draws: Vec<Stage1Draw>,
    pub ex: PercepExtractor,
    pub cond: Vec<f64>,
    pub scale: usize,
}

impl GradFixture {
    pub fn new() -> Self {
        let scale = 4;
        let pairs = toy_pairs(21, 2, 16, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let draws = pairs
            .iter()
            .map(|p| Stage1Draw {
                t: rng.gen_range(0.1..0.9),
                eps: normal_tensor(&mut rng, p.gt.shape(), 0.1),
            })
            .collect();
        Self {
            student: jittered(1, tiny_config(), 0.05),
            teacher_f: jittered(2, tiny_config(), 0.05),
            teacher_r: jittered(3, tiny_config(), 0.05),
            pairs,
            draws,
            ex: PercepExtractor::new(7, 3),
            cond: cond(),
            scale,
        }
    }

    fn ctx<'a>(&'a self, w: &'a LossWeights) -> Stage1Context<'a> {
        Stage1Context {
            teacher_f: &self.teacher_f,
            teacher_r: &self.teacher_r,
            codec: &Codec::Identity,
            extractor: &self.ex,
            weights: w,
            scale: self.scale,
            noise_scale: 0.1,
            cond: &self.cond,
        }
    }

    /// `L_rec` through the student's one-step restore, first pair.
    pub fn rec_through_net(&self, student: &DenoiserNet, backward: bool) -> (f64, Option<ParamSet>) {
        let w = LossWeights::default();
        let p = &self.pairs[0];
        let mut g = Graph::new();
        let b = student.bind(&mut g, true);
        let z1 = g.constant(diffusion::encode_lr(&Codec::Identity, &p.lr, self.scale).unwrap());
        let z0 = student.restore_graph(&mut g, &b, z1, &self.cond).unwrap();
        let x0 = g.clamp01(z0);
        let gt = g.constant(p.gt.clone());
        let l = rec_loss_graph(&mut g, x0, gt, &w, &self.ex).unwrap();
        let grads = backward.then(|| collect_grads(&g, &g.backward(l), &b));
        (g.scalar_value(l), grads)
    }

    /// One distillation term (`L_fl` or `L_rn`) with `z_ts` produced by the
    /// student, so the alignment term reaches the student through it.
    pub fn distill_term(
        &self,
        teacher: &DenoiserNet,
        student: &DenoiserNet,
        gamma: f64,
        backward: bool,
    ) -> (f64, Option<ParamSet>) {
        let (p, d) = (&self.pairs[0], &self.draws[0]);
        let mut g = Graph::new();
        let sb = student.bind(&mut g, true);
        let tb = teacher.bind(&mut g, false);
        let z1 = g.constant(diffusion::encode_lr(&Codec::Identity, &p.lr, self.scale).unwrap());
        let z_t = g.constant(diffusion::add_noise(&p.gt, d.t, &d.eps).unwrap());
        let z0s = student.restore_graph(&mut g, &sb, z1, &self.cond).unwrap();
        let teps = g.constant(d.eps.scale(d.t));
        let z_ts = g.add(z0s, teps);
        let l = losses::distill_loss_graph(&mut g, teacher, &tb, student, &sb, z_t, z_ts, d.t, &self.cond, gamma)
            .unwrap();
        let grads = backward.then(|| collect_grads(&g, &g.backward(l), &sb));
        (g.scalar_value(l), grads)
    }

    pub fn stage1(&self, student: &DenoiserNet, w: &LossWeights) -> losses::LossOutput {
        self.ctx(w)
            .loss_with_draws(&Trainable::full(student), &self.pairs, &self.draws)
            .unwrap()
    }

    pub fn stage1_adapted(&self, adapter: &LowRankAdapter, w: &LossWeights) -> losses::LossOutput {
        let tr = Trainable {
            net: &self.student,
            adapter: Some(adapter),
        };
        self.ctx(w).loss_with_draws(&tr, &self.pairs, &self.draws).unwrap()
    }

    pub fn latents(&self) -> Vec<Tensor> {
        self.pairs.iter().map(|p| p.gt.clone()).collect()
    }
}

impl Default for GradFixture {
    fn default() -> Self {
        Self::new()
    }
}

/// Criterion 1: every loss against central differences. Returns
/// `(loss name, max relative error, checked parameter count)`.
pub fn gradient_suite() -> Vec<(&'static str, f64, usize)> {
    let fx = GradFixture::new();
    let n_params = fx.student.param_count();
    assert!(n_params <= 5000, "gradient nets must stay under 5k params, got {n_params}");
    let mut out = Vec::new();

    // L_rec with respect to the image itself.
    let p = &fx.pairs[0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = p.gt.zip_map(&normal_tensor(&mut rng, p.gt.shape(), 0.05), |a, b| a + b).unwrap();
    let w = LossWeights::default();
    let mut g = Graph::new();
    let xv = g.param(x0.clone());
    let gt = g.constant(p.gt.clone());
    let l = rec_loss_graph(&mut g, xv, gt, &w, &fx.ex).unwrap();
    let grad = g.backward(l).wrt(&g, xv);
    let e_img = fd_tensor_rel_err(&x0, &grad, |x| losses::rec_loss(x, &p.gt, &w, &fx.ex).unwrap());
    let (_, grads) = fx.rec_through_net(&fx.student, true);
    let e_net = fd_max_rel_err(&fx.student.params, &grads.unwrap(), |ps| {
        fx.rec_through_net(&with_params(&fx.student, ps), false).0
    });
    out.push(("L_rec", e_img.max(e_net), n_params));

    for (name, teacher) in [("L_fl", &fx.teacher_f), ("L_rn", &fx.teacher_r)] {
        let gamma = w.gamma_time;
        let (_, grads) = fx.distill_term(teacher, &fx.student, gamma, true);
        let e = fd_max_rel_err(&fx.student.params, &grads.unwrap(), |ps| {
            fx.distill_term(teacher, &with_params(&fx.student, ps), gamma, false).0
        });
        out.push((name, e, n_params));
    }

    let s1 = fx.stage1(&fx.student, &w);
    let e = fd_max_rel_err(&fx.student.params, &s1.grads, |ps| {
        fx.stage1(&with_params(&fx.student, ps), &w).loss
    });
    out.push(("L_s1", e, n_params));

    let mut adapter = LowRankAdapter::new(&fx.student, 2, 1.0, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (_, t) in adapter.params.iter_mut() {
        t.add_assign(&normal_tensor(&mut rng, t.shape(), 0.05));
    }
    let s1a = fx.stage1_adapted(&adapter, &w);
    let e = fd_max_rel_err(&adapter.params, &s1a.grads, |ps| {
        let a = LowRankAdapter {
            params: ps.clone(),
            ..adapter.clone()
        };
        fx.stage1_adapted(&a, &w).loss
    });
    out.push(("L_s1 (adapter)", e, adapter.trainable_count()));

    let teacher = &fx.teacher_r;
    let z0 = &fx.pairs[0].gt;
    for (name, variant) in [
        ("L_ctrl", ControlVariant::Anchored),
        ("L_ctrl (propagated)", ControlVariant::Propagated),
    ] {
        let mut g = Graph::new();
        let sb = fx.student.bind(&mut g, true);
        let l = losses::control_loss_graph(&mut g, teacher, &fx.student, &sb, z0, 0.3, 0.8, &fx.cond, variant)
            .unwrap();
        let grads = collect_grads(&g, &g.backward(l), &sb);
        let e = fd_max_rel_err(&fx.student.params, &grads, |ps| {
            losses::control_loss(teacher, &with_params(&fx.student, ps), z0, 0.3, 0.8, &fx.cond, variant).unwrap()
        });
        out.push((name, e, n_params));
    }

    let latents = fx.latents();
    let pairs = [(0.2, 0.6), (0.45, 0.9)];
    let s2 = |net: &DenoiserNet| {
        stage2_loss_with_pairs(&latents, &pairs, teacher, &Trainable::full(net), &fx.cond, ControlVariant::Anchored)
            .unwrap()
    };
    let e = fd_max_rel_err(&fx.student.params, &s2(&fx.student).grads, |ps| {
        s2(&with_params(&fx.student, ps)).loss
    });
    out.push(("L_s2", e, n_params));

    let ex = &fx.ex;
    let cond = fx.cond.clone();
    let env = TrainEnv {
        codec: &Codec::Identity,
        extractor: ex,
        scale: fx.scale,
        noise_scale: 0.1,
        cond: &cond,
    };
    // The noise branch sees the restorer output as a detached constant, so
    // only the restore branch is a differentiable function of the weights.
    let obj = TeacherObjective {
        percep_weight: 2.0,
        eps_weight: 0.0,
    };
    let batch: Vec<&Pair> = fx.pairs.iter().collect();
    let tl = |net: &DenoiserNet| {
        training::teacher_loss(net, &env, &obj, &batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    };
    let e = fd_max_rel_err(&fx.student.params, &tl(&fx.student).grads, |ps| {
        tl(&with_params(&fx.student, ps)).loss
    });
    out.push(("L_teacher (restore branch)", e, n_params));
    out
}

fn ulp_close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 4.0 * f64::EPSILON * scale.max(1.0)
}

/// Criterion 2: composition law, noise recovery and the divergence of the
/// `t'`-scaled update.
pub fn flow_algebra() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let z0 = normal_tensor(&mut rng, &[3, 6, 5], 1.0);
        let e = normal_tensor(&mut rng, &[3, 6, 5], 1.0);
        let (a, b) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (t, tp) = if a < b { (a, b) } else { (b, a) };
        let direct = diffusion::add_noise(&z0, tp, &e).map_err(|x| x.to_string())?;
        let z_t = diffusion::add_noise(&z0, t, &e).map_err(|x| x.to_string())?;
        let composed = diffusion::step_noise(&z_t, t, tp, &e).map_err(|x| x.to_string())?;
        for i in 0..direct.len() {
            let scale = z0.data()[i].abs() + e.data()[i].abs();
            if !ulp_close(direct.data()[i], composed.data()[i], scale) {
                return Err(format!(
                    "case {case}: composition {} vs {} at {i}",
                    direct.data()[i],
                    composed.data()[i]
                ));
            }
        }
        if t > 1e-3 {
            for i in 0..e.len() {
                let rec = (z_t.data()[i] - z0.data()[i]) / t;
                let tol = 8.0 * f64::EPSILON * (z0.data()[i].abs() + e.data()[i].abs()).max(1.0) / t;
                if (rec - e.data()[i]).abs() > tol {
                    return Err(format!("case {case}: eps recovery {rec} vs {}", e.data()[i]));
                }
            }
        }
        let variant = diffusion::step_noise_scaled_by_target(&z_t, tp, &e).map_err(|x| x.to_string())?;
        if t > 0.0 {
            let gap = variant.zip_map(&direct, |x, y| (x - y).abs()).unwrap().max_abs();
            if gap == 0.0 {
                return Err(format!("case {case}: t'-scaled update coincides with the additive flow"));
            }
            let expected = e.scale(t);
            let diff = variant.zip_map(&direct, |x, y| x - y).unwrap();
            if diff.zip_map(&expected, |x, y| (x - y).abs()).unwrap().max_abs() > 1e-12 {
                return Err(format!("case {case}: divergence is not t * eps"));
            }
        }
    }
    let z0 = Tensor::full(&[1, 2, 2], 0.25);
    let e = Tensor::full(&[1, 2, 2], 0.5);
    if diffusion::add_noise(&z0, 0.0, &e).unwrap() != z0 {
        return Err("t = 0 is not the identity".into());
    }
    if diffusion::add_noise(&z0, 1.0, &e).unwrap() != Tensor::full(&[1, 2, 2], 0.75) {
        return Err("t = 1 is not z0 + eps".into());
    }
    let z_t = diffusion::add_noise(&z0, 0.37, &e).unwrap();
    if diffusion::step_noise(&z_t, 0.37, 0.37, &e).unwrap() != z_t {
        return Err("t' = t is not the identity".into());
    }
    Ok(())
}

/// Criterion 3: every loss is exactly zero on its zero case, and the metric
/// identities hold.
pub fn zero_cases() -> Result<(), String> {
    let fail = |m: &str| Err(m.to_string());
    let ex = PercepExtractor::new(7, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0);
    let c = cond();

    if losses::rec_loss(&x, &x, &LossWeights::default(), &ex).unwrap() != 0.0 {
        return fail("rec_loss(x, x) != 0");
    }
    let net = jittered(4, tiny_config(), 0.05);
    let z = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
    let z2 = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
    if losses::distill_loss(&net, &net, &z, &z, 0.4, &c, 5.5).unwrap() != 0.0 {
        return fail("distill_loss with teacher = student and z_ts = z_t != 0");
    }
    if losses::distill_loss(&net, &net.clone(), &z, &z2, 0.4, &c, 0.0).unwrap() != 0.0 {
        return fail("distill_loss with gamma 0 and matching outputs != 0");
    }

    // Stage 1 with all weights zero.
    let fx = GradFixture::new();
    let out = fx.stage1(&fx.student, &LossWeights::zero());
    if out.loss != 0.0 || out.grads.iter().any(|(_, g)| g.max_abs() != 0.0) {
        return fail("stage-1 loss with zero weights is not 0 with zero grads");
    }
    // Perfect student: scale 1, untrained nets all predict 0, so x0 = GT.
    let init = DenoiserNet::init(5, tiny_config()).unwrap();
    let pairs: Vec<Pair> = (0..2)
        .map(|_| {
            let gt = rand_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0);
            Pair { lr: gt.clone(), gt }
        })
        .collect();
    let draws: Vec<Stage1Draw> = pairs
        .iter()
        .map(|p| Stage1Draw {
            t: 0.5,
            eps: normal_tensor(&mut rng, p.gt.shape(), 0.1),
        })
        .collect();
    let w = LossWeights::default();
    let ctx = Stage1Context {
        teacher_f: &init,
        teacher_r: &init,
        codec: &Codec::Identity,
        extractor: &ex,
        weights: &w,
        scale: 1,
        noise_scale: 0.1,
        cond: &c,
    };
    let out = ctx
        .loss_with_draws(&Trainable::full(&init), &pairs, &draws)
        .map_err(|e| e.to_string())?;
    if out.loss != 0.0 {
        return Err(format!("perfect-student stage-1 loss = {}", out.loss));
    }

    // Constant teacher field matched by the student, dyadic timesteps.
    let v = [0.5, -0.25, 0.125];
    let field = ConstantField(per_channel(&v, 8, 8));
    let student = constant_net(&v);
    for variant in [ControlVariant::Anchored, ControlVariant::Propagated] {
        let l = losses::control_loss(&field, &student, &z, 0.25, 0.75, &c, variant).unwrap();
        if l != 0.0 {
            return Err(format!("control loss at the constant field = {l}"));
        }
    }
    let latents = vec![z.clone(), z2.clone()];
    let s2 = stage2_loss_with_pairs(
        &latents,
        &[(0.25, 0.5), (0.125, 0.875)],
        &field,
        &Trainable::full(&student),
        &c,
        ControlVariant::Anchored,
    )
    .unwrap();
    if s2.loss != 0.0 {
        return Err(format!("stage-2 loss with student = constant teacher = {}", s2.loss));
    }

    if eval::psnr(&x, &x).unwrap() != eval::PSNR_CAP {
        return fail("psnr(x, x) is not the cap");
    }
    if eval::ssim(&x, &x).unwrap() != 1.0 {
        return Err(format!("ssim(x, x) = {}", eval::ssim(&x, &x).unwrap()));
    }
    if ex.dist(&x, &x).unwrap() != 0.0 {
        return fail("percep(x, x) != 0");
    }
    let set: Vec<Tensor> = (0..6).map(|_| rand_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0)).collect();
    let fid = eval::toy_fid(&set, &set, &ex).unwrap();
    if fid.abs() > 1e-6 {
        return Err(format!("toy_fid(X, X) = {fid}"));
    }
    Ok(())
}

pub fn per_channel(v: &[f64], h: usize, w: usize) -> Tensor {
    let data = v.iter().flat_map(|&x| std::iter::repeat_n(x, h * w)).collect();
    Tensor::from_vec(&[v.len(), h, w], data).unwrap()
}

/// A tiny net whose output is exactly the per-channel constant `v`.
pub fn constant_net(v: &[f64]) -> DenoiserNet {
    let mut net = DenoiserNet::init(6, tiny_config()).unwrap();
    *net.params.get_mut("out.b").unwrap() = Tensor::from_vec(&[v.len()], v.to_vec()).unwrap();
    net
}

/// Criterion 7: Stage-2 training against a constant teacher field. Returns
/// the worst RMS deviation `sqrt(mean((S(z_t, t) - v)^2))` over probes.
pub fn constant_field_recovery() -> Result<f64, String> {
    let v = [0.3, -0.2, 0.1];
    let field = ConstantField(per_channel(&v, 8, 8));
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let latents: Vec<Tensor> = (0..8).map(|_| rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0)).collect();
    let init = jittered(8, tiny_config(), 0.02);
    let c = cond();
    let cfg = TrainConfig {
        lr: 3e-3,
        steps: 1500,
        batch_size: 4,
        seed: 32,
        ..TrainConfig::default()
    };
    let (student, log) =
        training::run_stage2(&init, &field, &latents, &cfg, cfg.steps, &c, ControlVariant::Anchored, None)
            .map_err(|e| e.to_string())?;
    let losses = log.losses();
    if losses.last() >= losses.first() {
        return Err("control loss did not decrease".into());
    }
    let mut worst: f64 = 0.0;
    for z0 in latents.iter().take(4) {
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let z_t = diffusion::add_noise(z0, t, &field.0).unwrap();
            let s = student.forward(&z_t, t, &c).unwrap();
            let d = s.zip_map(&field.0, |a, b| a - b).unwrap();
            worst = worst.max((d.sum_sq() / d.len() as f64).sqrt());
        }
    }
    Ok(worst)
}

/// Criterion 8: PSNR of the alpha sweep on `x + n1` / `x + n2`. Returns
/// `(psnr at 0, psnr at 0.5, psnr at 1)`.
pub fn blend_oracle() -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let ex = PercepExtractor::new(7, 3);
    let gt: Vec<Tensor> = (0..8).map(|_| rand_tensor(&mut rng, &[3, 16, 16], 0.25, 0.75)).collect();
    let noisy = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
        gt.iter()
            .map(|x| x.zip_map(&normal_tensor(rng, x.shape(), 0.05), |a, b| a + b).unwrap())
            .collect()
    };
    let xf = noisy(&mut rng);
    let xr = noisy(&mut rng);
    let rows = eval::sweep_alpha(&xf, &xr, &gt, &[0.0, 0.5, 1.0], &ex).unwrap();
    (rows[0].psnr, rows[1].psnr, rows[2].psnr)
}

/// Criterion 9: `(initial residual, residual after 10 iterations, worst
/// deviation from (1 - rho)^k on the identity operator)`.
pub fn dc_descent() -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let sample = DegradationSample {
        blur_sigma: 1.0,
        noise_sigma: 0.0,
        kernel: degradation::gaussian_kernel(1.0, 7).unwrap(),
        scale: 4,
    };
    let x_true = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
    let y = degradation::apply_operator(&x_true, &sample).unwrap();
    let x0 = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
    let r0 = eval::dc_residual(&x0, &y, &sample).unwrap();
    let x10 = eval::data_consistency_refine(&x0, &y, &sample, 0.1, 10).unwrap();
    let r10 = eval::dc_residual(&x10, &y, &sample).unwrap();

    let identity = DegradationSample {
        blur_sigma: 0.0,
        noise_sigma: 0.0,
        kernel: degradation::gaussian_kernel(0.0, 3).unwrap(),
        scale: 1,
    };
    let y = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
    let x0 = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
    let base = eval::dc_residual(&x0, &y, &identity).unwrap();
    let mut worst: f64 = 0.0;
    for rho in [0.1, 0.5] {
        for k in 0..=20 {
            let xk = eval::data_consistency_refine(&x0, &y, &identity, rho, k).unwrap();
            let rk = eval::dc_residual(&xk, &y, &identity).unwrap();
            worst = worst.max((rk - (1.0 - rho).powi(k as i32) * base).abs());
        }
    }
    (r0, r10, worst)
}
