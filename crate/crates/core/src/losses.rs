//! Training objectives for both distillation stages and the perceptual
//! distance used in place of a pretrained-feature metric.
//!
//! Every squared norm is taken as a mean over elements, so loss magnitudes do
//! not depend on patch size.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::degradation::Pair;
use crate::diffusion::{self, check_timestep};
use crate::error::{Error, Result};
use crate::nets::{bind_adapted, collect_grads, Bound, Codec, DenoiserNet, EpsField, LowRankAdapter, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_lp: f64,
    pub lambda_fl: f64,
    pub lambda_rn: f64,
    pub gamma_time: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l2: 1.0,
            lambda_lp: 2.0,
            lambda_fl: 2.0,
            lambda_rn: 1.0,
            gamma_time: 5.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_l2: 0.0,
            lambda_lp: 0.0,
            lambda_fl: 0.0,
            lambda_rn: 0.0,
            gamma_time: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_l2", self.lambda_l2),
            ("lambda_lp", self.lambda_lp),
            ("lambda_fl", self.lambda_fl),
            ("lambda_rn", self.lambda_rn),
            ("gamma_time", self.gamma_time),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("weights.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Fixed random convolutional pyramid. At each level the squared filter
/// responses are pooled over 4x4 windows (a local band-energy map, so
/// features are insensitive to the exact phase of fine detail) and then
/// unit-normalized across channels at every position. The next level sees
/// the pooled, rectified responses. First-level filters have zero mean so
/// flat regions carry no energy.
#[derive(Clone, Debug, PartialEq)]
pub struct PercepExtractor {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

const PERCEP_WIDTHS: [usize; 3] = [8, 16, 16];
const PERCEP_EPS: f64 = 1e-6;
const PERCEP_BIAS_STD: f64 = 0.5;

fn pool_if_possible(g: &mut Graph, x: Var) -> Var {
    let s = g.value(x).shape();
    if s[1] >= 2 && s[2] >= 2 {
        g.avg_pool2(x)
    } else {
        x
    }
}

impl PercepExtractor {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ci = channels;
        let (mut weights, mut biases) = (Vec::new(), Vec::new());
        let bd = Normal::new(0.0, PERCEP_BIAS_STD).unwrap();
        for (l, &co) in PERCEP_WIDTHS.iter().enumerate() {
            let d = Normal::new(0.0, (1.0 / (9 * ci) as f64).sqrt()).unwrap();
            let mut w: Vec<f64> = (0..co * ci * 9).map(|_| d.sample(&mut rng)).collect();
            if l == 0 {
                for filt in w.chunks_mut(ci * 9) {
                    let m = filt.iter().sum::<f64>() / filt.len() as f64;
                    filt.iter_mut().for_each(|v| *v -= m);
                }
            }
            weights.push(Tensor::from_vec(&[co, ci, 3, 3], w).unwrap());
            biases.push(Tensor::from_vec(&[co], (0..co).map(|_| bd.sample(&mut rng)).collect()).unwrap());
            ci = co;
        }
        Self { weights, biases }
    }

    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.iter().map(|w| w.shape()[0]).sum()
    }

    pub fn features_graph(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let wv = g.constant(w.clone());
            let r = g.conv2d(h, wv, None);
            let e = g.mul(r, r);
            let e = pool_if_possible(g, e);
            let e = pool_if_possible(g, e);
            out.push(g.unit_norm_channels(e, PERCEP_EPS));
            let bv = g.constant(b.clone());
            let f = g.add_channel(r, bv);
            let f = g.silu(f);
            h = pool_if_possible(g, f);
        }
        out
    }

    /// Sum over levels of the per-pixel squared feature distance, averaged
    /// over pixels.
    pub fn dist_graph(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        g.value(a).check_same_shape(g.value(b))?;
        let fa = self.features_graph(g, a);
        let fb = self.features_graph(g, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let c = g.value(x).shape()[0] as f64;
            let d = g.sub(x, y);
            let m = g.mean_sq(d);
            let m = g.scale(m, c);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        Ok(total.expect("extractor has at least one level"))
    }

    pub fn dist(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let d = self.dist_graph(&mut g, av, bv)?;
        Ok(g.scalar_value(d))
    }

    /// Spatially averaged normalized features of every level, concatenated.
    pub fn pooled_features(&self, x: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut out = Vec::with_capacity(self.feature_dim());
        for f in self.features_graph(&mut g, xv) {
            let t = g.value(f);
            let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
            for ch in 0..c {
                out.push(t.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64);
            }
        }
        out
    }
}

/// `lambda_l2 * mse(x0, gt) + lambda_lp * percep(x0, gt)` on the tape.
pub fn rec_loss_graph(
    g: &mut Graph,
    x0: Var,
    gt: Var,
    w: &LossWeights,
    ex: &PercepExtractor,
) -> Result<Var> {
    g.value(x0).check_same_shape(g.value(gt))?;
    let d = g.sub(x0, gt);
    let mse = g.mean_sq(d);
    let l2 = g.scale(mse, w.lambda_l2);
    if w.lambda_lp == 0.0 {
        return Ok(l2);
    }
    let p = ex.dist_graph(g, x0, gt)?;
    let lp = g.scale(p, w.lambda_lp);
    Ok(g.add(l2, lp))
}

pub fn rec_loss(x0: &Tensor, gt: &Tensor, w: &LossWeights, ex: &PercepExtractor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x0.clone()), g.constant(gt.clone()));
    let l = rec_loss_graph(&mut g, a, b, w, ex)?;
    Ok(g.scalar_value(l))
}

/// A network bound to the tape, optionally through an adapter.
pub struct Trainable<'a> {
    pub net: &'a DenoiserNet,
    pub adapter: Option<&'a LowRankAdapter>,
}

impl<'a> Trainable<'a> {
    pub fn full(net: &'a DenoiserNet) -> Self {
        Self { net, adapter: None }
    }

    /// Returns the effective weight bindings and the bindings to differentiate.
    pub fn bind(&self, g: &mut Graph) -> Result<(Bound, Bound)> {
        match self.adapter {
            None => {
                let b = self.net.bind(g, true);
                Ok((b.clone(), b))
            }
            Some(a) => bind_adapted(g, self.net, a, false, true),
        }
    }
}

/// Both distillation terms for one teacher:
/// `|T(z_ts) - S(z_ts)|^2 + gamma_time * |T(z_ts) - T(z_t)|^2`.
/// Teacher weights enter as constants; its input `z_ts` stays on the tape so
/// the alignment term reaches the student through the restored latent.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss_graph(
    g: &mut Graph,
    teacher: &DenoiserNet,
    teacher_bound: &Bound,
    student: &DenoiserNet,
    student_bound: &Bound,
    z_t: Var,
    z_ts: Var,
    t: f64,
    c: &[f64],
    gamma_time: f64,
) -> Result<Var> {
    g.value(z_t).check_same_shape(g.value(z_ts))?;
    let et_s = teacher.forward_graph(g, teacher_bound, z_ts, t, c)?;
    let es_s = student.forward_graph(g, student_bound, z_ts, t, c)?;
    let d1 = g.sub(et_s, es_s);
    let first = g.mean_sq(d1);
    if gamma_time == 0.0 {
        return Ok(first);
    }
    let et = teacher.forward_graph(g, teacher_bound, z_t, t, c)?;
    let d2 = g.sub(et_s, et);
    let second = g.mean_sq(d2);
    let second = g.scale(second, gamma_time);
    Ok(g.add(first, second))
}

/// Value-only evaluation of [`distill_loss_graph`].
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    teacher: &DenoiserNet,
    student: &DenoiserNet,
    z_t: &Tensor,
    z_ts: &Tensor,
    t: f64,
    c: &[f64],
    gamma_time: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let tb = teacher.bind(&mut g, false);
    let sb = student.bind(&mut g, false);
    let (a, b) = (g.constant(z_t.clone()), g.constant(z_ts.clone()));
    let l = distill_loss_graph(&mut g, teacher, &tb, student, &sb, a, b, t, c, gamma_time)?;
    Ok(g.scalar_value(l))
}

/// Scalar loss, gradients for the trainable parameters and named components.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamSet,
    pub parts: Vec<(&'static str, f64)>,
}

/// Everything Stage 1 needs besides the student.
pub struct Stage1Context<'a> {
    pub teacher_f: &'a DenoiserNet,
    pub teacher_r: &'a DenoiserNet,
    pub codec: &'a Codec,
    pub extractor: &'a PercepExtractor,
    pub weights: &'a LossWeights,
    pub scale: usize,
    pub noise_scale: f64,
    pub cond: &'a [f64],
}

/// Per-item random draws for Stage 1: one timestep and one noise tensor,
/// shared between the ground-truth and student branches.
pub struct Stage1Draw {
    pub t: f64,
    pub eps: Tensor,
}

impl Stage1Context<'_> {
    pub fn draw(&self, latent_like: &Tensor, rng: &mut impl Rng) -> Stage1Draw {
        let t = diffusion::sample_timestep(rng);
        let eps = diffusion::gaussian_like(latent_like, self.noise_scale, rng);
        Stage1Draw { t, eps }
    }

    /// Stage-1 objective on a batch with given draws, in the order:
    /// encode LR and GT, noise the GT latent, restore, decode, noise the
    /// restored latent, reconstruction loss, both distillation losses.
    pub fn loss_with_draws(
        &self,
        student: &Trainable,
        batch: &[Pair],
        draws: &[Stage1Draw],
    ) -> Result<LossOutput> {
        if batch.is_empty() {
            return Err(Error::EmptyData);
        }
        if batch.len() != draws.len() {
            return Err(Error::LengthMismatch(batch.len(), draws.len()));
        }
        let w = self.weights;
        let mut g = Graph::new();
        let (sb, trainable) = student.bind(&mut g)?;
        let codec_b = self.codec.bind(&mut g, false);
        let tf_b = self.teacher_f.bind(&mut g, false);
        let tr_b = self.teacher_r.bind(&mut g, false);
        let inv_n = 1.0 / batch.len() as f64;
        let mut total: Option<Var> = None;
        let (mut rec_sum, mut fl_sum, mut rn_sum) = (0.0, 0.0, 0.0);
        for (pair, draw) in batch.iter().zip(draws) {
            let z1 = g.constant(diffusion::encode_lr(self.codec, &pair.lr, self.scale)?);
            let z0 = g.constant(self.codec.encode(&pair.gt)?);
            let eps = g.constant(draw.eps.clone());
            let teps = g.scale(eps, draw.t);
            let z_t = g.add(z0, teps);
            let z0s = student.net.restore_graph(&mut g, &sb, z1, self.cond)?;
            let x0 = self.codec.decode_graph(&mut g, &codec_b, z0s)?;
            let z_ts = g.add(z0s, teps);
            let gt = g.constant(pair.gt.clone());
            let mut item = rec_loss_graph(&mut g, x0, gt, w, self.extractor)?;
            rec_sum += g.scalar_value(item);
            for (lambda, teacher, tb, acc) in [
                (w.lambda_fl, self.teacher_f, &tf_b, &mut fl_sum),
                (w.lambda_rn, self.teacher_r, &tr_b, &mut rn_sum),
            ] {
                if lambda == 0.0 {
                    continue;
                }
                let d = distill_loss_graph(
                    &mut g, teacher, tb, student.net, &sb, z_t, z_ts, draw.t, self.cond,
                    w.gamma_time,
                )?;
                *acc += g.scalar_value(d);
                let d = g.scale(d, lambda);
                item = g.add(item, d);
            }
            let item = g.scale(item, inv_n);
            total = Some(match total {
                Some(t) => g.add(t, item),
                None => item,
            });
        }
        let root = total.unwrap();
        let grads = g.backward(root);
        Ok(LossOutput {
            loss: g.scalar_value(root),
            grads: collect_grads(&g, &grads, &trainable),
            parts: vec![
                ("rec", rec_sum * inv_n),
                ("fl", fl_sum * inv_n),
                ("rn", rn_sum * inv_n),
            ],
        })
    }

    pub fn loss(
        &self,
        student: &Trainable,
        batch: &[Pair],
        rng: &mut impl Rng,
    ) -> Result<LossOutput> {
        let draws: Vec<Stage1Draw> = batch
            .iter()
            .map(|p| {
                let like = self.codec.encode(&p.gt)?;
                Ok(self.draw(&like, rng))
            })
            .collect::<Result<_>>()?;
        self.loss_with_draws(student, batch, &draws)
    }
}

/// Which teacher evaluation points the control loss uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariant {
    /// Teacher evaluated at `z0` for both timesteps; `z_t = z0 + t T(z0, t)`.
    #[default]
    Anchored,
    /// Teacher evaluated at `z_t` and at `z_t' = z_t + t' T(z0, t)`.
    Propagated,
}

/// `|t T(a, t) - t' T(b, t') + (t' - t) S(z_t, t)|^2` with the evaluation
/// points `a`, `b` chosen by `variant`.
#[allow(clippy::too_many_arguments)]
pub fn control_loss_graph(
    g: &mut Graph,
    teacher: &dyn EpsField,
    student: &DenoiserNet,
    student_bound: &Bound,
    z0: &Tensor,
    t: f64,
    t_prime: f64,
    c: &[f64],
    variant: ControlVariant,
) -> Result<Var> {
    check_timestep(t)?;
    check_timestep(t_prime)?;
    if t_prime < t {
        return Err(Error::ReversedInterval { t, t_prime });
    }
    let dt = t_prime - t;
    let e0 = teacher.eps(z0, t, c)?;
    let z_t = z0.zip_map(&e0, |z, e| z + t * e)?;
    let (a, b) = match variant {
        ControlVariant::Anchored => (e0.clone(), teacher.eps(z0, t_prime, c)?),
        ControlVariant::Propagated => {
            let z_tp = z_t.zip_map(&e0, |z, e| z + t_prime * e)?;
            (teacher.eps(&z_t, t, c)?, teacher.eps(&z_tp, t_prime, c)?)
        }
    };
    let target = a.zip_map(&b, |x, y| t * x - t_prime * y)?;
    let zt = g.constant(z_t);
    let es = student.forward_graph(g, student_bound, zt, t, c)?;
    let es = g.scale(es, dt);
    let target = g.constant(target);
    let r = g.add(target, es);
    Ok(g.mean_sq(r))
}

#[allow(clippy::too_many_arguments)]
pub fn control_loss(
    teacher: &dyn EpsField,
    student: &DenoiserNet,
    z0: &Tensor,
    t: f64,
    t_prime: f64,
    c: &[f64],
    variant: ControlVariant,
) -> Result<f64> {
    let mut g = Graph::new();
    let sb = student.bind(&mut g, false);
    let l = control_loss_graph(&mut g, teacher, student, &sb, z0, t, t_prime, c, variant)?;
    Ok(g.scalar_value(l))
}

/// Mean control loss over a batch with one `(t, t')` pair per item.
pub fn stage2_loss_with_pairs(
    batch_z0: &[Tensor],
    pairs: &[(f64, f64)],
    teacher: &dyn EpsField,
    student: &Trainable,
    c: &[f64],
    variant: ControlVariant,
) -> Result<LossOutput> {
    if batch_z0.is_empty() {
        return Err(Error::EmptyData);
    }
    if batch_z0.len() != pairs.len() {
        return Err(Error::LengthMismatch(batch_z0.len(), pairs.len()));
    }
    let mut g = Graph::new();
    let (sb, trainable) = student.bind(&mut g)?;
    let inv_n = 1.0 / batch_z0.len() as f64;
    let mut total: Option<Var> = None;
    for (z0, &(t, tp)) in batch_z0.iter().zip(pairs) {
        let l = control_loss_graph(&mut g, teacher, student.net, &sb, z0, t, tp, c, variant)?;
        let l = g.scale(l, inv_n);
        total = Some(match total {
            Some(s) => g.add(s, l),
            None => l,
        });
    }
    let root = total.unwrap();
    let grads = g.backward(root);
    Ok(LossOutput {
        loss: g.scalar_value(root),
        grads: collect_grads(&g, &grads, &trainable),
        parts: vec![("ctrl", g.scalar_value(root))],
    })
}

pub fn stage2_loss(
    batch_z0: &[Tensor],
    teacher: &dyn EpsField,
    student: &Trainable,
    rng: &mut impl Rng,
    c: &[f64],
    variant: ControlVariant,
) -> Result<LossOutput> {
    let pairs: Vec<(f64, f64)> = batch_z0
        .iter()
        .map(|_| diffusion::sample_timestep_pair(rng))
        .collect();
    stage2_loss_with_pairs(batch_z0, &pairs, teacher, student, c, variant)
}
