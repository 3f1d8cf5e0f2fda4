use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{bind, Bound, EpsField, ParamSet};
use crate::autograd::{
    add_channel_forward, conv2d_forward, matvec_forward, modulate_forward, silu_forward, Graph,
    Var,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub width: usize,
    pub depth: usize,
    pub t_embed_dim: usize,
    /// Latent channels seen by the network (3 under the identity codec).
    pub channels: usize,
    pub cond_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 8,
            depth: 2,
            t_embed_dim: 8,
            channels: 3,
            cond_dim: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.depth < 1 {
            return Err(Error::Validation("net.width and net.depth must be >= 1".into()));
        }
        if self.t_embed_dim < 2 || !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::Validation("net.t_embed_dim must be even and >= 2".into()));
        }
        if self.channels < 1 {
            return Err(Error::Validation("net.channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding with frequencies `(pi/2) * 2^k`; sines first, then cosines.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for k in 0..half {
        let w = std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64;
        e[k] = (w * t).sin();
        e[half + k] = (w * t).cos();
    }
    e
}

/// Residual CNN `eps(z, t, c)` with timestep-modulated blocks and a
/// zero-initialized output head.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    pub config: NetConfig,
    pub params: ParamSet,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::from_vec(shape, (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

impl DenoiserNet {
    pub fn init(seed: u64, config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, ci, t, dc) = (
            config.width,
            config.channels,
            config.t_embed_dim,
            config.cond_dim,
        );
        let mut p = ParamSet::new();
        p.insert("in.w", normal_tensor(&mut rng, &[w, ci, 3, 3], (1.0 / (9 * ci) as f64).sqrt()));
        p.insert("in.b", Tensor::zeros(&[w]));
        p.insert("cond.w", normal_tensor(&mut rng, &[w, dc], 0.1));
        let conv_std = (1.0 / (9 * w) as f64).sqrt();
        let mod_std = 0.5 / (t as f64).sqrt();
        for b in 0..config.depth {
            p.insert(format!("block{b}.conv1.w"), normal_tensor(&mut rng, &[w, w, 3, 3], conv_std));
            p.insert(format!("block{b}.conv1.b"), Tensor::zeros(&[w]));
            p.insert(format!("block{b}.mod_scale.w"), normal_tensor(&mut rng, &[w, t], mod_std));
            p.insert(format!("block{b}.mod_scale.b"), Tensor::zeros(&[w]));
            p.insert(format!("block{b}.mod_shift.w"), normal_tensor(&mut rng, &[w, t], mod_std));
            p.insert(format!("block{b}.mod_shift.b"), Tensor::zeros(&[w]));
            p.insert(format!("block{b}.conv2.w"), normal_tensor(&mut rng, &[w, w, 3, 3], conv_std));
            p.insert(format!("block{b}.conv2.b"), Tensor::zeros(&[w]));
        }
        p.insert("out.w", Tensor::zeros(&[ci, w, 3, 3]));
        p.insert("out.b", Tensor::zeros(&[ci]));
        Ok(Self { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_inputs(&self, z: &Tensor, t: f64, c: &[f64]) -> Result<()> {
        let s = z.shape();
        if s.len() != 3 || s[0] != self.config.channels {
            return Err(Error::ShapeMismatch(
                s.to_vec(),
                vec![self.config.channels, 0, 0],
            ));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimestepOutOfRange(t));
        }
        if c.len() != self.config.cond_dim {
            return Err(Error::ShapeMismatch(vec![c.len()], vec![self.config.cond_dim]));
        }
        Ok(())
    }

    /// Tape version of the forward pass over already-bound parameters.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        z: Var,
        t: f64,
        c: &[f64],
    ) -> Result<Var> {
        self.check_inputs(g.value(z), t, c)?;
        let emb = g.constant(Tensor::from_vec(&[self.config.t_embed_dim], time_embedding(t, self.config.t_embed_dim))?);
        let mut h = g.conv2d(z, p.get("in.w"), Some(p.get("in.b")));
        if self.config.cond_dim > 0 {
            let cv = g.constant(Tensor::from_vec(&[c.len()], c.to_vec())?);
            let proj = g.matvec(p.get("cond.w"), cv);
            h = g.add_channel(h, proj);
        }
        for b in 0..self.config.depth {
            let name = |s: &str| format!("block{b}.{s}");
            let r = g.silu(h);
            let r = g.conv2d(r, p.get(&name("conv1.w")), Some(p.get(&name("conv1.b"))));
            let s = g.matvec(p.get(&name("mod_scale.w")), emb);
            let s = g.add(s, p.get(&name("mod_scale.b")));
            let sh = g.matvec(p.get(&name("mod_shift.w")), emb);
            let sh = g.add(sh, p.get(&name("mod_shift.b")));
            let r = g.modulate(r, s, sh);
            let r = g.silu(r);
            let r = g.conv2d(r, p.get(&name("conv2.w")), Some(p.get(&name("conv2.b"))));
            h = g.add(h, r);
        }
        let h = g.silu(h);
        Ok(g.conv2d(h, p.get("out.w"), Some(p.get("out.b"))))
    }

    /// Eager forward; computes the same values as [`Self::forward_graph`]
    /// without keeping intermediates.
    pub fn forward(&self, z: &Tensor, t: f64, c: &[f64]) -> Result<Tensor> {
        self.check_inputs(z, t, c)?;
        let p = |n: &str| self.params.get(n).unwrap_or_else(|| panic!("missing {n}"));
        let emb = Tensor::from_vec(&[self.config.t_embed_dim], time_embedding(t, self.config.t_embed_dim))?;
        let mut h = conv2d_forward(z, p("in.w"), Some(p("in.b")));
        if self.config.cond_dim > 0 {
            let cv = Tensor::from_vec(&[c.len()], c.to_vec())?;
            h = add_channel_forward(&h, &matvec_forward(p("cond.w"), &cv));
        }
        for b in 0..self.config.depth {
            let name = |s: &str| format!("block{b}.{s}");
            let r = silu_forward(&h);
            let r = conv2d_forward(&r, p(&name("conv1.w")), Some(p(&name("conv1.b"))));
            let s = matvec_forward(p(&name("mod_scale.w")), &emb)
                .zip_map(p(&name("mod_scale.b")), |a, b| a + b)?;
            let sh = matvec_forward(p(&name("mod_shift.w")), &emb)
                .zip_map(p(&name("mod_shift.b")), |a, b| a + b)?;
            let r = modulate_forward(&r, &s, &sh);
            let r = silu_forward(&r);
            let r = conv2d_forward(&r, p(&name("conv2.w")), Some(p(&name("conv2.b"))));
            h = h.zip_map(&r, |a, b| a + b)?;
        }
        Ok(conv2d_forward(&silu_forward(&h), p("out.w"), Some(p("out.b"))))
    }

    /// One-step restoration: treats `z1` as `z0 + eps` at `t = 1` and
    /// removes the predicted noise, `z1 - eps(z1, 1, c)`.
    pub fn restore(&self, z1: &Tensor, c: &[f64]) -> Result<Tensor> {
        let d = self.forward(z1, 1.0, c)?;
        z1.zip_map(&d, |a, b| a - b)
    }

    /// Tape version of [`Self::restore`].
    pub fn restore_graph(&self, g: &mut Graph, p: &Bound, z1: Var, c: &[f64]) -> Result<Var> {
        let d = self.forward_graph(g, p, z1, 1.0, c)?;
        Ok(g.sub(z1, d))
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        bind(g, &self.params, trainable)
    }
}

impl EpsField for DenoiserNet {
    fn eps(&self, z: &Tensor, t: f64, c: &[f64]) -> Result<Tensor> {
        self.forward(z, t, c)
    }
}
