//! Additive noise flow `z_t = z0 + t * eps`, timestep sampling, the one-step
//! restorer and the timestep-knob inference path.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor};
use crate::nets::{Codec, DenoiserNet, EpsField};
use crate::tensor::Tensor;

pub fn check_timestep(t: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(Error::TimestepOutOfRange(t))
    }
}

pub fn add_noise(z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    check_timestep(t)?;
    z0.zip_map(eps, |z, e| z + t * e)
}

/// Advances a noised latent from `t` to `t_prime` along the same draw.
pub fn step_noise(z_t: &Tensor, t: f64, t_prime: f64, eps: &Tensor) -> Result<Tensor> {
    check_timestep(t)?;
    check_timestep(t_prime)?;
    if t_prime < t {
        return Err(Error::ReversedInterval { t, t_prime });
    }
    let dt = t_prime - t;
    z_t.zip_map(eps, |z, e| z + dt * e)
}

/// The alternative update that scales the step by `t_prime` instead of the
/// interval length. Kept only so the two can be compared.
pub fn step_noise_scaled_by_target(z_t: &Tensor, t_prime: f64, eps: &Tensor) -> Result<Tensor> {
    z_t.zip_map(eps, |z, e| z + t_prime * e)
}

/// Gaussian draw with standard deviation `sigma`, shaped like `like`.
pub fn gaussian_like(like: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..like.len())
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            sigma * v
        })
        .collect();
    Tensor::from_vec(like.shape(), data).expect("shape matches")
}

/// Uniform on `(0, 1)`.
pub fn sample_timestep(rng: &mut impl Rng) -> f64 {
    loop {
        let t: f64 = rng.gen();
        if t > 0.0 {
            return t;
        }
    }
}

/// Uniform on the triangle `0 < t < t' < 1`, by sorting two uniforms.
pub fn sample_timestep_pair(rng: &mut impl Rng) -> (f64, f64) {
    loop {
        let (a, b) = (sample_timestep(rng), sample_timestep(rng));
        if a != b {
            return if a < b { (a, b) } else { (b, a) };
        }
    }
}

/// Bicubic upscale of the LR input to the HR grid, then encode.
pub fn encode_lr(codec: &Codec, x_lr: &ImageTensor, scale: usize) -> Result<Tensor> {
    let (_, h, w) = imaging::image_dims(x_lr)?;
    let up = imaging::resize_to(x_lr, h * scale, w * scale)?;
    codec.encode(&up)
}

/// One network evaluation from LR input to restored latent and image.
pub fn student_restore(
    student: &DenoiserNet,
    codec: &Codec,
    x_lr: &ImageTensor,
    scale: usize,
    c: &[f64],
) -> Result<(Tensor, ImageTensor)> {
    let z1 = encode_lr(codec, x_lr, scale)?;
    let z0 = student.restore(&z1, c)?;
    let x0 = codec.decode(&z0)?;
    Ok((z0, x0))
}

/// Moves a Stage-1 latent along the learned flow to knob position `t_knob`
/// with `steps` Euler steps starting at `t = 0`. One step gives
/// `z0 + t_knob * field(z0, 0, c)`.
pub fn integrate_flow(
    field: &dyn EpsField,
    z0: &Tensor,
    t_knob: f64,
    c: &[f64],
    steps: usize,
) -> Result<Tensor> {
    check_timestep(t_knob)?;
    let steps = steps.max(1);
    let h = t_knob / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let v = field.eps(&z, k as f64 * h, c)?;
        z = z.zip_map(&v, |a, b| a + h * b)?;
    }
    Ok(z)
}

/// Controllable inference: `t_knob = 0` is the Stage-1 (realness) output,
/// larger values move toward fidelity.
#[allow(clippy::too_many_arguments)]
pub fn sr_at_t(
    flow: &dyn EpsField,
    stage1: &DenoiserNet,
    codec: &Codec,
    x_lr: &ImageTensor,
    scale: usize,
    t_knob: f64,
    c: &[f64],
    steps: usize,
) -> Result<ImageTensor> {
    check_timestep(t_knob)?;
    let z1 = encode_lr(codec, x_lr, scale)?;
    let z0 = stage1.restore(&z1, c)?;
    let z = integrate_flow(flow, &z0, t_knob, c, steps)?;
    codec.decode(&z)
}
