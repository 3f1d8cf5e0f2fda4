//! Fidelity and realness metrics, the blend and data-consistency baselines,
//! and the alpha/t sweep drivers.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::degradation::{apply_adjoint, apply_operator, DegradationSample};
use crate::diffusion;
use crate::error::{Error, Result};
use crate::imaging::{image_dims, ImageTensor};
use crate::losses::PercepExtractor;
use crate::nets::{Codec, DenoiserNet, EpsField};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Peak-1 PSNR in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_TAPS / 2) as f64;
    let w: Vec<f64> = (0..SSIM_TAPS)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over valid window positions only.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| win[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all channels and valid 11x11 Gaussian windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let (c, h, w) = image_dims(a)?;
    if h < SSIM_TAPS || w < SSIM_TAPS {
        return Err(Error::TooSmall(a.shape().to_vec()));
    }
    let win = ssim_window();
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * hw..(ch + 1) * hw];
        let pb = &b.data()[ch * hw..(ch + 1) * hw];
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &win);
        let mu_b = filter_valid(pb, h, w, &win);
        let e_aa = filter_valid(&aa, h, w, &win);
        let e_bb = filter_valid(&bb, h, w, &win);
        let e_ab = filter_valid(&ab, h, w, &win);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * (ma * mb) + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = ((ma * ma + mb * mb) + SSIM_C1) * ((va + vb) + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn mean_and_cov(rows: &[Vec<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mu = DMatrix::zeros(d, 1);
    for r in rows {
        for j in 0..d {
            mu[j] += r[j];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for r in rows {
            for i in 0..d {
                let di = r[i] - mu[i];
                for j in 0..d {
                    cov[(i, j)] += di * (r[j] - mu[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets (rows are samples).
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    if a[0].len() != b[0].len() {
        return Err(Error::LengthMismatch(a[0].len(), b[0].len()));
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let diff = &mu_a - &mu_b;
    let mean_term = diff.dot(&diff);
    let sa = psd_sqrt(&cov_a);
    let cross = psd_sqrt(&(&sa * &cov_b * &sa));
    let tr = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok((mean_term + tr).max(0.0))
}

pub fn toy_fid(set_a: &[ImageTensor], set_b: &[ImageTensor], ex: &PercepExtractor) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::EmptySet);
    }
    let fa: Vec<Vec<f64>> = set_a.iter().map(|x| ex.pooled_features(x)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|x| ex.pooled_features(x)).collect();
    frechet_distance(&fa, &fb)
}

pub fn check_alpha(alpha: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(alpha)
    } else {
        Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// `alpha * x_f + (1 - alpha) * x_r` without clamping.
pub fn blend_unclamped(x_f: &Tensor, x_r: &Tensor, alpha: f64) -> Result<Tensor> {
    x_f.zip_map(x_r, |f, r| alpha * f + (1.0 - alpha) * r)
}

pub fn linear_blend(x_f: &ImageTensor, x_r: &ImageTensor, alpha: f64) -> Result<ImageTensor> {
    check_alpha(alpha)?;
    Ok(blend_unclamped(x_f, x_r, alpha)?.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub key: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub percep: f64,
    pub toy_fid: f64,
}

/// Mean per-image metrics plus the set-level toy FID.
pub fn evaluate_set(
    key: f64,
    outputs: &[ImageTensor],
    gts: &[ImageTensor],
    ex: &PercepExtractor,
) -> Result<MetricRow> {
    if outputs.len() != gts.len() {
        return Err(Error::LengthMismatch(outputs.len(), gts.len()));
    }
    if outputs.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = outputs.len() as f64;
    let (mut p, mut s, mut d) = (0.0, 0.0, 0.0);
    for (o, g) in outputs.iter().zip(gts) {
        p += psnr(o, g)?;
        s += ssim(o, g)?;
        d += ex.dist(o, g)?;
    }
    Ok(MetricRow {
        key,
        psnr: p / n,
        ssim: s / n,
        percep: d / n,
        toy_fid: toy_fid(outputs, gts, ex)?,
    })
}

pub const DEFAULT_ALPHA_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const DEFAULT_T_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

pub fn sweep_alpha(
    xf_set: &[ImageTensor],
    xr_set: &[ImageTensor],
    gt_set: &[ImageTensor],
    grid: &[f64],
    ex: &PercepExtractor,
) -> Result<Vec<MetricRow>> {
    if xf_set.len() != xr_set.len() {
        return Err(Error::LengthMismatch(xf_set.len(), xr_set.len()));
    }
    if xf_set.len() != gt_set.len() {
        return Err(Error::LengthMismatch(xf_set.len(), gt_set.len()));
    }
    grid.iter()
        .map(|&a| {
            check_alpha(a)?;
            let out: Vec<ImageTensor> = xf_set
                .iter()
                .zip(xr_set)
                .map(|(f, r)| linear_blend(f, r, a))
                .collect::<Result<_>>()?;
            evaluate_set(a, &out, gt_set, ex)
        })
        .collect()
}

/// Everything needed to run the knob-controlled inference path.
pub struct KnobModel<'a> {
    pub flow: &'a dyn EpsField,
    pub stage1: &'a DenoiserNet,
    pub codec: &'a Codec,
    pub scale: usize,
    pub cond: &'a [f64],
    pub flow_steps: usize,
}

impl KnobModel<'_> {
    pub fn sr(&self, x_lr: &ImageTensor, t: f64) -> Result<ImageTensor> {
        diffusion::sr_at_t(
            self.flow,
            self.stage1,
            self.codec,
            x_lr,
            self.scale,
            t,
            self.cond,
            self.flow_steps,
        )
    }
}

pub fn sweep_t(
    model: &KnobModel,
    lr_set: &[ImageTensor],
    gt_set: &[ImageTensor],
    t_grid: &[f64],
    ex: &PercepExtractor,
) -> Result<Vec<MetricRow>> {
    if lr_set.len() != gt_set.len() {
        return Err(Error::LengthMismatch(lr_set.len(), gt_set.len()));
    }
    t_grid
        .iter()
        .map(|&t| {
            let out: Vec<ImageTensor> = lr_set
                .iter()
                .map(|x| model.sr(x, t))
                .collect::<Result<_>>()?;
            evaluate_set(t, &out, gt_set, ex)
        })
        .collect()
}

/// `|A x - y|` (Euclidean norm).
pub fn dc_residual(x: &ImageTensor, y: &ImageTensor, sample: &DegradationSample) -> Result<f64> {
    let ax = apply_operator(x, sample)?;
    Ok(ax.zip_map(y, |a, b| a - b)?.sum_sq().sqrt())
}

/// Gradient descent on `0.5 |y - A x|^2`: `x <- x - rho * A^T (A x - y)`.
pub fn data_consistency_refine(
    x0: &ImageTensor,
    y: &ImageTensor,
    sample: &DegradationSample,
    rho: f64,
    iters: usize,
) -> Result<ImageTensor> {
    let (_, h, w) = image_dims(x0)?;
    let mut x = x0.clone();
    for _ in 0..iters {
        let r = apply_operator(&x, sample)?.zip_map(y, |a, b| a - b)?;
        let g = apply_adjoint(&r, sample, h, w)?;
        x.scaled_add_assign(-rho, &g);
    }
    Ok(x)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::EmptySet);
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
