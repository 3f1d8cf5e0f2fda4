//! Synthetic degradation `y = A x + n`: Gaussian blur, bicubic downscale and
//! additive Gaussian noise, plus the LR/HR pair synthesizer.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, image_dims, ImageTensor, PatchSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub blur_sigma_range: [f64; 2],
    pub kernel_size: usize,
    pub scale: usize,
    pub noise_sigma_range: [f64; 2],
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.2, 1.2],
            kernel_size: 7,
            scale: 4,
            noise_sigma_range: [0.0, 0.02],
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("degradation.{m}")));
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd and >= 1");
        }
        if self.scale < 1 {
            return bad("scale must be >= 1");
        }
        let [blo, bhi] = self.blur_sigma_range;
        if !(0.0 <= blo && blo <= bhi) {
            return bad("blur_sigma_range must satisfy 0 <= lo <= hi");
        }
        let [nlo, nhi] = self.noise_sigma_range;
        if !(0.0 <= nlo && nlo <= nhi && nhi <= 1.0) {
            return bad("noise_sigma_range must satisfy 0 <= lo <= hi <= 1");
        }
        Ok(())
    }
}

/// Realized degradation parameters for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSample {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub kernel: Tensor,
    pub scale: usize,
}

pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Tensor> {
    if size.is_multiple_of(2) {
        return Err(Error::EvenSize(size));
    }
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Validation(format!("blur sigma {sigma} < 0")));
    }
    let r = (size / 2) as isize;
    let mut k = vec![0.0; size * size];
    if sigma == 0.0 {
        k[size * size / 2] = 1.0;
        return Tensor::from_vec(&[size, size], k);
    }
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as isize - r, j as isize - r);
            k[i * size + j] = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Tensor::from_vec(&[size, size], k)
}

/// Convolution with replicate (clamped) borders. Each output is formed as
/// `center + sum k (x - center)` so constants pass through exactly.
pub fn blur(img: &ImageTensor, kernel: &Tensor) -> Result<ImageTensor> {
    let (c, h, w) = image_dims(img)?;
    let ks = kernel.shape()[0];
    let r = (ks / 2) as isize;
    let kd = kernel.data();
    let d = img.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let center = plane[y * w + x];
                let mut acc = 0.0;
                for i in 0..ks {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    for j in 0..ks {
                        let sx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += kd[i * ks + j] * (plane[sy * w + sx] - center);
                    }
                }
                out[(ch * h + y) * w + x] = center + acc;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Transpose of [`blur`] as a linear map.
pub fn blur_adjoint(g: &ImageTensor, kernel: &Tensor) -> Result<ImageTensor> {
    let (c, h, w) = image_dims(g)?;
    let ks = kernel.shape()[0];
    let r = (ks / 2) as isize;
    let kd = kernel.data();
    let ksum: f64 = kd.iter().sum();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let gp = &g.data()[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let gv = gp[y * w + x];
                op[y * w + x] += (1.0 - ksum) * gv;
                for i in 0..ks {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    for j in 0..ks {
                        let sx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                        op[sy * w + sx] += kd[i * ks + j] * gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn check_divisible(img: &ImageTensor, scale: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image_dims(img)?;
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::ShapeNotDivisible {
            shape: img.shape().to_vec(),
            factor: scale,
        });
    }
    Ok((c, h, w))
}

/// The linear part `A x`: blur followed by bicubic downscale.
pub fn apply_operator(x: &ImageTensor, sample: &DegradationSample) -> Result<ImageTensor> {
    let (_, h, w) = check_divisible(x, sample.scale)?;
    let blurred = blur(x, &sample.kernel)?;
    imaging::resize_to(&blurred, h / sample.scale, w / sample.scale)
}

/// `A^T y` for an HR target of size `h x w`.
pub fn apply_adjoint(
    y: &ImageTensor,
    sample: &DegradationSample,
    h: usize,
    w: usize,
) -> Result<ImageTensor> {
    let up = imaging::resize_adjoint(y, h, w)?;
    blur_adjoint(&up, &sample.kernel)
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Draws the per-pair parameters and returns `A x + n` before clamping.
pub fn degrade_unclamped(
    x_hr: &ImageTensor,
    spec: &DegradationSpec,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, DegradationSample)> {
    check_divisible(x_hr, spec.scale)?;
    let blur_sigma = uniform(rng, spec.blur_sigma_range);
    let noise_sigma = uniform(rng, spec.noise_sigma_range);
    let kernel = gaussian_kernel(blur_sigma, spec.kernel_size)?;
    let sample = DegradationSample {
        blur_sigma,
        noise_sigma,
        kernel,
        scale: spec.scale,
    };
    let mut y = apply_operator(x_hr, &sample)?;
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Validation(e.to_string()))?;
    for v in y.data_mut() {
        *v += normal.sample(rng);
    }
    Ok((y, sample))
}

pub fn degrade(
    x_hr: &ImageTensor,
    spec: &DegradationSpec,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, DegradationSample)> {
    let (y, sample) = degrade_unclamped(x_hr, spec, rng)?;
    Ok((imaging::clamp_unit(&y), sample))
}

/// A low-resolution input paired with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub lr: ImageTensor,
    pub gt: ImageTensor,
}

pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Pair stream `i` is `ChaCha8(spec.seed)` on stream `i`, so pairs can be
/// synthesized in any order with identical results.
pub fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn synth_pairs_from_patches(
    patches: &[ImageTensor],
    spec: &DegradationSpec,
    patch_seed: u64,
    n_pairs: usize,
) -> Result<Vec<Pair>> {
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    if patches.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(patch_seed));
    (0..n_pairs)
        .map(|i| {
            let gt = patches[order[i % order.len()]].clone();
            let (lr, _) = degrade(&gt, spec, &mut pair_rng(spec.seed, i))?;
            Ok(Pair { lr, gt })
        })
        .collect()
}

pub fn corpus_patches(corpus_dir: &Path, patch: &PatchSpec) -> Result<Vec<ImageTensor>> {
    let files = list_pngs(corpus_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut patches = Vec::new();
    for f in &files {
        patches.extend(imaging::crop_patches(&imaging::load_png(f)?, patch)?);
    }
    Ok(patches)
}

pub fn synth_dataset(
    corpus_dir: &Path,
    spec: &DegradationSpec,
    patch: &PatchSpec,
    n_pairs: usize,
) -> Result<Vec<Pair>> {
    spec.validate()?;
    if !patch.size.is_multiple_of(spec.scale) {
        return Err(Error::ShapeNotDivisible {
            shape: vec![patch.size],
            factor: spec.scale,
        });
    }
    let patches = corpus_patches(corpus_dir, patch)?;
    synth_pairs_from_patches(&patches, spec, patch.seed, n_pairs)
}

/// Procedural RGB image: smooth gradient background and hard-edged shapes,
/// some carrying coarse (recoverable at 4x) or fine (lost by the
/// degradation) periodic texture.
pub fn toy_image(rng: &mut impl Rng, size: usize) -> ImageTensor {
    let n = size;
    let mut data = vec![0.0; 3 * n * n];
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let grad: [[f64; 2]; 3] = [
        [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)],
        [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)],
        [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)],
    ];
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let (u, v) = (y as f64 / n as f64 - 0.5, x as f64 / n as f64 - 0.5);
                data[(c * n + y) * n + x] = base[c] + grad[c][0] * u + grad[c][1] * v;
            }
        }
    }
    let n_shapes = rng.gen_range(2..5);
    for _ in 0..n_shapes {
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let cy = rng.gen_range(0.0..n as f64);
        let cx = rng.gen_range(0.0..n as f64);
        let r = rng.gen_range(n as f64 * 0.1..n as f64 * 0.35);
        let is_disc = rng.gen_bool(0.5);
        // Texture period in HR pixels; 0 means untextured.
        let period = match rng.gen_range(0..3) {
            0 => 0.0,
            1 => rng.gen_range(8.0..16.0),
            _ => rng.gen_range(3.0..5.0),
        };
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let amp = rng.gen_range(0.08..0.2);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if is_disc {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= r * 0.7
                };
                if !inside {
                    continue;
                }
                let tex = if period > 0.0 {
                    let phase = (dy * angle.cos() + dx * angle.sin()) / period;
                    amp * (std::f64::consts::TAU * phase).sin()
                } else {
                    0.0
                };
                for c in 0..3 {
                    data[(c * n + y) * n + x] = color[c] + tex;
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(&[3, n, n], data).unwrap()
}

/// Writes `count` procedural PNGs named `img_000.png`, ... into `dir`.
pub fn generate_toy_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:03}.png"));
            imaging::save_png(&toy_image(&mut rng, size), &path)?;
            Ok(path)
        })
        .collect()
}
