//! Planar `[C, H, W]` images: PNG I/O, bicubic resampling and patch tiling.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A planar image in `[C, H, W]` layout with nominal values in `[0, 1]`.
pub type ImageTensor = Tensor;

pub fn image_dims(img: &ImageTensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] if c >= 1 && h >= 1 && w >= 1 => Ok((c, h, w)),
        s => Err(Error::ShapeMismatch(s.to_vec(), vec![0, 0, 0])),
    }
}

/// Checks the image invariants: three positive dims, finite entries and, when
/// `unit_range` is set, every entry inside `[0, 1]`.
pub fn validate_image(img: &ImageTensor, unit_range: bool) -> Result<()> {
    image_dims(img)?;
    if !img.all_finite() {
        return Err(Error::Validation("image contains non-finite values".into()));
    }
    if unit_range && img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation("image values outside [0, 1]".into()));
    }
    Ok(())
}

pub fn clamp_unit(img: &ImageTensor) -> ImageTensor {
    img.map(|v| v.clamp(0.0, 1.0))
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_png(&std::fs::read(path)?)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedFormat(format!("color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let buf = &buf[..info.buffer_size()];
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / 65535.0)
            .collect(),
        other => return Err(Error::UnsupportedFormat(format!("bit depth {other:?}"))),
    };
    let mut data = vec![0.0; channels * h * w];
    for (i, px) in samples.chunks_exact(channels).enumerate() {
        for (c, v) in px.iter().enumerate() {
            data[c * h * w + i] = *v;
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Round-half-up 8-bit quantization.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(img)?;
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::UnsupportedFormat(format!("{c} channels"))),
    };
    let mut bytes = vec![0u8; c * h * w];
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..c {
            bytes[i * c + ch] = quantize(d[ch * h * w + i]);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(io_err)?;
        writer.write_image_data(&bytes).map_err(io_err)?;
    }
    Ok(out)
}

fn io_err(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(other.to_string())),
    }
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    let mut f = BufWriter::new(File::create(path)?);
    std::io::Write::write_all(&mut f, &bytes)?;
    Ok(())
}

/// Bicubic kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// One output sample of a 1-D resampler: four clamped taps plus the index of
/// the tap closest to the sample position.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
    anchor: usize,
}

/// 1-D bicubic resampling operator from `n_in` to `n_out` samples.
#[derive(Clone, Debug)]
pub struct Resampler1d {
    n_in: usize,
    taps: Vec<Taps>,
}

impl Resampler1d {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let ratio = n_in as f64 / n_out as f64;
        let taps = (0..n_out)
            .map(|i| {
                let src = (i as f64 + 0.5) * ratio - 0.5;
                let base = src.floor() as isize;
                let mut idx = [0; 4];
                let mut w = [0.0; 4];
                for k in 0..4 {
                    let p = base - 1 + k as isize;
                    idx[k] = p.clamp(0, n_in as isize - 1) as usize;
                    w[k] = cubic(src - p as f64);
                }
                let anchor = if src - base as f64 <= 0.5 { 1 } else { 2 };
                Taps { idx, w, anchor }
            })
            .collect();
        Self { n_in, taps }
    }

    pub fn n_out(&self) -> usize {
        self.taps.len()
    }

    /// Applies the operator along a strided line. Written as
    /// `anchor + sum w_k (x_k - anchor)` so constant lines map to themselves exactly.
    fn apply(&self, src: &[f64], stride: usize, dst: &mut [f64], dst_stride: usize) {
        for (o, t) in self.taps.iter().enumerate() {
            let a = src[t.idx[t.anchor] * stride];
            let mut acc = 0.0;
            for k in 0..4 {
                acc += t.w[k] * (src[t.idx[k] * stride] - a);
            }
            dst[o * dst_stride] = a + acc;
        }
    }

    /// Transpose of [`Self::apply`] as a linear map (scatter form).
    fn apply_adjoint(&self, src: &[f64], stride: usize, dst: &mut [f64], dst_stride: usize) {
        for i in 0..self.n_in {
            dst[i * dst_stride] = 0.0;
        }
        for (o, t) in self.taps.iter().enumerate() {
            let g = src[o * stride];
            let wsum: f64 = t.w.iter().sum();
            for k in 0..4 {
                dst[t.idx[k] * dst_stride] += t.w[k] * g;
            }
            dst[t.idx[t.anchor] * dst_stride] += (1.0 - wsum) * g;
        }
    }
}

fn out_dim(n: usize, scale: f64) -> usize {
    (n as f64 * scale).round().max(0.0) as usize
}

pub fn resize_bicubic(img: &ImageTensor, scale: f64) -> Result<ImageTensor> {
    let (_, h, w) = image_dims(img)?;
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::DegenerateOutput(format!("scale {scale}")));
    }
    resize_to(img, out_dim(h, scale), out_dim(w, scale))
}

pub fn resize_to(img: &ImageTensor, oh: usize, ow: usize) -> Result<ImageTensor> {
    let (c, h, w) = image_dims(img)?;
    if oh < 1 || ow < 1 {
        return Err(Error::DegenerateOutput(format!("{oh}x{ow}")));
    }
    if oh == h && ow == w {
        return Ok(img.clone());
    }
    let (ry, rx) = (Resampler1d::new(h, oh), Resampler1d::new(w, ow));
    let mut mid = vec![0.0; c * h * ow];
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let mplane = &mut mid[ch * h * ow..(ch + 1) * h * ow];
        for y in 0..h {
            rx.apply(&plane[y * w..], 1, &mut mplane[y * ow..], 1);
        }
        let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for x in 0..ow {
            ry.apply(&mplane[x..], ow, &mut oplane[x..], ow);
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Adjoint of [`resize_to`] from `[C, oh, ow]` back to `[C, h, w]`.
pub fn resize_adjoint(g: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
    let (c, oh, ow) = image_dims(g)?;
    if oh == h && ow == w {
        return Ok(g.clone());
    }
    let (ry, rx) = (Resampler1d::new(h, oh), Resampler1d::new(w, ow));
    let mut mid = vec![0.0; c * h * ow];
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let gplane = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
        let mplane = &mut mid[ch * h * ow..(ch + 1) * h * ow];
        for x in 0..ow {
            ry.apply_adjoint(&gplane[x..], ow, &mut mplane[x..], ow);
        }
        let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            rx.apply_adjoint(&mplane[y * ow..], 1, &mut oplane[y * w..], 1);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: 32,
            stride: 16,
            seed: 0,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Validation(format!("patch.size {} < 8", self.size)));
        }
        if self.stride < 1 {
            return Err(Error::Validation("patch.stride must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn crop(img: &ImageTensor, y: usize, x: usize, ph: usize, pw: usize) -> ImageTensor {
    let (c, h, w) = image_dims(img).expect("crop: not an image");
    assert!(y + ph <= h && x + pw <= w);
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for row in y..y + ph {
            let start = (ch * h + row) * w + x;
            data.extend_from_slice(&img.data()[start..start + pw]);
        }
    }
    Tensor::from_vec(&[c, ph, pw], data).unwrap()
}

/// Raster-order tiling; partial tiles at the right/bottom edges are dropped.
pub fn crop_patches(img: &ImageTensor, spec: &PatchSpec) -> Result<Vec<ImageTensor>> {
    let (_, h, w) = image_dims(img)?;
    spec.validate()?;
    if spec.size > h.min(w) {
        return Err(Error::PatchTooLarge {
            size: spec.size,
            height: h,
            width: w,
        });
    }
    let mut out = Vec::new();
    for y in (0..=h - spec.size).step_by(spec.stride) {
        for x in (0..=w - spec.size).step_by(spec.stride) {
            out.push(crop(img, y, x, spec.size, spec.size));
        }
    }
    Ok(out)
}
