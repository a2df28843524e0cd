//! Two-view stochastic augmentation: random resized crop, flip, color
//! jitter, grayscale, Gaussian blur, solarization, normalization.

use fra_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FraError, Result};

/// A batch of RGB images, `[B, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor<f32>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(FraError::Domain(format!("image batch must be [B, 3, H, W], got {:?}", s)));
        }
        Ok(Self { pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(3)
    }

    /// Pixels of image `i` as a `[3 * H * W]` slice.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = 3 * self.height() * self.width();
        &self.pixels.data()[i * n..(i + 1) * n]
    }

    /// Stacks equally sized `[3, H, W]` images.
    pub fn stack(images: &[Vec<f32>], height: usize, width: usize) -> Result<Self> {
        let n = 3 * height * width;
        let mut data = Vec::with_capacity(images.len() * n);
        for img in images {
            if img.len() != n {
                return Err(FraError::Domain(format!("image has {} values, expected {}", img.len(), n)));
            }
            data.extend_from_slice(img);
        }
        Self::new(Tensor::new([images.len(), 3, height, width], data))
    }

    /// Selects a subset of images by index.
    pub fn select(&self, indices: &[usize]) -> Self {
        let images: Vec<Vec<f32>> = indices.iter().map(|&i| self.image(i).to_vec()).collect();
        Self::stack(&images, self.height(), self.width()).expect("consistent image sizes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub crop_size: usize,
    /// Fraction of the source area kept by the random crop.
    pub crop_scale: [f64; 2],
    /// Aspect-ratio range of the random crop.
    pub crop_ratio: [f64; 2],
    pub flip_prob: f64,
    /// Brightness, contrast, saturation, hue.
    pub jitter_strengths: [f64; 4],
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    /// Per-view blur probabilities.
    pub blur_probs: [f64; 2],
    pub blur_sigma: [f64; 2],
    /// Per-view solarization probabilities.
    pub solarize_probs: [f64; 2],
    pub solarize_threshold: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_size: 96,
            crop_scale: [0.08, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            jitter_strengths: [0.4, 0.4, 0.2, 0.1],
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_probs: [1.0, 0.1],
            blur_sigma: [0.1, 2.0],
            solarize_probs: [0.0, 0.2],
            solarize_threshold: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationConfig {
    /// Deterministic resize + normalize: every stochastic transform disabled.
    pub fn identity(crop_size: usize) -> Self {
        Self {
            crop_size,
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_probs: [0.0, 0.0],
            solarize_probs: [0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(FraError::Config(m));
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_probs[0]", self.blur_probs[0]),
            ("blur_probs[1]", self.blur_probs[1]),
            ("solarize_probs[0]", self.solarize_probs[0]),
            ("solarize_probs[1]", self.solarize_probs[1]),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("augmentation.{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.crop_size == 0 {
            return err("augmentation.crop_size must be positive".into());
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return err(format!("augmentation.crop_scale must be ascending within (0, 1], got [{lo}, {hi}]"));
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return err(format!("augmentation.crop_ratio must be positive and ascending, got [{rlo}, {rhi}]"));
        }
        if self.jitter_strengths.iter().any(|s| !(*s >= 0.0)) || self.jitter_strengths[3] > 0.5 {
            return err("augmentation.jitter_strengths must be >= 0 with hue <= 0.5".into());
        }
        let [slo, shi] = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return err(format!("augmentation.blur_sigma must be positive and ascending, got [{slo}, {shi}]"));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return err("augmentation.std must be positive and mean finite".into());
        }
        Ok(())
    }
}

/// Two independently augmented views of every image in `batch`.
///
/// View `v` draws from its own random stream derived from `(seed, v)`, so the
/// result depends only on the inputs and the seed.
pub fn generate_views(batch: &ImageBatch, cfg: &AugmentationConfig, seed: u64) -> Result<(ImageBatch, ImageBatch)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(FraError::Domain("cannot augment an empty batch".into()));
    }
    let view = |v: usize| -> Result<ImageBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(v as u64 + 1);
        let images: Vec<Vec<f32>> = (0..batch.len())
            .map(|i| augment_one(batch.image(i), batch.height(), batch.width(), cfg, v, &mut rng))
            .collect();
        ImageBatch::stack(&images, cfg.crop_size, cfg.crop_size)
    };
    Ok((view(0)?, view(1)?))
}

/// Resize + normalize only (evaluation-time preprocessing).
pub fn preprocess(batch: &ImageBatch, cfg: &AugmentationConfig) -> Result<ImageBatch> {
    if batch.is_empty() {
        return Err(FraError::Domain("cannot preprocess an empty batch".into()));
    }
    let s = cfg.crop_size;
    let images: Vec<Vec<f32>> = (0..batch.len())
        .map(|i| {
            let mut img = resize_bilinear(batch.image(i), batch.height(), batch.width(), (0, 0, batch.height(), batch.width()), s, s);
            normalize(&mut img, &cfg.mean, &cfg.std);
            img
        })
        .collect();
    ImageBatch::stack(&images, s, s)
}

fn augment_one(src: &[f32], h: usize, w: usize, cfg: &AugmentationConfig, view: usize, rng: &mut impl Rng) -> Vec<f32> {
    let s = cfg.crop_size;
    let region = random_resized_crop(h, w, cfg.crop_scale, cfg.crop_ratio, rng);
    let mut img = resize_bilinear(src, h, w, region, s, s);
    if rng.random::<f64>() < cfg.flip_prob {
        flip_horizontal(&mut img, s, s);
    }
    if rng.random::<f64>() < cfg.jitter_prob {
        color_jitter(&mut img, cfg.jitter_strengths, rng);
    }
    if rng.random::<f64>() < cfg.grayscale_prob {
        to_grayscale(&mut img);
    }
    if rng.random::<f64>() < cfg.blur_probs[view] {
        let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        gaussian_blur(&mut img, s, s, sigma);
    }
    if rng.random::<f64>() < cfg.solarize_probs[view] {
        let t = cfg.solarize_threshold as f32;
        img.iter_mut().filter(|v| **v >= t).for_each(|v| *v = 1.0 - *v);
    }
    normalize(&mut img, &cfg.mean, &cfg.std);
    img
}

/// Returns `(top, left, height, width)` of the crop in source pixels.
fn random_resized_crop(h: usize, w: usize, scale: [f64; 2], ratio: [f64; 2], rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale[0]..=scale[1]);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    // Fallback: largest centered crop whose aspect ratio is within range.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio[0] {
        ((w as f64 / ratio[0]).round() as usize, w)
    } else if in_ratio > ratio[1] {
        (h, (h as f64 * ratio[1]).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bilinear resampling of `region` of a `[3, h, w]` image to `[3, oh, ow]`
/// using half-pixel centers.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, region: (usize, usize, usize, usize), oh: usize, ow: usize) -> Vec<f32> {
    let channels = src.len() / (h * w);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for plane in src.chunks(h * w) {
        out.extend(resize_plane(plane, w, region, oh, ow));
    }
    out
}

/// Bilinear resampling of `region = (top, left, height, width)` of one
/// row-major plane with row stride `w`.
pub fn resize_plane(plane: &[f32], w: usize, region: (usize, usize, usize, usize), oh: usize, ow: usize) -> Vec<f32> {
    let (top, left, rh, rw) = region;
    let sy = rh as f64 / oh as f64;
    let sx = rw as f64 / ow as f64;
    let axis = |o: usize, scale: f64, len: usize| -> (usize, usize, f32) {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..ow).map(|x| axis(x, sx, rw)).collect();
    let mut out = vec![0f32; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, sy, rh);
        let r0 = &plane[(top + y0) * w + left..];
        let r1 = &plane[(top + y1) * w + left..];
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let a = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let b = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out[y * ow + x] = a + (b - a) * fy;
        }
    }
    out
}

fn flip_horizontal(img: &mut [f32], h: usize, w: usize) {
    for row in img.chunks_mut(w).take(3 * h) {
        row.reverse();
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn to_grayscale(img: &mut [f32]) {
    let n = img.len() / 3;
    for i in 0..n {
        let l = luma(img[i], img[n + i], img[2 * n + i]);
        img[i] = l;
        img[n + i] = l;
        img[2 * n + i] = l;
    }
}

fn blend(img: &mut [f32], other: impl Fn(usize) -> f32, factor: f32) {
    for (i, v) in img.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

fn color_jitter(img: &mut [f32], strengths: [f64; 4], rng: &mut impl Rng) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let n = img.len() / 3;
    for op in order {
        let s = strengths[op];
        if s == 0.0 {
            continue;
        }
        match op {
            0 => {
                let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
                blend(img, |_| 0.0, f);
            }
            1 => {
                let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
                let mean = (0..n).map(|i| luma(img[i], img[n + i], img[2 * n + i])).sum::<f32>() / n as f32;
                blend(img, |_| mean, f);
            }
            2 => {
                let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
                let gray: Vec<f32> = (0..n).map(|i| luma(img[i], img[n + i], img[2 * n + i])).collect();
                blend(img, |i| gray[i % n], f);
            }
            _ => {
                let shift = rng.random_range(-s..=s) as f32;
                shift_hue(img, shift);
            }
        }
    }
}

fn shift_hue(img: &mut [f32], shift: f32) {
    let n = img.len() / 3;
    for i in 0..n {
        let (r, g, b) = (img[i], img[n + i], img[2 * n + i]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        let v = max;
        let s = if max > 0.0 { delta / max } else { 0.0 };
        let mut hue = if delta == 0.0 {
            0.0
        } else if max == r {
            ((g - b) / delta).rem_euclid(6.0) / 6.0
        } else if max == g {
            ((b - r) / delta + 2.0) / 6.0
        } else {
            ((r - g) / delta + 4.0) / 6.0
        };
        hue = (hue + shift).rem_euclid(1.0);
        let (r, g, b) = hsv_to_rgb(hue, s, v);
        img[i] = r;
        img[n + i] = g;
        img[2 * n + i] = b;
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur with a kernel about a tenth of the image side and
/// reflected borders.
fn gaussian_blur(img: &mut [f32], h: usize, w: usize, sigma: f64) {
    let size = ((h.min(w) as f64 * 0.1).round() as usize).max(3) | 1;
    let radius = size / 2;
    let mut kernel: Vec<f32> = (0..size)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp() as f32
        })
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut tmp = vec![0f32; h * w];
    for plane in img.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * plane[y * w + reflect(x as isize + k as isize - radius as isize, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[reflect(y as isize + k as isize - radius as isize, h) * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

fn normalize(img: &mut [f32], mean: &[f64; 3], std: &[f64; 3]) {
    let n = img.len() / 3;
    for c in 0..3 {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        img[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}
