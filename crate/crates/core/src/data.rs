//! Image sources: a synthetic face generator with ground-truth part masks
//! and a flat-folder loader. Both produce an in-memory [`Dataset`] whose
//! batch for any step is a pure function of `(seed, step)`.

use std::fs;
use std::path::{Path, PathBuf};

use fra_tensor::Tensor;
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{resize_bilinear, ImageBatch};
use crate::error::{FraError, Result};

/// Names of the generated parts, in mask order.
pub const PART_NAMES: [&str; 7] = ["left_eye", "right_eye", "nose", "mouth", "left_brow", "right_brow", "chin"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFaceSpec {
    pub canvas_size: usize,
    /// Number of parts drawn, taken from the front of [`PART_NAMES`].
    pub n_parts: usize,
    /// Standard deviation of face and part displacement, as a fraction of the canvas.
    pub part_position_jitter: f64,
    /// Relative standard deviation of face and part sizes.
    pub part_scale_jitter: f64,
    pub color_palette_seed: u64,
    /// Probability that a sample is drawn with an open mouth.
    pub mouth_open_prob: f64,
}

impl Default for SyntheticFaceSpec {
    fn default() -> Self {
        Self {
            canvas_size: 96,
            n_parts: 7,
            part_position_jitter: 0.04,
            part_scale_jitter: 0.15,
            color_palette_seed: 0,
            mouth_open_prob: 0.5,
        }
    }
}

impl SyntheticFaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < 8 {
            return Err(FraError::Config(format!("canvas_size must be at least 8, got {}", self.canvas_size)));
        }
        if !(1..=PART_NAMES.len()).contains(&self.n_parts) {
            return Err(FraError::Config(format!("n_parts must be in 1..={}, got {}", PART_NAMES.len(), self.n_parts)));
        }
        if !(0.0..=0.1).contains(&self.part_position_jitter) || !(0.0..=0.5).contains(&self.part_scale_jitter) {
            return Err(FraError::Config(
                "part_position_jitter must be in [0, 0.1] and part_scale_jitter in [0, 0.5]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mouth_open_prob) {
            return Err(FraError::Config(format!("mouth_open_prob must be in [0, 1], got {}", self.mouth_open_prob)));
        }
        Ok(())
    }
}

/// A generated batch with evaluation-only annotations.
#[derive(Clone, Debug)]
pub struct SynthBatch {
    pub images: ImageBatch,
    /// Binary masks `[B, n_parts, canvas, canvas]`.
    pub part_masks: Tensor<f32>,
    pub mouth_open: Vec<bool>,
}

struct Palette {
    skins: Vec<[f32; 3]>,
    backgrounds: Vec<[f32; 3]>,
    features: Vec<[f32; 3]>,
}

impl Palette {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut jitter = |base: [f32; 3], amount: f32| {
            base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
        };
        let skins = [[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.68, 0.48, 0.35], [0.45, 0.31, 0.22], [0.93, 0.76, 0.60]]
            .map(|c| jitter(c, 0.04))
            .to_vec();
        let backgrounds = [[0.2, 0.3, 0.5], [0.5, 0.6, 0.4], [0.7, 0.7, 0.75], [0.3, 0.2, 0.25], [0.8, 0.6, 0.3], [0.1, 0.45, 0.45]]
            .map(|c| jitter(c, 0.1))
            .to_vec();
        let features = [[0.15, 0.1, 0.08], [0.25, 0.2, 0.35], [0.05, 0.2, 0.15], [0.3, 0.15, 0.05]].map(|c| jitter(c, 0.05)).to_vec();
        Self { skins, backgrounds, features }
    }
}

/// Per-sample random stream, independent across `(seed, index)`.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f32; 3],
    strength: f32,
}

/// Renders sample `index` of the synthetic stream: a shaded oval face on a
/// tinted background with soft elliptical blobs for the parts. Returns the
/// `[3, S, S]` image, `[n_parts, S, S]` masks and the mouth state.
pub fn render_face(spec: &SyntheticFaceSpec, seed: u64, index: u64) -> (Vec<f32>, Vec<f32>, bool) {
    let palette = Palette::new(spec.color_palette_seed);
    let mut rng = sample_rng(seed, index);
    let s = spec.canvas_size;
    let sf = s as f64;
    let pj = spec.part_position_jitter;
    let sj = spec.part_scale_jitter;

    let skin = palette.skins[rng.random_range(0..palette.skins.len())];
    let bg = palette.backgrounds[rng.random_range(0..palette.backgrounds.len())];
    let feat = palette.features[rng.random_range(0..palette.features.len())];
    let bg2 = palette.backgrounds[rng.random_range(0..palette.backgrounds.len())];
    let mouth_open = rng.random::<f64>() < spec.mouth_open_prob;

    let scale = (1.0 + sj * gauss(&mut rng)).clamp(0.7, 1.3);
    let fcx = 0.5 + pj * gauss(&mut rng);
    let fcy = 0.5 + pj * gauss(&mut rng);
    let frx = 0.30 * scale;
    let fry = 0.38 * scale;

    // Canonical part layout in face-radius units: (dx, dy, rx, ry).
    let layout: [(f64, f64, f64, f64); 7] = [
        (-0.42, -0.18, 0.17, 0.09),
        (0.42, -0.18, 0.17, 0.09),
        (0.0, 0.12, 0.09, 0.2),
        (0.0, 0.52, 0.34, 0.08),
        (-0.42, -0.42, 0.22, 0.05),
        (0.42, -0.42, 0.22, 0.05),
        (0.0, 0.86, 0.26, 0.08),
    ];
    let mut blobs = Vec::with_capacity(spec.n_parts);
    for (p, &(dx, dy, rx, ry)) in layout.iter().enumerate().take(spec.n_parts) {
        let ps = (1.0 + sj * gauss(&mut rng)).clamp(0.6, 1.4);
        let cx = fcx + dx * frx + 0.5 * pj * gauss(&mut rng);
        let cy = fcy + dy * fry + 0.5 * pj * gauss(&mut rng);
        let (mut rx, mut ry) = (rx * frx * ps, ry * fry * ps);
        let mut color = feat;
        let mut strength = 0.9;
        match PART_NAMES[p] {
            "mouth" if mouth_open => {
                rx *= 0.7;
                ry *= 2.6;
                color = [0.08, 0.02, 0.03];
                strength = 1.0;
            }
            "mouth" => color = [0.7, 0.25, 0.28],
            "nose" => {
                color = skin.map(|c| c * 0.7);
                strength = 0.8;
            }
            "chin" => {
                color = skin.map(|c| c * 0.75);
                strength = 0.7;
            }
            _ => {}
        }
        blobs.push(Blob { cx: cx * sf, cy: cy * sf, rx: rx * sf, ry: ry * sf, color, strength });
    }

    let mut img = vec![0f32; 3 * s * s];
    let mut masks = vec![0f32; spec.n_parts * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (py / sf) as f32;
            let mut c = [0f32; 3];
            for k in 0..3 {
                c[k] = bg[k] * (1.0 - t) + bg2[k] * t;
            }
            let fx = (px / sf - fcx) / frx;
            let fy = (py / sf - fcy) / fry;
            let fd = fx * fx + fy * fy;
            let face_alpha = (1.0 / (1.0 + ((fd - 1.0) * 12.0).exp())) as f32;
            let shade = (1.0 - 0.25 * fy.clamp(-1.0, 1.0) - 0.12 * fx.clamp(-1.0, 1.0)) as f32;
            for k in 0..3 {
                let sk = (skin[k] * shade).clamp(0.0, 1.0);
                c[k] = c[k] * (1.0 - face_alpha) + sk * face_alpha;
            }
            for (p, b) in blobs.iter().enumerate() {
                let dx = (px - b.cx) / b.rx;
                let dy = (py - b.cy) / b.ry;
                let d = dx * dx + dy * dy;
                if d > 9.0 {
                    continue;
                }
                let alpha = b.strength * (-0.5 * d * 2.0).exp() as f32;
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - alpha) + b.color[k] * alpha;
                }
                if d <= 1.0 {
                    masks[(p * s + y) * s + x] = 1.0;
                }
            }
            for k in 0..3 {
                img[(k * s + y) * s + x] = c[k].clamp(0.0, 1.0);
            }
        }
    }
    (img, masks, mouth_open)
}

/// Generates samples `0..batch_size` of the stream identified by `seed`.
pub fn synth_batch(spec: &SyntheticFaceSpec, batch_size: usize, seed: u64) -> Result<SynthBatch> {
    synth_range(spec, seed, 0, batch_size)
}

/// Generates samples `start..start + count` of the stream identified by `seed`.
pub fn synth_range(spec: &SyntheticFaceSpec, seed: u64, start: u64, count: usize) -> Result<SynthBatch> {
    spec.validate()?;
    let s = spec.canvas_size;
    let mut images = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count * spec.n_parts * s * s);
    let mut mouth_open = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let (img, m, open) = render_face(spec, seed, start + i);
        images.push(img);
        masks.extend_from_slice(&m);
        mouth_open.push(open);
    }
    Ok(SynthBatch {
        images: ImageBatch::stack(&images, s, s)?,
        part_masks: Tensor::new([count, spec.n_parts, s, s], masks),
        mouth_open,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic { spec: SyntheticFaceSpec, seed: u64 },
    Folder { path: PathBuf, skipped: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: SourceKind,
    pub count: usize,
    pub image_size: usize,
    /// SHA-256 over the file list (folder) or the generator parameters (synthetic).
    pub checksum: String,
}

/// Images held in memory, each `[3, S, S]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn synthetic(spec: &SyntheticFaceSpec, count: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if count == 0 {
            return Err(FraError::Dataset("synthetic dataset needs at least one image".into()));
        }
        let images = (0..count as u64).map(|i| render_face(spec, seed, i).0).collect();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(spec).expect("spec serializes"));
        h.update(seed.to_le_bytes());
        h.update((count as u64).to_le_bytes());
        let manifest = DatasetManifest {
            source: SourceKind::Synthetic { spec: spec.clone(), seed },
            count,
            image_size: spec.canvas_size,
            checksum: hex::encode(h.finalize()),
        };
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Shuffled sample order for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch.wrapping_add(1));
        order.shuffle(&mut rng);
        order
    }

    /// Indices of the batch consumed at global step `step`. Epochs are
    /// reshuffled; the last batch of an epoch may be partial.
    pub fn batch_indices(&self, seed: u64, batch_size: usize, step: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch(batch_size) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let order = self.epoch_order(seed, epoch);
        let end = ((k + 1) * batch_size).min(order.len());
        order[k * batch_size..end].to_vec()
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let imgs: Vec<Vec<f32>> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let s = self.image_size();
        ImageBatch::stack(&imgs, s, s).expect("dataset images share one size")
    }

    /// One epoch of shuffled batches.
    pub fn epoch_batches(&self, seed: u64, epoch: u64, batch_size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        let order = self.epoch_order(seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }

    /// Every image in stored order.
    pub fn all(&self) -> ImageBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "gif", "tif"];

/// Decodes an image file to `[3, size, size]` in `[0, 1]`, resizing the
/// whole frame bilinearly.
pub fn decode_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| FraError::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(FraError::format(path, "image has no pixels"));
    }
    let mut chw = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            chw[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Ok(if h == size && w == size { chw } else { resize_bilinear(&chw, h, w, (0, 0, h, w), size, size) })
}

/// Sorted image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FraError::io(dir, e))? {
        let path = entry.map_err(|e| FraError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every decodable image in a flat directory. Files that fail to
/// decode are skipped with a warning and counted in the manifest.
pub fn load_folder(dir: &Path, image_size: usize) -> Result<(Dataset, Vec<PathBuf>)> {
    let files = list_images(dir)?;
    let mut images = Vec::new();
    let mut kept = Vec::new();
    let mut skipped = 0;
    let mut h = Sha256::new();
    for f in files {
        match decode_image(&f, image_size) {
            Ok(img) => {
                h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
                h.update(fs::metadata(&f).map(|m| m.len()).unwrap_or(0).to_le_bytes());
                images.push(img);
                kept.push(f);
            }
            Err(e) => {
                warn!("skipping {}: {}", f.display(), e);
                skipped += 1;
            }
        }
    }
    if images.is_empty() {
        return Err(FraError::Dataset(format!("no decodable images in {}", dir.display())));
    }
    let manifest = DatasetManifest {
        source: SourceKind::Folder { path: dir.to_path_buf(), skipped },
        count: images.len(),
        image_size,
        checksum: hex::encode(h.finalize()),
    };
    Ok((Dataset { manifest, images }, kept))
}

/// Writes `[3, H, W]` pixels in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, chw: &[f32], h: usize, w: usize) -> Result<()> {
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            p[c] = (chw[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| FraError::format(path, e.to_string()))
}

/// Per-file annotations written next to a materialized synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthLabels {
    pub spec: SyntheticFaceSpec,
    pub seed: u64,
    /// File name -> mouth open.
    pub mouth_open: std::collections::BTreeMap<String, bool>,
}

pub const LABELS_FILE: &str = "labels.json";

/// Materializes `count` synthetic faces as PNG files plus a label file.
pub fn write_synthetic(spec: &SyntheticFaceSpec, count: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| FraError::io(out, e))?;
    let s = spec.canvas_size;
    let mut labels = SynthLabels { spec: spec.clone(), seed, mouth_open: Default::default() };
    for i in 0..count {
        let (img, _, open) = render_face(spec, seed, i as u64);
        let name = format!("face_{i:05}.png");
        save_png(&out.join(&name), &img, s, s)?;
        labels.mouth_open.insert(name, open);
    }
    let path = out.join(LABELS_FILE);
    let text = serde_json::to_string_pretty(&labels).expect("labels serialize");
    fs::write(&path, text).map_err(|e| FraError::io(&path, e))?;
    Ok(Dataset::synthetic(spec, count.max(1), seed)?.manifest)
}

/// Reads the label file of a materialized synthetic dataset.
pub fn read_labels(dir: &Path) -> Result<SynthLabels> {
    let path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FraError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| FraError::format(&path, e.to_string()))
}
