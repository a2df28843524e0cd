//! Linear probing, heatmap export and part-discovery scoring.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fra_tensor::{Graph, Optimizer, OptimizerKind, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{preprocess, resize_plane, AugmentationConfig, ImageBatch};
use crate::data::{save_png, synth_range, SyntheticFaceSpec};
use crate::error::{FraError, Result};
use crate::heatmap_head::from_tokens;
use crate::networks::encoder::Encoder;
use crate::networks::{FraModel, Mode};

const CHUNK: usize = 64;

/// Images with integer class labels.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Synthetic two-class task: label 1 when the face is drawn with an open mouth.
pub fn mouth_task(spec: &SyntheticFaceSpec, count: usize, seed: u64, start: u64) -> Result<LabeledImages> {
    let b = synth_range(spec, seed, start, count)?;
    Ok(LabeledImages { images: b.images, labels: b.mouth_open.iter().map(|&o| o as usize).collect() })
}

/// SHA-256 over every encoder parameter and buffer.
pub fn encoder_checksum(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    let sub = store.subset(Encoder::NAME);
    for (name, t) in sub.params().chain(sub.buffers()) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Pooled encoder features `[n, C]` in evaluation mode for raw `[0, 1]` images.
pub fn encoder_features(
    model: &FraModel,
    store: &ParamStore<f32>,
    images: &ImageBatch,
    aug: &AugmentationConfig,
) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = preprocess(&images.select(chunk), aug)?;
        let mut g = Graph::inference();
        let x = g.constant(batch.pixels);
        let out = model.encode(&mut g, store, x, Mode::Eval)?;
        rows.extend_from_slice(g.value(out.pooled).data());
    }
    let c = model.encoder.out_channels;
    Ok(Tensor::new([images.len(), c], rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Encoder checksum was unchanged by probing.
    pub frozen_encoder: bool,
    pub encoder_checksum: String,
    pub settings: ProbeSettings,
}

/// Softmax linear classifier on standardized features, trained full-batch
/// with AdamW under a cosine learning-rate schedule. Returns `(weights, bias)`.
fn train_linear(
    x: &Tensor<f64>,
    labels: &[usize],
    classes: usize,
    s: &ProbeSettings,
) -> (Tensor<f64>, Tensor<f64>) {
    let (n, d) = (x.dim(0), x.dim(1));
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut store = ParamStore::<f64>::new("probe");
    store.insert("weight", Tensor::randn([classes, d], 0.01, &mut rng));
    store.insert("bias", Tensor::zeros([classes]));
    let onehot = Tensor::from_fn([n, classes], |i| if labels[i / classes] == i % classes { 1.0 } else { 0.0 });
    let mut opt = Optimizer::new(OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, s.weight_decay);
    for epoch in 0..s.epochs {
        let lr = s.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / s.epochs as f64).cos());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.param(&store, "weight");
        let b = g.param(&store, "bias");
        let logits = g.linear(xv, w, Some(b));
        let p = g.softmax(logits);
        let t = g.constant(onehot.clone());
        let loss = crate::losses::relation_ce_graph(&mut g, p, t).expect("shapes agree");
        let grads = g.backward(loss).for_store("probe");
        opt.step(&mut store, &grads, lr);
    }
    (store.expect("weight").clone(), store.expect("bias").clone())
}

fn predict(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<usize> {
    let (n, d, k) = (x.dim(0), x.dim(1), w.dim(0));
    (0..n)
        .map(|i| {
            let row = &x.data()[i * d..(i + 1) * d];
            (0..k)
                .map(|c| {
                    let wr = &w.data()[c * d..(c + 1) * d];
                    b.data()[c] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>()
                })
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0)
        })
        .collect()
}

fn standardize(train: &Tensor<f32>, test: &Tensor<f32>) -> (Tensor<f64>, Tensor<f64>) {
    let (n, d) = (train.dim(0), train.dim(1));
    let mut mean = vec![0f64; d];
    let mut var = vec![0f64; d];
    for r in train.data().chunks(d) {
        for (j, &v) in r.iter().enumerate() {
            mean[j] += v as f64 / n as f64;
        }
    }
    for r in train.data().chunks(d) {
        for (j, &v) in r.iter().enumerate() {
            var[j] += (v as f64 - mean[j]).powi(2) / n as f64;
        }
    }
    let apply = |t: &Tensor<f32>| {
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let j = i % d;
            (t.data()[i] as f64 - mean[j]) / (var[j].sqrt() + 1e-6)
        })
    };
    (apply(train), apply(test))
}

/// Trains a linear classifier on frozen, pooled encoder features and
/// reports test accuracy. The encoder is evaluated in inference mode and
/// never updated.
pub fn linear_probe(
    model: &FraModel,
    store: &ParamStore<f32>,
    train: &LabeledImages,
    test: &LabeledImages,
    aug: &AugmentationConfig,
    settings: &ProbeSettings,
    task: &str,
) -> Result<ProbeReport> {
    if train.images.is_empty() || test.images.is_empty() {
        return Err(FraError::Domain("linear probe needs at least one training and one test example".into()));
    }
    if train.labels.len() != train.images.len() || test.labels.len() != test.images.len() {
        return Err(FraError::Domain(format!(
            "label/feature count mismatch: {} labels for {} train images, {} labels for {} test images",
            train.labels.len(),
            train.images.len(),
            test.labels.len(),
            test.images.len()
        )));
    }
    if settings.epochs == 0 {
        return Err(FraError::Config("probe epochs must be positive".into()));
    }
    let before = encoder_checksum(store);
    let ftrain = encoder_features(model, store, &train.images, aug)?;
    let ftest = encoder_features(model, store, &test.images, aug)?;
    let (xtr, xte) = standardize(&ftrain, &ftest);
    let classes = train.num_classes().max(test.num_classes()).max(2);
    let (w, b) = train_linear(&xtr, &train.labels, classes, settings);
    let acc = |x: &Tensor<f64>, labels: &[usize]| {
        let pred = predict(x, &w, &b);
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
    };
    let after = encoder_checksum(store);
    Ok(ProbeReport {
        task: task.to_string(),
        accuracy: acc(&xte, &test.labels),
        train_accuracy: acc(&xtr, &train.labels),
        n_train: train.labels.len(),
        n_test: test.labels.len(),
        frozen_encoder: before == after,
        encoder_checksum: after,
        settings: settings.clone(),
    })
}

/// Heatmaps `[B, N, h, w]` at feature-map resolution for raw `[0, 1]` images.
pub fn heatmaps(
    model: &FraModel,
    store: &ParamStore<f32>,
    images: &ImageBatch,
    aug: &AugmentationConfig,
    temperature: f64,
) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut hw = (0, 0);
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = preprocess(&images.select(chunk), aug)?;
        let mut g = Graph::inference();
        let x = g.constant(batch.pixels);
        let out = model.branch(&mut g, store, x, Mode::Eval, temperature)?;
        let m = from_tokens(&mut g, out.probs, out.height, out.width);
        hw = (out.height, out.width);
        data.extend_from_slice(g.value(m).data());
    }
    let n = model.config.num_queries;
    Ok(Tensor::new([images.len(), n, hw.0, hw.1], data))
}

/// Bilinear upsampling of every `[h, w]` plane of `maps` to `[oh, ow]`.
pub fn upsample_maps(maps: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = maps.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
    for plane in maps.data().chunks(h * w) {
        out.extend(resize_plane(plane, w, (0, 0, h, w), oh, ow));
    }
    Tensor::new([s[0], s[1], oh, ow], out)
}

/// Writes a little-endian `f32` array in NumPy `.npy` (version 1.0) format.
pub fn write_npy(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let shape = t.shape().iter().map(|d| format!("{d},")).collect::<String>();
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({shape}), }}");
    let pad = 64 - (10 + header.len() + 1) % 64;
    header.push_str(&" ".repeat(pad % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + t.numel() * 4);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| FraError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| FraError::io(path, e))
}

/// Reads an array written by [`write_npy`].
pub fn read_npy(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| FraError::io(path, e))?;
    let bad = |m: &str| FraError::format(path, m.to_string());
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(bad("not a version 1.0 .npy file"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not UTF-8"))?;
    if !header.contains("'<f4'") || header.contains("'fortran_order': True") {
        return Err(bad("only little-endian f32 C-order arrays are supported"));
    }
    let open = header.find("'shape': (").ok_or_else(|| bad("missing shape"))? + 10;
    let close = open + header[open..].find(')').ok_or_else(|| bad("unterminated shape"))?;
    let shape: Vec<usize> = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape entry")))
        .collect::<Result<_>>()?;
    let payload = &bytes[10 + hlen..];
    let n: usize = shape.iter().product();
    if payload.len() != n * 4 {
        return Err(bad("payload size does not match shape"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::new(shape, data))
}

/// Distinct colors for overlay composites.
const REGION_COLORS: [[f32; 3]; 12] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.60, 0.90],
    [0.20, 0.80, 0.20],
    [0.95, 0.75, 0.10],
    [0.60, 0.20, 0.80],
    [0.10, 0.85, 0.75],
    [0.95, 0.45, 0.70],
    [0.55, 0.35, 0.15],
    [0.50, 0.50, 0.50],
    [0.00, 0.30, 0.60],
    [0.70, 0.90, 0.30],
    [1.00, 0.55, 0.00],
];

/// Min-max scaling of one plane to `[0, 1]` (constant planes map to 0).
pub fn normalize_unit(plane: &[f32]) -> Vec<f32> {
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    plane.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

/// Output of [`export_heatmaps`].
pub struct HeatmapExport {
    /// Heatmaps upsampled to input resolution, `[B, N, H, W]`.
    pub maps: Tensor<f32>,
    pub files: Vec<PathBuf>,
}

/// For every image writes `N` grayscale heatmap PNGs (min-max scaled), one
/// overlay PNG coloring each pixel by its dominant region, and the raw
/// upsampled heatmaps as `.npy`.
pub fn export_heatmaps(
    model: &FraModel,
    store: &ParamStore<f32>,
    images: &ImageBatch,
    names: &[String],
    aug: &AugmentationConfig,
    temperature: f64,
    out_dir: &Path,
) -> Result<HeatmapExport> {
    if names.len() != images.len() {
        return Err(FraError::Domain("one name per image is required".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| FraError::io(out_dir, e))?;
    let (h, w) = (images.height(), images.width());
    let low = heatmaps(model, store, images, aug, temperature)?;
    let maps = upsample_maps(&low, h, w);
    let n = low.dim(1);
    let mut files = Vec::new();
    for (b, stem) in names.iter().enumerate() {
        let per = &maps.data()[b * n * h * w..(b + 1) * n * h * w];
        for (m, plane) in per.chunks(h * w).enumerate() {
            let unit = normalize_unit(plane);
            let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([(unit[y as usize * w + x as usize] * 255.0).round() as u8])
            });
            let p = out_dir.join(format!("{stem}_heatmap{m}.png"));
            gray.save(&p).map_err(|e| FraError::format(&p, e.to_string()))?;
            files.push(p);
        }
        let img = images.image(b);
        let mut overlay = vec![0f32; 3 * h * w];
        for i in 0..h * w {
            let best = (0..n).max_by(|&a, &c| per[a * h * w + i].total_cmp(&per[c * h * w + i])).unwrap_or(0);
            let color = REGION_COLORS[best % REGION_COLORS.len()];
            for c in 0..3 {
                overlay[c * h * w + i] = 0.5 * img[c * h * w + i] + 0.5 * color[c];
            }
        }
        let p = out_dir.join(format!("{stem}_overlay.png"));
        save_png(&p, &overlay, h, w)?;
        files.push(p);
        let p = out_dir.join(format!("{stem}_heatmaps.npy"));
        write_npy(&p, &Tensor::new([n, h, w], per.to_vec()))?;
        files.push(p);
    }
    Ok(HeatmapExport { maps, files })
}

/// Pixels of `plane` holding the top `quantile` of its mass: every pixel whose
/// value is at least the smallest value needed to reach that mass (ties are
/// kept together).
pub fn mass_threshold(plane: &[f32], quantile: f64) -> Vec<bool> {
    let total: f64 = plane.iter().map(|&v| v.max(0.0) as f64).sum();
    if total <= 0.0 {
        return vec![true; plane.len()];
    }
    let mut sorted: Vec<f32> = plane.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0f64;
    let mut cut = sorted[sorted.len() - 1];
    for &v in &sorted {
        acc += v.max(0.0) as f64;
        if acc >= quantile * total * (1.0 - 1e-6) {
            cut = v;
            break;
        }
    }
    plane.iter().map(|&v| v >= cut).collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Maximum-weight assignment of rows to columns of a rectangular score
/// matrix. Returns, for each row, the matched column (each column used at
/// most once; with more rows than columns some rows stay unmatched).
pub fn hungarian_max(scores: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = scores.len();
    let cols = scores.first().map_or(0, |r| r.len());
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let big = scores.iter().flatten().copied().fold(0f64, f64::max);
    // Minimization form on a square matrix padded with zero-score entries.
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            big - scores[i][j]
        } else {
            big
        }
    };
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0f64; n + 1], vec![0f64; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            assign[i - 1] = Some(j - 1);
        }
    }
    assign
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub quantile: f64,
    pub n_images: usize,
    /// Mean IoU over images, `[heatmap][part]`.
    pub iou_matrix: Vec<Vec<f64>>,
    /// Part matched to each heatmap.
    pub heatmap_to_part: Vec<Option<usize>>,
    /// IoU of the heatmap matched to each part (0 when unmatched).
    pub part_iou: Vec<f64>,
    pub unmatched_parts: Vec<usize>,
    /// Mean of `part_iou` over all parts.
    pub mean_best_match_iou: f64,
    /// Expected score of uniform heatmaps: mean part area over canvas area.
    pub uniform_baseline_iou: f64,
}

/// Scores heatmaps `[B, N, H, W]` against binary part masks `[B, P, H, W]`.
///
/// Each heatmap is thresholded to the pixels holding the top `quantile` of
/// its mass; IoU with every part is averaged over images; heatmaps are then
/// matched one-to-one to parts by maximum total IoU. A uniform heatmap keeps
/// every pixel (all values tie), so its IoU with part `p` is
/// `area(p) / area(canvas)`; the baseline averages that over parts and images.
pub fn score_discovery(maps: &Tensor<f32>, masks: &Tensor<f32>, quantile: f64) -> Result<DiscoveryReport> {
    let (ms, ps) = (maps.shape(), masks.shape());
    if ms.len() != 4 || ps.len() != 4 || ms[0] != ps[0] || ms[2..] != ps[2..] {
        return Err(FraError::Domain(format!("heatmaps {:?} and masks {:?} must be [B, *, H, W] alike", ms, ps)));
    }
    let (b, n, p, hw) = (ms[0], ms[1], ps[1], ms[2] * ms[3]);
    if b == 0 {
        return Err(FraError::Domain("discovery scoring needs at least one image".into()));
    }
    let mut matrix = vec![vec![0f64; p]; n];
    let mut baseline = 0f64;
    for i in 0..b {
        let parts: Vec<Vec<bool>> = (0..p)
            .map(|k| masks.data()[(i * p + k) * hw..(i * p + k + 1) * hw].iter().map(|&v| v > 0.5).collect())
            .collect();
        for part in &parts {
            baseline += part.iter().filter(|&&x| x).count() as f64 / hw as f64 / (p * b) as f64;
        }
        for m in 0..n {
            let region = mass_threshold(&maps.data()[(i * n + m) * hw..(i * n + m + 1) * hw], quantile);
            for (k, part) in parts.iter().enumerate() {
                matrix[m][k] += iou(&region, part) / b as f64;
            }
        }
    }
    let assign = hungarian_max(&matrix);
    let mut part_iou = vec![0f64; p];
    let mut matched = vec![false; p];
    for (m, a) in assign.iter().enumerate() {
        if let Some(k) = *a {
            part_iou[k] = matrix[m][k];
            matched[k] = true;
        }
    }
    let unmatched_parts = (0..p).filter(|&k| !matched[k]).collect();
    let mean = part_iou.iter().sum::<f64>() / p.max(1) as f64;
    Ok(DiscoveryReport {
        quantile,
        n_images: b,
        iou_matrix: matrix,
        heatmap_to_part: assign,
        part_iou,
        unmatched_parts,
        mean_best_match_iou: mean,
        uniform_baseline_iou: baseline,
    })
}

/// Convenience: heatmaps for synthetic faces at canvas resolution, scored
/// against their part masks.
pub fn discovery_on_synthetic(
    model: &FraModel,
    store: &ParamStore<f32>,
    spec: &SyntheticFaceSpec,
    count: usize,
    seed: u64,
    aug: &AugmentationConfig,
    temperature: f64,
    quantile: f64,
) -> Result<DiscoveryReport> {
    let batch = synth_range(spec, seed, 0, count)?;
    let low = heatmaps(model, store, &batch.images, aug, temperature)?;
    let maps = upsample_maps(&low, spec.canvas_size, spec.canvas_size);
    score_discovery(&maps, &batch.part_masks, quantile)
}

/// Loads a materialized synthetic dataset (images plus `labels.json`) as a
/// mouth-open classification set.
pub fn labeled_folder(dir: &Path, image_size: usize) -> Result<LabeledImages> {
    let labels = crate::data::read_labels(dir)?;
    let (ds, files) = crate::data::load_folder(dir, image_size)?;
    let mut keep = Vec::new();
    let mut y = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(&open) = labels.mouth_open.get(&name) {
            keep.push(i);
            y.push(open as usize);
        }
    }
    if keep.is_empty() {
        return Err(FraError::Dataset(format!("no labeled images in {}", dir.display())));
    }
    Ok(LabeledImages { images: ds.batch(&keep), labels: y })
}

/// Deterministic shuffled split; the first `train_fraction` goes to training.
pub fn split(set: &LabeledImages, train_fraction: f64, seed: u64) -> (LabeledImages, LabeledImages) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..set.labels.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((idx.len() as f64 * train_fraction).round() as usize).min(idx.len());
    let part = |ids: &[usize]| LabeledImages {
        images: set.images.select(ids),
        labels: ids.iter().map(|&i| set.labels[i]).collect(),
    };
    (part(&idx[..cut]), part(&idx[cut..]))
}
