//! RGB-D samples: file IO, synthetic depth-separable scene generation,
//! augmentation, and segmentation metrics.
//!
//! The synthetic scenes are built so that depth genuinely disambiguates
//! classes: two classes always share an identical RGB color but occupy
//! disjoint depth bands, so no RGB-only classifier can tell them apart.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{bilinear_resize2d, nearest_resize2d_u8};
use crate::netpbm::{read_pnm, write_pgm16, write_pgm8, write_ppm8, PnmImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IGNORE_LABEL: u8 = 255;

/// Aligned RGB image, raw depth map, and per-pixel labels.
///
/// `rgb` lies in [0,1]; `depth` holds raw sensor counts (integer-valued
/// floats, normalization happens at prior construction); labels take
/// values in [0,K) plus 255 for ignore.
#[derive(Debug, Clone)]
pub struct RgbdSample<T> {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> RgbdSample<T> {
    pub fn cast<U: Scalar>(&self) -> RgbdSample<U> {
        RgbdSample {
            id: self.id.clone(),
            h: self.h,
            w: self.w,
            rgb: self.rgb.cast(),
            depth: self.depth.cast(),
            labels: self.labels.clone(),
        }
    }
}

// ── file IO ──────────────────────────────────────────────────────────

/// Read an aligned (rgb, depth, labels) triple.
///
/// rgb must be 8-bit P6 (scaled to [0,1] by its maxval), depth 16-bit P5
/// (kept raw), labels 8-bit P5 with maxval 255.
pub fn read_sample<T: Scalar>(
    rgb_path: &Path,
    depth_path: &Path,
    label_path: &Path,
) -> Result<RgbdSample<T>> {
    let rgb_img = read_pnm(rgb_path)?;
    let depth_img = read_pnm(depth_path)?;
    let label_img = read_pnm(label_path)?;

    let (w, h, rgb) = match rgb_img {
        PnmImage::Rgb8 { w, h, maxval, data } => {
            // Divide rather than multiply by a reciprocal: v/maxval is then
            // the exact rounding of the quotient, which is what makes the
            // write/read round-trip bit-exact for 1/255-grid values.
            let maxval = maxval as f64;
            let rgb: Vec<T> = (0..3)
                .flat_map(|c| {
                    data.chunks_exact(3)
                        .map(move |px| T::from_f64(px[c] as f64 / maxval))
                })
                .collect();
            (w, h, Tensor::from_vec(vec![3, h, w], rgb)?)
        }
        _ => {
            return Err(Error::parse(format!(
                "{}: expected an 8-bit P6 rgb image",
                rgb_path.display()
            )))
        }
    };
    let depth = match depth_img {
        PnmImage::Gray16 { w: dw, h: dh, data, .. } => {
            if (dw, dh) != (w, h) {
                return Err(Error::shape(format!(
                    "{}: depth {dw}x{dh} does not match rgb {w}x{h}",
                    depth_path.display()
                )));
            }
            let vals: Vec<T> = data.iter().map(|&v| T::from_f64(v as f64)).collect();
            Tensor::from_vec(vec![h, w], vals)?
        }
        _ => {
            return Err(Error::parse(format!(
                "{}: expected a 16-bit P5 depth map",
                depth_path.display()
            )))
        }
    };
    let labels = match label_img {
        PnmImage::Gray8 {
            w: lw,
            h: lh,
            maxval,
            data,
        } => {
            if (lw, lh) != (w, h) {
                return Err(Error::shape(format!(
                    "{}: labels {lw}x{lh} do not match rgb {w}x{h}",
                    label_path.display()
                )));
            }
            if maxval != 255 {
                return Err(Error::parse(format!(
                    "{}: label maxval must be 255, got {maxval}",
                    label_path.display()
                )));
            }
            data
        }
        _ => {
            return Err(Error::parse(format!(
                "{}: expected an 8-bit P5 label map",
                label_path.display()
            )))
        }
    };
    let id = rgb_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".to_string());
    Ok(RgbdSample {
        id,
        h,
        w,
        rgb,
        depth,
        labels,
    })
}

/// Paths produced by `write_sample` for a sample id.
pub fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{id}.ppm")),
        dir.join(format!("{id}_depth.pgm")),
        dir.join(format!("{id}_labels.pgm")),
    )
}

/// Write a sample as the (P6, 16-bit P5, 8-bit P5) triple.
///
/// Lossless for samples whose rgb lies on the 1/255 grid and whose depth
/// holds integer counts in [0, 65535]; `read_sample` then reproduces the
/// sample bit-exactly.
pub fn write_sample<T: Scalar>(dir: &Path, sample: &RgbdSample<T>) -> Result<()> {
    let (h, w) = (sample.h, sample.w);
    let mut rgb = vec![0u8; h * w * 3];
    for c in 0..3 {
        for i in 0..h * w {
            let v = sample.rgb.data()[c * h * w + i].as_f64();
            rgb[i * 3 + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut depth = vec![0u16; h * w];
    for (o, &v) in depth.iter_mut().zip(sample.depth.data()) {
        let v = v.as_f64();
        if v < 0.0 || v > 65535.0 || v.fract() != 0.0 {
            return Err(Error::data(format!(
                "write_sample: depth value {v} is not an integer count in [0, 65535]"
            )));
        }
        *o = v as u16;
    }
    let (rgb_path, depth_path, label_path) = sample_paths(dir, &sample.id);
    write_ppm8(&rgb_path, w, h, &rgb)?;
    write_pgm16(&depth_path, w, h, &depth)?;
    write_pgm8(&label_path, w, h, &sample.labels)
}

/// One line per sample: `id<TAB>rgb<TAB>depth<TAB>labels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: String,
    pub depth: String,
    pub labels: String,
}

pub fn write_dataset_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.rgb, e.depth, e.labels));
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

pub fn read_dataset_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::parse(format!(
                "{}:{}: expected 4 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                parts.len()
            )));
        }
        entries.push(ManifestEntry {
            id: parts[0].to_string(),
            rgb: parts[1].to_string(),
            depth: parts[2].to_string(),
            labels: parts[3].to_string(),
        });
    }
    Ok(entries)
}

// ── synthetic scenes ─────────────────────────────────────────────────

const COLLIDING_COLOR: [f64; 3] = [0.30, 0.45, 0.60];
const PALETTE: [[f64; 3]; 8] = [
    [0.55, 0.50, 0.45],
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.80],
    [0.85, 0.75, 0.20],
    [0.60, 0.25, 0.70],
    [0.20, 0.70, 0.70],
    [0.90, 0.55, 0.25],
];

/// Base color of a class. The two highest class ids always share one
/// color; depth alone separates them.
pub fn class_color(class: usize, k: usize) -> [f64; 3] {
    if class + 2 >= k {
        COLLIDING_COLOR
    } else {
        PALETTE[class % PALETTE.len()]
    }
}

/// Raw depth band center (sensor counts) of a class.
fn class_depth_center(class: usize, k: usize) -> f64 {
    if class == 0 {
        4000.0 // background, farthest
    } else if class == k - 1 {
        900.0 // near colliding class
    } else if class == k - 2 {
        3400.0 // far colliding class, close to the background band
    } else {
        // middle classes spread over [1500, 2800]
        let middles = (k as f64 - 3.0).max(1.0);
        1500.0 + (class as f64 - 1.0) * 1300.0 / middles
    }
}

/// Deterministic synthetic scene: K-1 axis-aligned rectangles over a
/// background, depth rendered with additive low-amplitude integer noise,
/// exact labels. Every class covers at least h*w/256 pixels.
pub fn synth_scene<T: Scalar>(seed: u64, h: usize, w: usize, k: usize) -> Result<RgbdSample<T>> {
    if k < 2 || k > 250 {
        return Err(Error::param(format!("synth_scene needs 2 <= K <= 250, got {k}")));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!(
            "synth_scene dims {h}x{w} must be divisible by 32"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_pixels = (h * w) / 256;

    // Rectangles are drawn far-to-near so nearer classes occlude.
    let mut order: Vec<usize> = (1..k).collect();
    order.sort_by(|a, b| {
        class_depth_center(*b, k)
            .partial_cmp(&class_depth_center(*a, k))
            .unwrap()
    });

    let mut labels = vec![0u8; h * w];
    for attempt in 0..64 {
        labels.fill(0);
        for &class in &order {
            let rh = rng.gen_range(h / 4..=h / 2);
            let rw = rng.gen_range(w / 4..=w / 2);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    labels[y * w + x] = class as u8;
                }
            }
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        if counts.iter().all(|&c| c >= min_pixels) {
            break;
        }
        if attempt == 63 {
            return Err(Error::data(format!(
                "synth_scene: could not place all {k} classes for seed {seed}"
            )));
        }
    }

    // Paint rgb and depth from the label map.
    let mut rgb = vec![T::zero(); 3 * h * w];
    let mut depth = vec![T::zero(); h * w];
    for i in 0..h * w {
        let class = labels[i] as usize;
        let color = class_color(class, k);
        for (c, &base) in color.iter().enumerate() {
            let noise = (rng.gen::<f64>() - 0.5) * 3.0 / 255.0;
            let q = ((base + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            rgb[c * h * w + i] = T::from_f64(q);
        }
        let dnoise = rng.gen_range(-40i64..=40) as f64;
        depth[i] = T::from_f64((class_depth_center(class, k) + dnoise).clamp(0.0, 65535.0));
    }

    Ok(RgbdSample {
        id: format!("synth{seed:06}"),
        h,
        w,
        rgb: Tensor::from_vec(vec![3, h, w], rgb)?,
        depth: Tensor::from_vec(vec![h, w], depth)?,
        labels,
    })
}

// ── augmentation ─────────────────────────────────────────────────────

fn flip_h<T: Copy>(data: &mut [T], h: usize, w: usize, channels: usize) {
    for c in 0..channels {
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            plane[y * w..(y + 1) * w].reverse();
        }
    }
}

/// Deterministic augmentation core: optional horizontal flip of the
/// aligned triple, then rescaling by `scale` (bilinear for rgb/depth,
/// nearest for labels) followed by a center crop or edge pad back to the
/// original size. A scale of exactly 1 is the identity.
pub fn augment_with<T: Scalar>(s: &RgbdSample<T>, flip: bool, scale: f64) -> Result<RgbdSample<T>> {
    if !(0.1..=8.0).contains(&scale) {
        return Err(Error::param(format!("augment scale {scale} out of range")));
    }
    let (h, w) = (s.h, s.w);
    let mut rgb: Vec<T> = s.rgb.data().to_vec();
    let mut depth: Vec<T> = s.depth.data().to_vec();
    let mut labels = s.labels.clone();
    if flip {
        flip_h(&mut rgb, h, w, 3);
        flip_h(&mut depth, h, w, 1);
        flip_h(&mut labels, h, w, 1);
    }
    if scale != 1.0 {
        let nh = ((h as f64 * scale).round() as usize).max(1);
        let nw = ((w as f64 * scale).round() as usize).max(1);
        let mut rgb_s = Vec::with_capacity(3 * nh * nw);
        for c in 0..3 {
            rgb_s.extend(bilinear_resize2d(
                &rgb[c * h * w..(c + 1) * h * w],
                h,
                w,
                nh,
                nw,
            ));
        }
        let depth_s = bilinear_resize2d(&depth, h, w, nh, nw);
        let labels_s = nearest_resize2d_u8(&labels, h, w, nh, nw);
        // Center crop (scaled up) or edge pad (scaled down), one clamped
        // index map for all three.
        let off_y = nh as isize - h as isize; // divided by 2 below
        let off_x = nw as isize - w as isize;
        let src_y: Vec<usize> = (0..h)
            .map(|y| (y as isize + off_y / 2).clamp(0, nh as isize - 1) as usize)
            .collect();
        let src_x: Vec<usize> = (0..w)
            .map(|x| (x as isize + off_x / 2).clamp(0, nw as isize - 1) as usize)
            .collect();
        let mut rgb_o = vec![T::zero(); 3 * h * w];
        let mut depth_o = vec![T::zero(); h * w];
        let mut labels_o = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let si = src_y[y] * nw + src_x[x];
                for c in 0..3 {
                    rgb_o[c * h * w + y * w + x] = rgb_s[c * nh * nw + si];
                }
                depth_o[y * w + x] = depth_s[si];
                labels_o[y * w + x] = labels_s[si];
            }
        }
        rgb = rgb_o;
        depth = depth_o;
        labels = labels_o;
    }
    Ok(RgbdSample {
        id: s.id.clone(),
        h,
        w,
        rgb: Tensor::from_vec(vec![3, h, w], rgb)?,
        depth: Tensor::from_vec(vec![h, w], depth)?,
        labels,
    })
}

/// Random flip (p = 0.5) and random scale in [0.5, 1.75].
pub fn augment<T: Scalar>(s: &RgbdSample<T>, rng: &mut impl Rng) -> Result<RgbdSample<T>> {
    let flip = rng.gen_bool(0.5);
    let scale = rng.gen::<f64>() * 1.25 + 0.5;
    augment_with(s, flip, scale)
}

// ── metrics ──────────────────────────────────────────────────────────

/// K x K confusion counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct MiouResult {
    /// Per-class IoU; `None` when the class is absent from both
    /// prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn record(&mut self, gt: u8, pred: u8) {
        if gt == IGNORE_LABEL {
            return;
        }
        debug_assert!((gt as usize) < self.k && (pred as usize) < self.k);
        self.counts[gt as usize * self.k + pred as usize] += 1;
    }

    pub fn record_slices(&mut self, gt: &[u8], pred: &[u8]) {
        for (&g, &p) in gt.iter().zip(pred) {
            self.record(g, p);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean intersection-over-union; classes with an empty union are
    /// excluded from the mean.
    pub fn miou(&self) -> MiouResult {
        let k = self.k;
        let mut per_class = Vec::with_capacity(k);
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let row: u64 = (0..k).map(|j| self.counts[c * k + j]).sum();
            let col: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
            let denom = row + col - tp;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                n += 1;
            }
        }
        MiouResult {
            per_class,
            mean: if n > 0 { sum / n as f64 } else { 0.0 },
        }
    }
}

/// Per-pixel argmax over [K,h,w] logits with lowest-index tie-break.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.shape()[0];
    let plane = logits.numel() / k;
    let mut out = vec![0u8; plane];
    for (i, o) in out.iter_mut().enumerate() {
        let mut best = logits.data()[i];
        let mut best_c = 0u8;
        for c in 1..k {
            let v = logits.data()[c * plane + i];
            if v > best {
                best = v;
                best_c = c as u8;
            }
        }
        *o = best_c;
    }
    out
}
