//! Synthetic face schematics with exact landmark ground truth, and the
//! training-time augmentations.
//!
//! A face is a head ellipse, two dark eye disks, a bright nose disk and a dark
//! mouth arc, drawn with one-pixel anti-aliased edges on a flat background.
//! Landmarks are read directly off the geometry that was drawn, in this order:
//!
//! | indices                    | feature                             |
//! |----------------------------|-------------------------------------|
//! | `0 .. c`                   | head contour, clockwise from the top |
//! | `c`, `c + 1`               | left eye, right eye (image left/right) |
//! | `c + 2`                    | nose                                |
//! | `c + 3 .. N`               | mouth samples, left to right        |
//!
//! with `m = 1 + max(0, N − 12) / 4` mouth samples and `c = N − 3 − m`
//! contour points, so the default `N = 12` is 8 contour points, two eyes,
//! nose and mouth centre.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{AugConfig, DataConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smallest landmark count the template supports.
pub const MIN_LANDMARKS: usize = 8;

const BACKGROUND: f64 = 0.15;
const SKIN: f64 = 0.65;
const EYE: f64 = 0.05;
const NOSE: f64 = 0.95;
const MOUTH: f64 = 0.2;

/// Counts and index layout of the face keypoints for a given `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceTemplate {
    pub num_landmarks: usize,
    pub contour: usize,
    pub mouth: usize,
}

impl FaceTemplate {
    pub fn new(num_landmarks: usize) -> Self {
        let mouth = 1 + num_landmarks.saturating_sub(12) / 4;
        Self {
            num_landmarks,
            contour: num_landmarks.saturating_sub(3 + mouth),
            mouth,
        }
    }

    pub fn eye_indices(&self) -> (usize, usize) {
        (self.contour, self.contour + 1)
    }

    pub fn nose_index(&self) -> usize {
        self.contour + 2
    }

    /// Index permutation under a horizontal flip: the landmark at `k` after
    /// flipping is the mirror of the landmark at `table[k]` before.
    pub fn flip_table(&self) -> Vec<usize> {
        let c = self.contour;
        let mut t: Vec<usize> = (0..c).map(|k| (c - k) % c).collect();
        t.extend([c + 1, c, c + 2]);
        let m0 = c + 3;
        t.extend((0..self.mouth).map(|j| m0 + self.mouth - 1 - j));
        t
    }
}

/// Normalized landmark coordinates, `(x, y)` per point.
///
/// Points may leave `[0, 1]²` after augmentation; they are kept unclamped and
/// [`LandmarkSet::any_outside`] reports it.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn any_outside(&self) -> bool {
        self.points
            .iter()
            .any(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.points.len(), 2], |i| T::of(self.points[i / 2][i % 2]))
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (n, two) = t.dims2("landmarks")?;
        if two != 2 {
            return Err(Error::dim("landmarks", format!("expected N×2, got {:?}", t.shape())));
        }
        Ok(Self {
            points: (0..n).map(|i| [t.at2(i, 0).f64(), t.at2(i, 1).f64()]).collect(),
        })
    }

    pub fn constant(n: usize, at: [f64; 2]) -> Self {
        Self { points: vec![at; n] }
    }
}

/// One rendered face and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `c×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub landmarks: LandmarkSet,
    pub seed: u64,
}

/// Drawn geometry of one face, in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGeometry {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    /// Head rotation in radians (image coordinates, y down).
    pub pose: f64,
    pub eyes: [[f64; 2]; 2],
    pub eye_radius: f64,
    pub nose: [f64; 2],
    pub nose_radius: f64,
    /// Mouth polyline in face-local coordinates.
    pub mouth_local: Vec<[f64; 2]>,
    pub mouth_width: f64,
}

impl FaceGeometry {
    fn to_image(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.pose.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
        ]
    }

    fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.pose.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    fn mouth_curve(&self, u: f64) -> [f64; 2] {
        // u in [-1, 1]; a smile opening downwards in image space
        let ry = self.radii[1];
        [u * 0.5 * self.mouth_width, 0.45 * ry + 0.12 * ry * (1.0 - u * u)]
    }

    fn landmarks(&self, template: &FaceTemplate) -> LandmarkSet {
        let [rx, ry] = self.radii;
        let c = template.contour;
        let mut pts = Vec::with_capacity(template.num_landmarks);
        for k in 0..c {
            let theta = -PI / 2.0 + 2.0 * PI * k as f64 / c as f64;
            pts.push(self.to_image([rx * theta.cos(), ry * theta.sin()]));
        }
        pts.extend(self.eyes);
        pts.push(self.nose);
        let m = template.mouth;
        for j in 0..m {
            let u = if m == 1 { 0.0 } else { -1.0 + 2.0 * j as f64 / (m - 1) as f64 };
            pts.push(self.to_image(self.mouth_curve(u)));
        }
        LandmarkSet::new(pts)
    }

    /// Grey level at normalized point `p`; `px` is one pixel in normalized units.
    fn shade(&self, p: [f64; 2], px: f64) -> f64 {
        let cover = |signed_dist: f64| (0.5 - signed_dist / px).clamp(0.0, 1.0);
        let local = self.to_local(p);
        let [rx, ry] = self.radii;
        let r = ((local[0] / rx).powi(2) + (local[1] / ry).powi(2)).sqrt();
        let head = cover((r - 1.0) * rx.min(ry));
        let mut v = BACKGROUND + (SKIN - BACKGROUND) * head;
        for e in &self.eyes {
            let d = dist(p, *e) - self.eye_radius;
            v += (EYE - v) * cover(d);
        }
        v += (NOSE - v) * cover(dist(p, self.nose) - self.nose_radius);
        let mouth_d = polyline_distance(local, &self.mouth_local) - 0.012;
        v += (MOUTH - v) * cover(mouth_d);
        v
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn polyline_distance(p: [f64; 2], line: &[[f64; 2]]) -> f64 {
    line.windows(2)
        .map(|seg| {
            let (a, b) = (seg[0], seg[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 == 0.0 { 0.0 } else { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) };
            dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
        })
        .fold(f64::INFINITY, f64::min)
}

fn sym(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        rng.random_range(-scale..=scale)
    }
}

fn span(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Samples the geometry of face `seed` without rendering it.
pub fn sample_geometry(cfg: &DataConfig, seed: u64) -> FaceGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    geometry_from_rng(cfg, &mut rng)
}

fn geometry_from_rng(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> FaceGeometry {
    let center = [0.5 + sym(rng, cfg.center_jitter), 0.5 + sym(rng, cfg.center_jitter)];
    let radii = [span(rng, cfg.head_rx), span(rng, cfg.head_ry)];
    let pose = sym(rng, cfg.pose_max_deg).to_radians();
    let [rx, ry] = radii;
    let j = cfg.jitter;
    let eye_dx = 0.42 * rx + sym(rng, j);
    let eye_dy = -0.18 * ry + sym(rng, j);
    let nose_local = [sym(rng, j), 0.12 * ry + sym(rng, j)];
    let mouth_width = 0.9 * rx * (1.0 + sym(rng, 0.15));
    let mut geo = FaceGeometry {
        center,
        radii,
        pose,
        eyes: [[0.0; 2]; 2],
        eye_radius: 0.14 * rx,
        nose: [0.0; 2],
        nose_radius: 0.07 * rx,
        mouth_local: Vec::new(),
        mouth_width,
    };
    geo.eyes = [geo.to_image([-eye_dx, eye_dy]), geo.to_image([eye_dx, eye_dy])];
    geo.nose = geo.to_image(nose_local);
    geo.mouth_local = (0..=16).map(|k| geo.mouth_curve(-1.0 + k as f64 / 8.0)).collect();
    geo
}

/// Renders face `seed`. Pure in `(cfg, seed)`.
pub fn generate_sample(cfg: &DataConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = geometry_from_rng(cfg, &mut rng);
    let template = FaceTemplate::new(cfg.num_landmarks);
    let size = cfg.image_size;
    let px = 1.0 / size as f64;
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("positive std"));
    let mut plane = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = [(x as f64 + 0.5) * px, (y as f64 + 0.5) * px];
            let mut v = geo.shade(p, px);
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            plane.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let image = replicate(&plane, cfg.in_channels, size)?;
    // labels are stored as f32 on export
    let mut landmarks = geo.landmarks(&template);
    for p in &mut landmarks.points {
        *p = [p[0] as f32 as f64, p[1] as f32 as f64];
    }
    Ok(Sample { image, landmarks, seed })
}

fn replicate(plane: &[f32], channels: usize, size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(channels * plane.len());
    for _ in 0..channels {
        data.extend_from_slice(plane);
    }
    Tensor::new(&[channels, size, size], data)
}

/// Mirrors the image left-right and relabels landmarks through `table`.
pub fn flip_horizontal(sample: &Sample, table: &[usize]) -> Result<Sample> {
    let n = sample.landmarks.len();
    if table.len() != n || table.iter().any(|&t| t >= n) {
        return Err(Error::config(format!(
            "flip table of length {} does not fit {n} landmarks",
            table.len()
        )));
    }
    let (c, h, w) = sample.image.dims3("flip")?;
    let src = sample.image.data();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..][..w];
            data.extend(row.iter().rev());
        }
    }
    let points = table
        .iter()
        .map(|&k| {
            let p = sample.landmarks.points[k];
            [1.0 - p[0], p[1]]
        })
        .collect();
    Ok(Sample {
        image: Tensor::new(&[c, h, w], data)?,
        landmarks: LandmarkSet::new(points),
        seed: sample.seed,
    })
}

/// Rotates by `angle` radians about the image centre, then shifts by
/// `(tx, ty)` (normalized units). Points map exactly; the image is resampled
/// bilinearly with zero fill.
pub fn affine(sample: &Sample, angle: f64, tx: f64, ty: f64) -> Result<Sample> {
    let (s, c) = angle.sin_cos();
    let points = sample
        .landmarks
        .points
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - 0.5, p[1] - 0.5);
            [0.5 + c * dx - s * dy + tx, 0.5 + s * dx + c * dy + ty]
        })
        .collect();
    let (ch, h, w) = sample.image.dims3("affine")?;
    let src = sample.image.data();
    let mut data = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            // inverse map of the output pixel centre
            let (ox, oy) = ((x as f64 + 0.5) / w as f64 - 0.5 - tx, (y as f64 + 0.5) / h as f64 - 0.5 - ty);
            let sx = (0.5 + c * ox + s * oy) * w as f64 - 0.5;
            let sy = (0.5 - s * ox + c * oy) * h as f64 - 0.5;
            for k in 0..ch {
                let plane = &src[k * h * w..(k + 1) * h * w];
                data[(k * h + y) * w + x] = bilinear(plane, h, w, sx, sy) as f32;
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(&[ch, h, w], data)?,
        landmarks: LandmarkSet::new(points),
        seed: sample.seed,
    })
}

fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize] as f64
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// Fills a rectangle (pixel bounds, exclusive end) with uniform noise.
/// Landmarks keep their coordinates.
pub fn occlude(sample: &Sample, x0: usize, y0: usize, x1: usize, y1: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (c, h, w) = sample.image.dims3("occlude")?;
    let mut out = sample.clone();
    let data = out.image.data_mut();
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            let v: f32 = rng.random();
            for k in 0..c {
                data[(k * h + y) * w + x] = v;
            }
        }
    }
    Ok(out)
}

/// 3×3 box filter with edge replication.
pub fn blur(sample: &Sample) -> Result<Sample> {
    let (c, h, w) = sample.image.dims3("blur")?;
    let src = sample.image.data();
    let mut data = vec![0f32; src.len()];
    for k in 0..c {
        let plane = &src[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += plane[yy * w + xx];
                    }
                }
                data[(k * h + y) * w + x] = acc / 9.0;
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(&[c, h, w], data)?,
        landmarks: sample.landmarks.clone(),
        seed: sample.seed,
    })
}

/// Resolves the flip correspondence configured in `aug` for `n` landmarks.
pub fn resolve_flip_table(aug: &AugConfig, n: usize) -> Result<Option<Vec<usize>>> {
    match (&aug.flip_table, aug.flip_table_auto) {
        (Some(t), _) => {
            let mut seen = vec![false; n];
            if t.len() != n || t.iter().any(|&k| k >= n || std::mem::replace(&mut seen[k], true)) {
                return Err(Error::config(format!("flip table {t:?} is not a permutation of {n} landmarks")));
            }
            Ok(Some(t.clone()))
        }
        (None, true) => Ok(Some(FaceTemplate::new(n).flip_table())),
        (None, false) => Ok(None),
    }
}

/// Applies each augmentation with its configured probability, in the order
/// flip, rotation + translation, occlusion, blur.
pub fn augment(sample: &Sample, aug: &AugConfig, seed: u64) -> Result<Sample> {
    let flip_table = resolve_flip_table(aug, sample.landmarks.len())?;
    if aug.flip_prob > 0.0 && flip_table.is_none() {
        return Err(Error::config("horizontal flip enabled without a flip correspondence table"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    if rng.random::<f64>() < aug.flip_prob {
        out = flip_horizontal(&out, flip_table.as_deref().expect("checked above"))?;
    }
    let angle = if rng.random::<f64>() < aug.rotate_prob {
        sym(&mut rng, aug.rotate_max_deg).to_radians()
    } else {
        0.0
    };
    let (tx, ty) = if rng.random::<f64>() < aug.translate_prob {
        (sym(&mut rng, aug.translate_max), sym(&mut rng, aug.translate_max))
    } else {
        (0.0, 0.0)
    };
    if angle != 0.0 || tx != 0.0 || ty != 0.0 {
        out = affine(&out, angle, tx, ty)?;
    }
    if rng.random::<f64>() < aug.occlusion_prob {
        let (_, h, w) = out.image.dims3("augment")?;
        let rw = rng.random_range(w / 10..=w * 3 / 10).max(1);
        let rh = rng.random_range(h / 10..=h * 3 / 10).max(1);
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        out = occlude(&out, x0, y0, x0 + rw, y0 + rh, &mut rng)?;
    }
    if rng.random::<f64>() < aug.blur_prob {
        out = blur(&out)?;
    }
    Ok(out)
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of item `index` in stream `stream` under `master`:
/// `splitmix64(splitmix64(master ^ splitmix64(stream)) + index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)).wrapping_add(index))
}

/// Stream ids for [`derive_seed`].
pub mod streams {
    pub const TRAIN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
}

/// Train and test splits generated from one [`DataConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub eye_indices: (usize, usize),
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let split = |stream: u64, count: usize| -> Result<Vec<Sample>> {
            (0..count)
                .map(|i| generate_sample(cfg, derive_seed(cfg.seed, stream, i as u64)))
                .collect()
        };
        Ok(Self {
            train: split(streams::TRAIN, cfg.train_count)?,
            test: split(streams::TEST, cfg.test_count)?,
            eye_indices: cfg.eyes(),
        })
    }
}
