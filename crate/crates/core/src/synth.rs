//! Procedural faces with coupled AU labels, AU-driven shape deformations and
//! AU-driven appearance.
//!
//! The generator "world" (template, per-AU deformation directions, appearance
//! ridge layout) is fixed and independent of the user seed, so datasets drawn
//! with different seeds share one underlying model. The seed only drives the
//! per-sample draws: labels, shape noise, pose and pixel noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AuLabels, FaceBox, FaceShape, Frame, GrayImage, Point2, Sample};
use crate::rng::{stream, stream_rng};

pub const TEMPLATE_LANDMARKS: usize = 28;
pub const LEFT_EYE_OUTER: usize = 6;
pub const RIGHT_EYE_OUTER: usize = 12;
pub const EYE_INDICES: (usize, usize) = (LEFT_EYE_OUTER, RIGHT_EYE_OUTER);
pub const MAX_AUS: usize = 20;

/// Seed of the fixed generator world.
const WORLD_SEED: u64 = 0x5eed_f0ce;

/// Template in face units, origin at the face center, y pointing down.
/// Layout: brows 0..6, left eye 6..10 (outer, top, inner, bottom),
/// right eye 10..14 (inner, top, outer, bottom), nose 14..18, mouth 18..28.
const TEMPLATE: [(f64, f64); TEMPLATE_LANDMARKS] = [
    (-0.35, -0.30),
    (-0.22, -0.35),
    (-0.08, -0.30),
    (0.08, -0.30),
    (0.22, -0.35),
    (0.35, -0.30),
    (-0.32, -0.15),
    (-0.21, -0.19),
    (-0.10, -0.15),
    (-0.21, -0.11),
    (0.10, -0.15),
    (0.21, -0.19),
    (0.32, -0.15),
    (0.21, -0.11),
    (0.0, -0.08),
    (0.0, 0.08),
    (-0.08, 0.12),
    (0.08, 0.12),
    (-0.20, 0.28),
    (-0.10, 0.24),
    (0.0, 0.25),
    (0.10, 0.24),
    (0.20, 0.28),
    (0.10, 0.34),
    (0.0, 0.36),
    (-0.10, 0.34),
    (0.0, 0.28),
    (0.0, 0.31),
];

/// Line segments rendered as strokes.
const EDGES: [(usize, usize); 27] = [
    (0, 1),
    (1, 2),
    (3, 4),
    (4, 5),
    (6, 7),
    (7, 8),
    (8, 9),
    (9, 6),
    (10, 11),
    (11, 12),
    (12, 13),
    (13, 10),
    (14, 15),
    (15, 16),
    (15, 17),
    (18, 19),
    (19, 20),
    (20, 21),
    (21, 22),
    (22, 23),
    (23, 24),
    (24, 25),
    (25, 18),
    (18, 26),
    (26, 22),
    (18, 27),
    (27, 22),
];

/// Facial regions that own AU effects: brows, eyes, nose, mouth.
const REGIONS: [std::ops::Range<usize>; 4] = [0..6, 6..14, 14..18, 18..28];

// Rendering and pose constants, in pixels unless noted.
const BACKGROUND: f64 = 0.62;
const STROKE_SIGMA: f64 = 1.1;
const RIDGE_SIGMA: f64 = 1.3;
const SCALE_RANGE: (f64, f64) = (68.0, 82.0);
const STROKE_DEPTH: f64 = 0.22;
const PIXEL_NOISE: f64 = 0.15;
const MAX_ROTATION_DEG: f64 = 1.0;
/// Random distractor strokes per image, drawn inside the face box.
const CLUTTER: usize = 40;
const CLUTTER_DEPTH: f64 = 0.3;
const BOX_INFLATION: f64 = 1.2;
const MARGIN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_aus: usize,
    pub d_landmarks: usize,
    pub image_size: usize,
    /// Per-coordinate landmark noise, in face units.
    pub shape_noise: f64,
    /// Ising couplings `(i, j, J_ij)`.
    pub au_pair_coupling: Vec<(usize, usize, f64)>,
    /// Norm of each AU deformation vector, in face units.
    pub deform_magnitude: f64,
    /// Ising field shared by every AU.
    pub au_bias: f64,
    /// Peak intensity of an active AU's appearance ridge.
    pub appearance_contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            n_aus: 8,
            d_landmarks: TEMPLATE_LANDMARKS,
            image_size: 128,
            shape_noise: 0.01,
            au_pair_coupling: default_coupling(8),
            deform_magnitude: 0.08,
            au_bias: -2.0,
            appearance_contrast: 0.05,
            seed: 0,
        }
    }
}

/// AUs `2k` and `2k+1` form a group: strong positive coupling inside a
/// group, negative coupling between groups.
pub fn default_coupling(n_aus: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..n_aus {
        for j in i + 1..n_aus {
            let strength = if i / 2 == j / 2 { 5.0 } else { -2.0 };
            out.push((i, j, strength));
        }
    }
    out
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        if self.n_aus == 0 || self.n_aus > MAX_AUS {
            return Err(Error::InvalidConfig(format!(
                "n_aus must be in 1..={MAX_AUS}, got {}",
                self.n_aus
            )));
        }
        if self.d_landmarks != TEMPLATE_LANDMARKS {
            return Err(Error::InvalidConfig(format!(
                "the face template has {TEMPLATE_LANDMARKS} landmarks, got d_landmarks = {}",
                self.d_landmarks
            )));
        }
        if self.image_size < 64 {
            return Err(Error::InvalidConfig(format!(
                "image_size must be at least 64, got {}",
                self.image_size
            )));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.shape_noise)
            || !finite_nonneg(self.deform_magnitude)
            || !finite_nonneg(self.appearance_contrast)
            || !self.au_bias.is_finite()
        {
            return Err(Error::InvalidConfig(
                "noise, deformation and contrast must be finite and non-negative".into(),
            ));
        }
        for &(i, j, s) in &self.au_pair_coupling {
            if i >= self.n_aus || j >= self.n_aus || i == j || !s.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "invalid coupling ({i}, {j}, {s}) for {} AUs",
                    self.n_aus
                )));
            }
        }
        Ok(())
    }
}

/// The neutral template, scaled so that its inflated bounding box has unit
/// size. Face units then coincide with canonical units up to the small
/// change of extent caused by deformation and noise.
pub fn template() -> FaceShape {
    let pts: Vec<Point2> = TEMPLATE.iter().map(|&(x, y)| Point2::new(x, y)).collect();
    let (x0, y0, x1, y1) = extent(&pts);
    let unit = 1.0 / (BOX_INFLATION * (x1 - x0).max(y1 - y0));
    let points = pts
        .iter()
        .map(|p| Point2::new(p.x * unit, p.y * unit))
        .collect();
    FaceShape::new(points, Frame::Canonical).expect("template is finite")
}

/// Per-AU deformation vectors (interleaved x/y, length `2·28`), each
/// supported on one facial region, mutually orthogonal and of norm
/// `magnitude`.
pub fn deformation_basis(n_aus: usize, magnitude: f64) -> Vec<Vec<f64>> {
    let dim = 2 * TEMPLATE_LANDMARKS;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_aus);
    for i in 0..n_aus {
        let mut rng = stream_rng(WORLD_SEED, stream::SYNTH_DEFORMATIONS, i as u64);
        let region = &REGIONS[i % REGIONS.len()];
        let mut v = vec![0.0; dim];
        for k in region.clone() {
            v[2 * k] = rng.sample(StandardNormal);
            v[2 * k + 1] = rng.sample(StandardNormal);
        }
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (a, c) in v.iter_mut().zip(b) {
                *a -= proj * c;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        // a region can run out of free directions once many AUs share it
        if norm < 1e-9 {
            v.iter_mut().for_each(|a| *a = 0.0);
            v[2 * (i % TEMPLATE_LANDMARKS)] = 1.0;
        } else {
            v.iter_mut().for_each(|a| *a /= norm);
        }
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|a| a * magnitude).collect())
        .collect()
}

/// Appearance ridge of one AU: a segment between two landmarks of its region,
/// displaced sideways by `offset` face units.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ridge {
    a: usize,
    b: usize,
    offset: f64,
}

fn ridge_layout(n_aus: usize) -> Vec<Ridge> {
    (0..n_aus)
        .map(|i| {
            let mut rng = stream_rng(WORLD_SEED, stream::SYNTH_POSE_LAYOUT, i as u64);
            let region = REGIONS[i % REGIONS.len()].clone();
            let a = rng.random_range(region.clone());
            let mut b = rng.random_range(region.clone());
            if b == a {
                b = if a + 1 < region.end {
                    a + 1
                } else {
                    region.start
                };
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Ridge {
                a,
                b,
                offset: sign * rng.random_range(0.03..0.06),
            }
        })
        .collect()
}

/// Pairwise binary model `P(a) ∝ exp(Σ hᵢaᵢ + Σ Jᵢⱼaᵢaⱼ)` sampled through
/// its exactly enumerated distribution.
#[derive(Debug, Clone)]
pub struct IsingModel {
    n: usize,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl IsingModel {
    pub fn new(n: usize, bias: f64, couplings: &[(usize, usize, f64)]) -> Result<Self> {
        if n == 0 || n > MAX_AUS {
            return Err(Error::InvalidConfig(format!(
                "Ising model supports 1..={MAX_AUS} units, got {n}"
            )));
        }
        let mut log_w = Vec::with_capacity(1 << n);
        for bits in 0..(1u64 << n) {
            let on = |i: usize| (bits >> i) & 1 == 1;
            let mut e = bias * bits.count_ones() as f64;
            for &(i, j, s) in couplings {
                if on(i) && on(j) {
                    e += s;
                }
            }
            log_w.push(e);
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { n, probs, cdf })
    }

    /// Probability of each joint configuration, indexed by bit pattern.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn marginal(&self, i: usize) -> f64 {
        self.expectation(|bits| (bits >> i) & 1 == 1)
    }

    /// Pearson correlation between units `i` and `j`.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        let pi = self.marginal(i);
        let pj = self.marginal(j);
        let pij = self.expectation(|bits| (bits >> i) & 1 == 1 && (bits >> j) & 1 == 1);
        (pij - pi * pj) / (pi * (1.0 - pi) * pj * (1.0 - pj)).sqrt()
    }

    fn expectation(&self, f: impl Fn(u64) -> bool) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|(bits, _)| f(*bits as u64))
            .map(|(_, p)| p)
            .sum()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AuLabels {
        let total = *self.cdf.last().expect("non-empty");
        let u: f64 = rng.random::<f64>() * total;
        let idx = self
            .cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1);
        AuLabels::from_bits(idx as u64, self.n)
    }
}

/// Fixed world state shared by every sample of a run.
struct World {
    basis: Vec<Vec<f64>>,
    ridges: Vec<Ridge>,
    ising: IsingModel,
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let world = World {
        basis: deformation_basis(cfg.n_aus, cfg.deform_magnitude),
        ridges: ridge_layout(cfg.n_aus),
        ising: IsingModel::new(cfg.n_aus, cfg.au_bias, &cfg.au_pair_coupling)?,
    };
    (0..cfg.n_samples)
        .map(|i| generate_one(cfg, &world, i))
        .collect()
}

fn generate_one(cfg: &SynthConfig, world: &World, index: usize) -> Result<Sample> {
    let mut rng = stream_rng(cfg.seed, stream::SYNTH_SAMPLE, index as u64);
    let labels = world.ising.sample(&mut rng);

    let mut local = template().to_flat();
    for (i, d) in world.basis.iter().enumerate() {
        if labels.is_active(i) {
            for (v, dv) in local.iter_mut().zip(d) {
                *v += dv;
            }
        }
    }
    for v in local.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += cfg.shape_noise * z;
    }

    let pose = Pose::sample(&local, cfg.image_size as f64, &mut rng);
    let pixels: Vec<Point2> = local
        .chunks_exact(2)
        .map(|p| pose.apply(p[0], p[1]))
        .collect();
    let gt_shape = FaceShape::new(pixels.clone(), Frame::ImagePixels)?;
    let face_box = bounding_box(&pixels);

    let mut canvas = vec![BACKGROUND; cfg.image_size * cfg.image_size];
    for &(a, b) in &EDGES {
        draw_segment(
            &mut canvas,
            cfg.image_size,
            pixels[a],
            pixels[b],
            STROKE_SIGMA,
            -STROKE_DEPTH,
        );
    }
    for _ in 0..CLUTTER {
        let (x0, y0) = (
            face_box.left + rng.random::<f64>() * face_box.width,
            face_box.top + rng.random::<f64>() * face_box.height,
        );
        let ang = rng.random::<f64>() * PI;
        let len = 4.0 + rng.random::<f64>() * 12.0;
        let amp = CLUTTER_DEPTH * (rng.random::<f64>() * 2.0 - 1.0);
        draw_segment(
            &mut canvas,
            cfg.image_size,
            Point2::new(x0, y0),
            Point2::new(x0 + len * ang.cos(), y0 + len * ang.sin()),
            STROKE_SIGMA,
            amp,
        );
    }
    for (i, ridge) in world.ridges.iter().enumerate() {
        if labels.is_active(i) {
            let (p, q) = ridge_endpoints(ridge, &local, &pose);
            draw_segment(
                &mut canvas,
                cfg.image_size,
                p,
                q,
                RIDGE_SIGMA,
                cfg.appearance_contrast,
            );
        }
    }
    for v in canvas.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = quantize(*v + PIXEL_NOISE * z);
    }
    let image = GrayImage::new(cfg.image_size, cfg.image_size, canvas)?;
    let sample = Sample {
        image,
        face_box,
        gt_shape,
        gt_labels: labels,
    };
    sample.validate(cfg.d_landmarks, cfg.n_aus)?;
    Ok(sample)
}

/// Rounds to the nearest representable 8-bit level so that images survive a
/// PGM round trip unchanged.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Pose {
    scale: f64,
    cos: f64,
    sin: f64,
    tx: f64,
    ty: f64,
}

impl Pose {
    fn sample(local: &[f64], size: f64, rng: &mut impl Rng) -> Self {
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let max_rot = MAX_ROTATION_DEG * PI / 180.0;
        let theta = rng.random_range(-max_rot..=max_rot);
        let (sin, cos) = theta.sin_cos();
        let mut pose = Self {
            scale,
            cos,
            sin,
            tx: 0.0,
            ty: 0.0,
        };
        // Translation range keeping the inflated bounding box inside the image.
        let pts: Vec<Point2> = local
            .chunks_exact(2)
            .map(|p| pose.apply(p[0], p[1]))
            .collect();
        let (x0, y0, x1, y1) = extent(&pts);
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let half = BOX_INFLATION * (x1 - x0).max(y1 - y0) / 2.0 + MARGIN;
        let lo = half;
        let hi = (size - 1.0 - half).max(lo);
        pose.tx = rng.random_range(lo..=hi) - cx;
        pose.ty = rng.random_range(lo..=hi) - cy;
        pose
    }

    fn apply(&self, x: f64, y: f64) -> Point2 {
        Point2::new(
            self.scale * (self.cos * x - self.sin * y) + self.tx,
            self.scale * (self.sin * x + self.cos * y) + self.ty,
        )
    }
}

fn extent(pts: &[Point2]) -> (f64, f64, f64, f64) {
    pts.iter().fold(
        (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ),
        |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
    )
}

/// Tight bounding box inflated by 20% about its center.
fn bounding_box(pts: &[Point2]) -> FaceBox {
    let (x0, y0, x1, y1) = extent(pts);
    let w = (x1 - x0) * BOX_INFLATION;
    let h = (y1 - y0) * BOX_INFLATION;
    let cx = (x0 + x1) / 2.0;
    let cy = (y0 + y1) / 2.0;
    FaceBox {
        left: cx - w / 2.0,
        top: cy - h / 2.0,
        width: w,
        height: h,
    }
}

fn ridge_endpoints(ridge: &Ridge, local: &[f64], pose: &Pose) -> (Point2, Point2) {
    let (ax, ay) = (local[2 * ridge.a], local[2 * ridge.a + 1]);
    let (bx, by) = (local[2 * ridge.b], local[2 * ridge.b + 1]);
    let (dx, dy) = (bx - ax, by - ay);
    let len = (dx * dx + dy * dy).sqrt().max(1e-12);
    let (nx, ny) = (-dy / len * ridge.offset, dx / len * ridge.offset);
    (pose.apply(ax + nx, ay + ny), pose.apply(bx + nx, by + ny))
}

/// Adds `amplitude · exp(−dist²/2σ²)` around the segment `p`–`q`.
fn draw_segment(canvas: &mut [f64], size: usize, p: Point2, q: Point2, sigma: f64, amplitude: f64) {
    let reach = 3.0 * sigma;
    let x_lo = (p.x.min(q.x) - reach).floor().max(0.0) as usize;
    let y_lo = (p.y.min(q.y) - reach).floor().max(0.0) as usize;
    let x_hi = ((p.x.max(q.x) + reach).ceil() as usize).min(size - 1);
    let y_hi = ((p.y.max(q.y) + reach).ceil() as usize).min(size - 1);
    let (dx, dy) = (q.x - p.x, q.y - p.y);
    let len2 = dx * dx + dy * dy;
    let inv = -0.5 / (sigma * sigma);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (px, py) = (x as f64 - p.x, y as f64 - p.y);
            let t = if len2 > 0.0 {
                ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (px - t * dx, py - t * dy);
            canvas[y * size + x] += amplitude * ((ex * ex + ey * ey) * inv).exp();
        }
    }
}
