//! Gradient-orientation histogram descriptors sampled around landmarks.
//!
//! Each landmark gets a `grid × grid × bins` histogram of image gradient
//! magnitudes over the square window `center ± radius`. Gradients come from
//! central differences on the replicate-padded image. Votes are spread
//! bilinearly over spatial cells and linearly over (circular) orientation
//! bins, weighted by a Gaussian of σ = radius/2 around the real-valued
//! center. The histogram is L2-normalized, clipped, and renormalized.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FaceBox, FaceShape, Frame, GrayImage, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    /// Window half-width as a fraction of the face size.
    pub radius_fraction: f64,
    pub grid_cells: usize,
    pub orientation_bins: usize,
    pub clip_threshold: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            radius_fraction: 0.166,
            grid_cells: 4,
            orientation_bins: 8,
            clip_threshold: 0.2,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_fraction > 0.0 && self.radius_fraction.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "radius_fraction must be positive, got {}",
                self.radius_fraction
            )));
        }
        if self.grid_cells < 1 {
            return Err(Error::InvalidConfig("grid_cells must be at least 1".into()));
        }
        if self.orientation_bins < 2 {
            return Err(Error::InvalidConfig(
                "orientation_bins must be at least 2".into(),
            ));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_threshold must be positive, got {}",
                self.clip_threshold
            )));
        }
        Ok(())
    }

    /// Per-landmark descriptor length `F = grid² · bins`.
    pub fn descriptor_len(&self) -> usize {
        self.grid_cells * self.grid_cells * self.orientation_bins
    }

    /// Stacked feature length `F·D + 1` (trailing bias entry).
    pub fn feature_len(&self, n_landmarks: usize) -> usize {
        self.descriptor_len() * n_landmarks + 1
    }
}

/// Stacked per-landmark descriptors followed by a constant 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// One lattice line of a descriptor window: its pixel coordinate, Gaussian
/// weight and up to two `(cell, weight)` spatial bins.
struct Tap {
    pos: i64,
    weight: f64,
    cells: [(usize, f64); 2],
    len: usize,
}

/// Per-pixel gradient magnitude and angle (radians in `[0, 2π)`) of an image.
pub struct GradientField<'a> {
    image: &'a GrayImage,
    magnitude: Vec<f64>,
    angle: Vec<f64>,
}

fn gradient_at(image: &GrayImage, x: i64, y: i64) -> (f64, f64) {
    let gx = 0.5 * (image.get_clamped(x + 1, y) - image.get_clamped(x - 1, y));
    let gy = 0.5 * (image.get_clamped(x, y + 1) - image.get_clamped(x, y - 1));
    polar(gx, gy)
}

fn polar(gx: f64, gy: f64) -> (f64, f64) {
    // pixel values are bounded, so the plain norm cannot overflow
    let mag = (gx * gx + gy * gy).sqrt();
    let mut ang = gy.atan2(gx);
    if ang < 0.0 {
        ang += TAU;
    }
    if ang >= TAU {
        ang = 0.0;
    }
    (mag, ang)
}

impl<'a> GradientField<'a> {
    pub fn new(image: &'a GrayImage) -> Self {
        let (w, h) = (image.width(), image.height());
        let px = image.pixels();
        let mut magnitude = vec![0.0; w * h];
        let mut angle = vec![0.0; w * h];
        for y in 0..h {
            let interior_row = y > 0 && y + 1 < h;
            for x in 0..w {
                let (m, a) = if interior_row && x > 0 && x + 1 < w {
                    let i = y * w + x;
                    polar(0.5 * (px[i + 1] - px[i - 1]), 0.5 * (px[i + w] - px[i - w]))
                } else {
                    gradient_at(image, x as i64, y as i64)
                };
                magnitude[y * w + x] = m;
                angle[y * w + x] = a;
            }
        }
        Self {
            image,
            magnitude,
            angle,
        }
    }

    fn at(&self, x: i64, y: i64) -> (f64, f64) {
        let (w, h) = (self.image.width() as i64, self.image.height() as i64);
        if x >= 0 && y >= 0 && x < w && y < h {
            let i = (y * w + x) as usize;
            (self.magnitude[i], self.angle[i])
        } else {
            gradient_at(self.image, x, y)
        }
    }

    /// Writes the descriptor of the window `center ± radius` into `out` (length F).
    pub fn describe_into(
        &self,
        center: Point2,
        radius: f64,
        cfg: &DescriptorConfig,
        out: &mut [f64],
    ) {
        let grid = cfg.grid_cells;
        let bins = cfg.orientation_bins;
        debug_assert_eq!(out.len(), cfg.descriptor_len());
        out.iter_mut().for_each(|v| *v = 0.0);

        // regular lattice anchored at the rounded center; floor(c + 0.5) keeps
        // the anchor equivariant under integer shifts
        let anchor_x = (center.x + 0.5).floor() as i64;
        let anchor_y = (center.y + 0.5).floor() as i64;
        let reach = radius.ceil() as i64 + 1;
        let sigma = radius / 2.0;
        let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
        let cell_scale = grid as f64 / (2.0 * radius);
        let bin_scale = bins as f64 / TAU;

        // separable Gaussian weight plus the (cell, weight) pairs each lattice
        // line feeds, per column and per row
        let axis = |anchor: i64, c: f64| -> Vec<Tap> {
            (-reach..=reach)
                .filter_map(|i| {
                    let p = anchor + i;
                    let d = p as f64 - c;
                    if d.abs() > radius {
                        return None;
                    }
                    let g = (-d * d * inv_two_sigma_sq).exp();
                    let cell = (d + radius) * cell_scale - 0.5;
                    let c0 = cell.floor();
                    let f = cell - c0;
                    let c0 = c0 as i64;
                    let mut cells = [(0, 0.0); 2];
                    let mut len = 0;
                    for (ci, w) in [(c0, 1.0 - f), (c0 + 1, f)] {
                        if ci >= 0 && ci < grid as i64 && w != 0.0 {
                            cells[len] = (ci as usize, w);
                            len += 1;
                        }
                    }
                    Some(Tap {
                        pos: p,
                        weight: g,
                        cells,
                        len,
                    })
                })
                .collect()
        };
        let cols = axis(anchor_x, center.x);
        let rows = axis(anchor_y, center.y);

        let (w, h) = (self.image.width() as i64, self.image.height() as i64);
        let inside = |v: &[Tap], limit: i64| {
            v.first().is_some_and(|f| f.pos >= 0) && v.last().is_some_and(|l| l.pos < limit)
        };
        let interior = inside(&cols, w) && inside(&rows, h);

        for row in &rows {
            let (py, gy_weight, y_cells) = (row.pos, row.weight, &row.cells[..row.len]);
            for col in &cols {
                let (px, gx_weight, x_cells) = (col.pos, col.weight, &col.cells[..col.len]);
                let (mag, ang) = if interior {
                    let i = (py * w + px) as usize;
                    (self.magnitude[i], self.angle[i])
                } else {
                    self.at(px, py)
                };
                if mag == 0.0 {
                    continue;
                }
                let vote = mag * gx_weight * gy_weight;
                // ob ≥ 0, so truncation is the floor
                let ob = ang * bin_scale;
                let ob0 = ob as usize;
                let fo = ob - ob0 as f64;
                // angles lie in [0, 2π), so ob0 ≤ bins
                let b0 = match ob0 {
                    b if b >= bins => b - bins,
                    b => b,
                };
                let b1 = if b0 + 1 == bins { 0 } else { b0 + 1 };

                for &(cy, wy) in y_cells {
                    for &(cx, wx) in x_cells {
                        let base = (cy * grid + cx) * bins;
                        let w = vote * wy * wx;
                        out[base + b0] += w * (1.0 - fo);
                        out[base + b1] += w * fo;
                    }
                }
            }
        }

        normalize_clip(out, cfg.clip_threshold);
    }
}

fn normalize_clip(v: &mut [f64], clip: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    for x in v.iter_mut() {
        *x = (*x / norm).min(clip);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Descriptor of length `F` for one window centered at `center` (pixels).
pub fn extract_descriptor(
    image: &GrayImage,
    center: Point2,
    radius: f64,
    cfg: &DescriptorConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "descriptor radius must be positive, got {radius}"
        )));
    }
    if !center.is_finite() {
        return Err(Error::NonFinite("descriptor center"));
    }
    let field = GradientField::new(image);
    let mut out = vec![0.0; cfg.descriptor_len()];
    field.describe_into(center, radius, cfg, &mut out);
    Ok(out)
}

/// Writes `Φ(shape, image)` into `out` (length `F·D + 1`).
pub(crate) fn stacked_features_into(
    field: &GradientField<'_>,
    shape: &FaceShape,
    radius: f64,
    cfg: &DescriptorConfig,
    out: &mut [f64],
) {
    let f = cfg.descriptor_len();
    debug_assert_eq!(out.len(), f * shape.len() + 1);
    for (p, chunk) in shape.points().iter().zip(out.chunks_exact_mut(f)) {
        field.describe_into(*p, radius, cfg, chunk);
    }
    out[f * shape.len()] = 1.0;
}

/// Concatenated landmark descriptors (in landmark order) plus a bias entry.
/// The window radius is `radius_fraction · face_size`.
pub fn stacked_features(
    image: &GrayImage,
    shape: &FaceShape,
    face_box: &FaceBox,
    cfg: &DescriptorConfig,
) -> Result<FeatureVector> {
    cfg.validate()?;
    face_box.validate()?;
    shape.expect_frame(Frame::ImagePixels)?;
    let field = GradientField::new(image);
    let radius = cfg.radius_fraction * face_box.face_size();
    let mut out = vec![0.0; cfg.feature_len(shape.len())];
    stacked_features_into(&field, shape, radius, cfg, &mut out);
    Ok(FeatureVector(out))
}
