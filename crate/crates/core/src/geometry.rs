//! Shared data model: landmark shapes, face boxes, grayscale images, AU
//! label and probability vectors, and the mapping between image pixels and
//! the box-normalized canonical frame.
//!
//! All regression and joint-model arithmetic happens in the canonical frame,
//! where the face box center is the origin and one unit equals the face size
//! (the larger of the box width and height).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of landmarks per face.
pub const DEFAULT_LANDMARKS: usize = 28;

/// Largest absolute coordinate accepted for a freshly normalized shape.
pub const CANONICAL_BOUND: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    ImagePixels,
    Canonical,
}

/// An ordered set of 2-D landmarks tagged with the frame its coordinates live in.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceShape {
    points: Vec<Point2>,
    frame: Frame,
}

impl FaceShape {
    pub fn new(points: Vec<Point2>, frame: Frame) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("face shape has no landmarks"));
        }
        if !points.iter().all(Point2::is_finite) {
            return Err(Error::NonFinite("face shape"));
        }
        Ok(Self { points, frame })
    }

    /// Builds a shape from interleaved `x0 y0 x1 y1 ...` coordinates.
    pub fn from_flat(coords: &[f64], frame: Frame) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::DimensionMismatch(format!(
                "flat shape vector has odd length {}",
                coords.len()
            )));
        }
        let points = coords
            .chunks_exact(2)
            .map(|c| Point2::new(c[0], c[1]))
            .collect();
        Self::new(points, frame)
    }

    /// Interleaved `x0 y0 x1 y1 ...` coordinates, length `2·D`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub(crate) fn expect_frame(&self, expected: Frame) -> Result<()> {
        if self.frame != expected {
            return Err(Error::WrongFrame {
                expected,
                found: self.frame,
            });
        }
        Ok(())
    }
}

/// Axis-aligned face box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl FaceBox {
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Result<Self> {
        let b = Self {
            left,
            top,
            width,
            height,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.left.is_finite()
            && self.top.is_finite()
            && self.width.is_finite()
            && self.height.is_finite()
            && self.width > 0.0
            && self.height > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBox {
                width: self.width,
                height: self.height,
            })
        }
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    /// The scalar face size: `max(width, height)`.
    pub fn face_size(&self) -> f64 {
        self.width.max(self.height)
    }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!(
                "pixel intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel lookup with replicate padding outside the image.
    pub fn get_clamped(&self, x: i64, y: i64) -> f64 {
        let xi = x.clamp(0, self.width as i64 - 1) as usize;
        let yi = y.clamp(0, self.height as i64 - 1) as usize;
        self.pixels[yi * self.width + xi]
    }
}

/// Binary AU activation labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AuLabels(Vec<u8>);

impl AuLabels {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::OutOfRange(format!("AU label {v} is not 0 or 1")));
        }
        Ok(Self(labels))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    /// Labels from the low `n` bits of `bits` (bit `i` is AU `i`).
    pub fn from_bits(bits: u64, n: usize) -> Self {
        Self((0..n).map(|i| ((bits >> i) & 1) as u8).collect())
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }
}

/// AU activation probabilities, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuProbs(Vec<f64>);

impl AuProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(v) = probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!(
                "AU probability {v} outside [0, 1]"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&value));
        Self(vec![value; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn threshold(&self, threshold: f64) -> AuLabels {
        AuLabels(self.0.iter().map(|&p| u8::from(p >= threshold)).collect())
    }

    pub(crate) fn from_clamped(values: Vec<f64>) -> Self {
        Self(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

/// One annotated face: image, detector box, pixel-frame landmarks and AU labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub face_box: FaceBox,
    pub gt_shape: FaceShape,
    pub gt_labels: AuLabels,
}

impl Sample {
    pub fn validate(&self, n_landmarks: usize, n_aus: usize) -> Result<()> {
        self.face_box.validate()?;
        self.gt_shape.expect_frame(Frame::ImagePixels)?;
        if self.gt_shape.len() != n_landmarks {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} landmarks, expected {n_landmarks}",
                self.gt_shape.len()
            )));
        }
        if self.gt_labels.len() != n_aus {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} AU labels, expected {n_aus}",
                self.gt_labels.len()
            )));
        }
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        let inside = self
            .gt_shape
            .points()
            .iter()
            .all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0);
        if !inside {
            return Err(Error::OutOfRange(
                "ground-truth landmark outside the image".into(),
            ));
        }
        Ok(())
    }
}

/// Maps a pixel-frame shape into the box-normalized canonical frame.
pub fn to_canonical(shape: &FaceShape, face_box: &FaceBox) -> Result<FaceShape> {
    face_box.validate()?;
    shape.expect_frame(Frame::ImagePixels)?;
    let c = face_box.center();
    let s = face_box.face_size();
    let points: Vec<Point2> = shape
        .points()
        .iter()
        .map(|p| Point2::new((p.x - c.x) / s, (p.y - c.y) / s))
        .collect();
    if let Some(p) = points
        .iter()
        .find(|p| p.x.abs() > CANONICAL_BOUND || p.y.abs() > CANONICAL_BOUND)
    {
        return Err(Error::OutOfRange(format!(
            "normalized landmark ({}, {}) is more than {CANONICAL_BOUND} face sizes from the box center",
            p.x, p.y
        )));
    }
    FaceShape::new(points, Frame::Canonical)
}

/// Inverse of [`to_canonical`].
pub fn from_canonical(shape: &FaceShape, face_box: &FaceBox) -> Result<FaceShape> {
    face_box.validate()?;
    shape.expect_frame(Frame::Canonical)?;
    let c = face_box.center();
    let s = face_box.face_size();
    let points = shape
        .points()
        .iter()
        .map(|p| Point2::new(p.x * s + c.x, p.y * s + c.y))
        .collect();
    FaceShape::new(points, Frame::ImagePixels)
}

/// Coordinate-wise mean of canonical shapes.
pub fn mean_shape(shapes: &[FaceShape]) -> Result<FaceShape> {
    let first = shapes.first().ok_or(Error::Empty("mean of zero shapes"))?;
    let d = first.len();
    let mut acc = vec![Point2::default(); d];
    for s in shapes {
        s.expect_frame(Frame::Canonical)?;
        if s.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "shape with {} landmarks among shapes with {d}",
                s.len()
            )));
        }
        for (a, p) in acc.iter_mut().zip(s.points()) {
            a.x += p.x;
            a.y += p.y;
        }
    }
    let n = shapes.len() as f64;
    for a in &mut acc {
        a.x /= n;
        a.y /= n;
    }
    FaceShape::new(acc, Frame::Canonical)
}

/// Euclidean distance between the two eye landmarks.
pub fn interocular_distance(shape: &FaceShape, left_eye: usize, right_eye: usize) -> Result<f64> {
    if left_eye == right_eye {
        return Err(Error::InvalidIndex(format!(
            "eye indices must differ, both are {left_eye}"
        )));
    }
    let d = shape.len();
    if left_eye >= d || right_eye >= d {
        return Err(Error::InvalidIndex(format!(
            "eye indices ({left_eye}, {right_eye}) out of range for {d} landmarks"
        )));
    }
    Ok(shape.points()[left_eye].distance(&shape.points()[right_eye]))
}
