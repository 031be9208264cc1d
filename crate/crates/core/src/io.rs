//! File formats: binary PGM images, the small text formats for shapes, labels,
//! probabilities, boxes and traces, and dataset directories.
//!
//! Text formats (all UTF-8, whitespace separated, reals written in shortest
//! round-trip decimal):
//!
//! * `.pts`: `version: 1`, `n_points: D`, then `{`, one `x y` line per
//!   landmark in image pixels, and `}`.
//! * `.au`: one line of N integers in {0, 1}.
//! * `.auprob`: one line of N reals in [0, 1].
//! * `.box`: one line `left top width height`.
//! * `.trace`: one line per cascade stage `t`, `t | x0 y0 … | p0 p1 …`, with
//!   the shape in image pixels.
//!
//! A dataset directory holds `NNNN.pgm`, `NNNN.pts`, `NNNN.au`, `NNNN.box`
//! per sample and a `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{AuLabels, AuProbs, FaceBox, FaceShape, Frame, GrayImage, Sample};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# cjcrf dataset v1";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_reals(path: &Path, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, format!("invalid number {t:?}")))
        })
        .collect()
}

fn join<T: ToString>(values: impl IntoIterator<Item = T>) -> String {
    values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Binary (P5) PGM with maxval 255; pixels are quantized to the nearest level.
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.pixels().iter().map(|&v| (v * 255.0).round() as u8));
    write_file(path, &bytes)
}

/// Reads a binary PGM (P5, maxval ≤ 255), scaling pixels to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| Error::parse(path, m))
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P5" {
        return Err(format!("expected binary PGM (P5), found {:?}", header[0]));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("invalid PGM field {s:?}"))
    };
    let (w, h, maxval) = (dim(&header[1])?, dim(&header[2])?, dim(&header[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| "PGM raster shorter than width × height".to_string())?;
    let pixels = raster
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    GrayImage::new(w, h, pixels).map_err(|e| e.to_string())
}

pub fn format_pts(shape: &FaceShape) -> String {
    let mut s = format!("version: 1\nn_points: {}\n{{\n", shape.len());
    for p in shape.points() {
        let _ = writeln!(s, "{} {}", p.x, p.y);
    }
    s.push_str("}\n");
    s
}

pub fn write_pts(path: &Path, shape: &FaceShape) -> Result<()> {
    write_file(path, format_pts(shape).as_bytes())
}

pub fn read_pts(path: &Path) -> Result<FaceShape> {
    let text = read_text(path)?;
    let mut n_points = None;
    let mut body = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("n_points:") {
            n_points = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(path, "invalid n_points"))?,
            );
        } else if line == "{" {
            body = Some(i + 1);
            break;
        }
    }
    let (n, start) = match (n_points, body) {
        (Some(n), Some(b)) => (n, b),
        _ => return Err(Error::parse(path, "missing n_points or '{'")),
    };
    let lines: Vec<&str> = text.lines().skip(start).collect();
    let close = lines
        .iter()
        .position(|l| l.trim() == "}")
        .ok_or_else(|| Error::parse(path, "missing closing '}'"))?;
    let coords = parse_reals(path, &lines[..close].join(" "))?;
    if coords.len() != 2 * n {
        return Err(Error::parse(
            path,
            format!("expected {n} points, found {} numbers", coords.len()),
        ));
    }
    FaceShape::from_flat(&coords, Frame::ImagePixels)
}

pub fn write_labels(path: &Path, labels: &AuLabels) -> Result<()> {
    write_file(path, format!("{}\n", join(labels.as_slice())).as_bytes())
}

pub fn read_labels(path: &Path) -> Result<AuLabels> {
    let text = read_text(path)?;
    let values = text
        .split_whitespace()
        .map(|t| match t {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::parse(
                path,
                format!("AU label must be 0 or 1, got {other:?}"),
            )),
        })
        .collect::<Result<Vec<u8>>>()?;
    AuLabels::new(values)
}

pub fn write_probs(path: &Path, probs: &AuProbs) -> Result<()> {
    write_file(path, format!("{}\n", join(probs.as_slice())).as_bytes())
}

pub fn read_probs(path: &Path) -> Result<AuProbs> {
    let text = read_text(path)?;
    AuProbs::new(parse_reals(path, &text)?)
}

pub fn write_box(path: &Path, b: &FaceBox) -> Result<()> {
    write_file(
        path,
        format!("{} {} {} {}\n", b.left, b.top, b.width, b.height).as_bytes(),
    )
}

pub fn read_box(path: &Path) -> Result<FaceBox> {
    let v = parse_reals(path, &read_text(path)?)?;
    if v.len() != 4 {
        return Err(Error::parse(path, "a box needs exactly 4 numbers"));
    }
    FaceBox::new(v[0], v[1], v[2], v[3])
}

/// Per-stage shapes (image pixels) and probabilities of one detection.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub shapes: Vec<FaceShape>,
    pub probs: Vec<AuProbs>,
}

pub fn write_trace(path: &Path, trace: &TraceRecord) -> Result<()> {
    let mut s = String::new();
    for (t, (shape, probs)) in trace.shapes.iter().zip(&trace.probs).enumerate() {
        let _ = writeln!(
            s,
            "{t} | {} | {}",
            join(shape.to_flat()),
            join(probs.as_slice())
        );
    }
    write_file(path, s.as_bytes())
}

pub fn read_trace(path: &Path) -> Result<TraceRecord> {
    let text = read_text(path)?;
    let mut shapes = Vec::new();
    let mut probs = Vec::new();
    for (t, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 || parts[0].trim() != t.to_string() {
            return Err(Error::parse(path, format!("malformed trace record {t}")));
        }
        shapes.push(FaceShape::from_flat(
            &parse_reals(path, parts[1])?,
            Frame::ImagePixels,
        )?);
        probs.push(AuProbs::new(parse_reals(path, parts[2])?)?);
    }
    Ok(TraceRecord { shapes, probs })
}

/// Contents of `manifest.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub n_aus: usize,
    pub d_landmarks: usize,
    pub eye_indices: (usize, usize),
    /// Generator configuration echo (JSON), when the dataset is synthetic.
    pub generator: Option<String>,
    /// Sample stems, e.g. `0007`.
    pub stems: Vec<String>,
}

pub fn stem(index: usize) -> String {
    format!("{index:04}")
}

impl Manifest {
    fn render(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        let _ = writeln!(s, "n_samples {}", self.stems.len());
        let _ = writeln!(s, "n_aus {}", self.n_aus);
        let _ = writeln!(s, "d_landmarks {}", self.d_landmarks);
        let _ = writeln!(
            s,
            "eye_indices {} {}",
            self.eye_indices.0, self.eye_indices.1
        );
        if let Some(g) = &self.generator {
            let _ = writeln!(s, "generator {g}");
        }
        s.push_str("files\n");
        for st in &self.stems {
            let _ = writeln!(s, "{st}.pgm {st}.pts {st}.au {st}.box");
        }
        s
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::parse(path, "not a cjcrf dataset manifest"));
        }
        let (mut n_samples, mut n_aus, mut d, mut eyes, mut generator) =
            (None, None, None, None, None);
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(path, format!("invalid integer {v:?}")))
        };
        for line in lines.by_ref() {
            let (key, value) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "n_samples" => n_samples = Some(num(value)?),
                "n_aus" => n_aus = Some(num(value)?),
                "d_landmarks" => d = Some(num(value)?),
                "eye_indices" => {
                    let (l, r) = value
                        .split_once(' ')
                        .ok_or_else(|| Error::parse(path, "eye_indices needs two values"))?;
                    eyes = Some((num(l)?, num(r)?));
                }
                "generator" => generator = Some(value.to_string()),
                "files" => break,
                "" => {}
                other => {
                    return Err(Error::parse(
                        path,
                        format!("unknown manifest key {other:?}"),
                    ))
                }
            }
        }
        let mut stems = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let files: Vec<&str> = line.split_whitespace().collect();
            let st = files
                .first()
                .and_then(|f| f.strip_suffix(".pgm"))
                .ok_or_else(|| Error::parse(path, format!("bad file line {line:?}")))?;
            let expected = [
                format!("{st}.pgm"),
                format!("{st}.pts"),
                format!("{st}.au"),
                format!("{st}.box"),
            ];
            if files != expected {
                return Err(Error::parse(path, format!("bad file line {line:?}")));
            }
            stems.push(st.to_string());
        }
        let missing = |k: &str| Error::parse(path, format!("manifest lacks {k}"));
        let manifest = Self {
            n_aus: n_aus.ok_or_else(|| missing("n_aus"))?,
            d_landmarks: d.ok_or_else(|| missing("d_landmarks"))?,
            eye_indices: eyes.ok_or_else(|| missing("eye_indices"))?,
            generator,
            stems,
        };
        if n_samples != Some(manifest.stems.len()) {
            return Err(Error::parse(path, "n_samples does not match the file list"));
        }
        Ok(manifest)
    }
}

pub struct SamplePaths {
    pub image: PathBuf,
    pub shape: PathBuf,
    pub labels: PathBuf,
    pub face_box: PathBuf,
}

pub fn sample_paths(dir: &Path, stem: &str) -> SamplePaths {
    SamplePaths {
        image: dir.join(format!("{stem}.pgm")),
        shape: dir.join(format!("{stem}.pts")),
        labels: dir.join(format!("{stem}.au")),
        face_box: dir.join(format!("{stem}.box")),
    }
}

/// Writes samples as `0000.*`, `0001.*`, … plus the manifest. Creates `dir`
/// if needed.
pub fn write_dataset(
    dir: &Path,
    samples: &[Sample],
    eye_indices: (usize, usize),
    generator: Option<String>,
) -> Result<Manifest> {
    let first = samples.first().ok_or(Error::Empty("dataset"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        n_aus: first.gt_labels.len(),
        d_landmarks: first.gt_shape.len(),
        eye_indices,
        generator,
        stems: (0..samples.len()).map(stem).collect(),
    };
    for (s, st) in samples.iter().zip(&manifest.stems) {
        s.validate(manifest.d_landmarks, manifest.n_aus)?;
        let p = sample_paths(dir, st);
        write_pgm(&p.image, &s.image)?;
        write_pts(&p.shape, &s.gt_shape)?;
        write_labels(&p.labels, &s.gt_labels)?;
        write_box(&p.face_box, &s.face_box)?;
    }
    write_file(&dir.join(MANIFEST_FILE), manifest.render().as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    Manifest::parse(&path, &read_text(&path)?)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .stems
        .iter()
        .map(|st| {
            let p = sample_paths(dir, st);
            let sample = Sample {
                image: read_pgm(&p.image)?,
                face_box: read_box(&p.face_box)?,
                gt_shape: read_pts(&p.shape)?,
                gt_labels: read_labels(&p.labels)?,
            };
            sample.validate(manifest.d_landmarks, manifest.n_aus)?;
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;

    fn points_from_pairs(pairs: &[(f64, f64)]) -> Vec<Point2> {
        pairs.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    fn shape() -> FaceShape {
        FaceShape::new(
            points_from_pairs(&[(1.5, 2.25), (0.1, 1.0 / 3.0), (7.0, 1e-17)]),
            Frame::ImagePixels,
        )
        .unwrap()
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = GrayImage::new(4, 3, pixels).unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_header_with_comment_and_low_maxval() {
        let mut bytes = b"P5\n# comment\n2 1\n15\n".to_vec();
        bytes.extend([0u8, 15]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn text_formats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write_pts(&d.join("s.pts"), &shape()).unwrap();
        assert_eq!(read_pts(&d.join("s.pts")).unwrap(), shape());

        let labels = AuLabels::new(vec![1, 0, 1]).unwrap();
        write_labels(&d.join("s.au"), &labels).unwrap();
        assert_eq!(read_labels(&d.join("s.au")).unwrap(), labels);

        let probs = AuProbs::new(vec![0.1, 1.0 / 7.0, 1.0]).unwrap();
        write_probs(&d.join("s.auprob"), &probs).unwrap();
        assert_eq!(read_probs(&d.join("s.auprob")).unwrap(), probs);

        let b = FaceBox::new(0.5, 1.0 / 3.0, 10.0, 12.5).unwrap();
        write_box(&d.join("s.box"), &b).unwrap();
        assert_eq!(read_box(&d.join("s.box")).unwrap(), b);

        let trace = TraceRecord {
            shapes: vec![shape(), shape()],
            probs: vec![probs.clone(), probs],
        };
        write_trace(&d.join("s.trace"), &trace).unwrap();
        assert_eq!(read_trace(&d.join("s.trace")).unwrap(), trace);
    }

    #[test]
    fn malformed_text_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let bad = [
            ("a.au", "0 2 1\n"),
            ("b.box", "1 2 3\n"),
            ("c.pts", "version: 1\nn_points: 2\n{\n1 2\n}\n"),
            ("d.auprob", "0.5 nan\n"),
        ];
        for (name, text) in bad {
            fs::write(d.join(name), text).unwrap();
        }
        assert!(read_labels(&d.join("a.au")).is_err());
        assert!(read_box(&d.join("b.box")).is_err());
        assert!(read_pts(&d.join("c.pts")).is_err());
        assert!(read_probs(&d.join("d.auprob")).is_err());
        assert!(matches!(
            read_box(&d.join("missing.box")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            n_aus: 8,
            d_landmarks: 28,
            eye_indices: (6, 12),
            generator: Some("{\"seed\":3}".into()),
            stems: vec![stem(0), stem(1)],
        };
        let text = m.render();
        assert_eq!(Manifest::parse(Path::new("m"), &text).unwrap(), m);
        assert!(
            Manifest::parse(Path::new("m"), &text.replace("n_samples 2", "n_samples 3")).is_err()
        );
    }
}
