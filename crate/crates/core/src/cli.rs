//! `cjcrf` command-line interface.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cascade::{self, CascadeConfig, Trace, Variant};
use crate::error::{Error, Result};
use crate::features::DescriptorConfig;
use crate::geometry::{to_canonical, AuLabels, FaceShape};
use crate::io::{self, TraceRecord};
use crate::jointmodel::{CdConfig, JointPrior};
use crate::metrics::{evaluate, EvalReport, GroundTruth, Prediction};
use crate::model_file::ModelFile;
use crate::synth::{self, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "cjcrf",
    version,
    about = "Joint facial landmark and action unit detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the joint prior and the cascade on a dataset.
    Train(TrainArgs),
    /// Detect landmarks and AUs in one image or a whole dataset.
    Detect(DetectArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..=synth::MAX_AUS as u64))]
    aus: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pairwise label couplings `i:j:s,...`, or `none`. Defaults to pairs
    /// `(2k, 2k+1)` coupled positively, with negative coupling across pairs.
    #[arg(long, value_parser = parse_couplings)]
    coupling: Option<Couplings>,
}

#[derive(Debug, Clone)]
struct Couplings(Vec<(usize, usize, f64)>);

fn parse_couplings(s: &str) -> std::result::Result<Couplings, String> {
    if s == "none" || s.is_empty() {
        return Ok(Couplings(Vec::new()));
    }
    s.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let bad = || format!("coupling {item:?} is not of the form i:j:strength");
            if parts.len() != 3 {
                return Err(bad());
            }
            let i = parts[0].trim().parse().map_err(|_| bad())?;
            let j = parts[1].trim().parse().map_err(|_| bad())?;
            let v: f64 = parts[2].trim().parse().map_err(|_| bad())?;
            if !v.is_finite() {
                return Err(bad());
            }
            Ok((i, j, v))
        })
        .collect::<std::result::Result<_, _>>()
        .map(Couplings)
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_probability(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("{s:?} is not a threshold in (0, 1)")),
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    stages: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda_shape: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_prob: f64,
    #[arg(long, default_value_t = 150)]
    hidden: usize,
    #[arg(long, default_value_t = 800)]
    epochs: usize,
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, default_value_t = 1e-2)]
    ridge: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Single image (binary PGM); requires --box.
    #[arg(long, requires = "face_box", conflicts_with = "data")]
    image: Option<PathBuf>,
    #[arg(long = "box", id = "face_box")]
    face_box: Option<PathBuf>,
    /// Dataset directory; every sample is processed.
    #[arg(long, required_unless_present = "image")]
    data: Option<PathBuf>,
    /// Output path prefix (single image) or directory (dataset).
    #[arg(long)]
    out: PathBuf,
    /// Also write per-stage shapes and probabilities.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value_t = cascade::DEFAULT_THRESHOLD, value_parser = parse_probability)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory with `NNNN.pts` and `NNNN.auprob` predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    gt: PathBuf,
    /// Model that produced the predictions; its variant is recorded.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report path; defaults to `<pred>/report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = cascade::DEFAULT_THRESHOLD, value_parser = parse_probability)]
    threshold: f64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let n_aus = a.aus as usize;
    let cfg = SynthConfig {
        n_samples: a.n as usize,
        n_aus,
        au_pair_coupling: a
            .coupling
            .map(|c| c.0)
            .unwrap_or_else(|| synth::default_coupling(n_aus)),
        seed: a.seed,
        ..SynthConfig::default()
    };
    let samples = synth::generate(&cfg)?;
    let echo = serde_json::to_string(&cfg)?;
    io::write_dataset(&a.out, &samples, synth::EYE_INDICES, Some(echo))?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (manifest, samples) = io::read_dataset(&a.data)?;
    let cd = CdConfig {
        hidden: a.hidden,
        epochs: a.epochs,
        seed: a.seed,
        ..CdConfig::default()
    };
    let cfg = CascadeConfig {
        stages: a.stages,
        lambda_shape: a.lambda_shape,
        lambda_prob: a.lambda_prob,
        ridge: a.ridge,
        variant: a.variant,
        seed: a.seed,
        ..CascadeConfig::default()
    };
    cd.validate()?;
    cfg.validate()?;
    let prior_data = samples
        .iter()
        .map(|s| Ok((s.gt_labels.clone(), to_canonical(&s.gt_shape, &s.face_box)?)))
        .collect::<Result<Vec<(AuLabels, FaceShape)>>>()?;
    let prior = JointPrior::fit(&prior_data, &cd)?;
    let model = cascade::train(
        &samples,
        &cfg,
        &DescriptorConfig::default(),
        &prior,
        manifest.eye_indices,
    )?;
    ModelFile {
        model,
        cd: Some(cd),
    }
    .save(&a.out)?;
    println!(
        "trained {} ({} stages) on {} samples; model written to {}",
        cfg.variant,
        cfg.stages,
        samples.len(),
        a.out.display()
    );
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn detect_one(
    model: &crate::cascade::CascadeModel,
    image: &crate::geometry::GrayImage,
    face_box: &crate::geometry::FaceBox,
    out_prefix: &Path,
    trace: bool,
    threshold: f64,
) -> Result<()> {
    let mut observer = Trace::default();
    let det = cascade::infer_observed(image, face_box, model, &mut observer)?;
    io::write_pts(&with_suffix(out_prefix, "pts"), &det.shape)?;
    io::write_probs(&with_suffix(out_prefix, "auprob"), &det.probs)?;
    io::write_labels(
        &with_suffix(out_prefix, "au"),
        &det.probs.threshold(threshold),
    )?;
    if trace {
        let record = TraceRecord {
            shapes: observer.pixel_shapes(face_box)?,
            probs: observer.probs,
        };
        io::write_trace(&with_suffix(out_prefix, "trace"), &record)?;
    }
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?.model;
    if let (Some(image), Some(face_box)) = (&a.image, &a.face_box) {
        let image = io::read_pgm(image)?;
        let face_box = io::read_box(face_box)?;
        detect_one(&model, &image, &face_box, &a.out, a.trace, a.threshold)?;
        println!("wrote {}.{{pts,auprob,au}}", a.out.display());
        return Ok(());
    }
    let data = a.data.as_ref().expect("clap enforces --data or --image");
    let manifest = io::read_manifest(data)?;
    if manifest.d_landmarks != model.n_landmarks() || manifest.n_aus != model.n_aus() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} landmarks / {} AUs, model expects {} / {}",
            manifest.d_landmarks,
            manifest.n_aus,
            model.n_landmarks(),
            model.n_aus()
        )));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for stem in &manifest.stems {
        let p = io::sample_paths(data, stem);
        let image = io::read_pgm(&p.image)?;
        let face_box = io::read_box(&p.face_box)?;
        detect_one(
            &model,
            &image,
            &face_box,
            &a.out.join(stem),
            a.trace,
            a.threshold,
        )?;
    }
    println!(
        "processed {} samples; predictions in {}",
        manifest.stems.len(),
        a.out.display()
    );
    Ok(())
}

/// Evaluates a prediction directory against a dataset directory.
pub fn evaluate_dirs(
    pred: &Path,
    gt: &Path,
    threshold: f64,
    variant: Option<Variant>,
) -> Result<EvalReport> {
    let (manifest, samples) = io::read_dataset(gt)?;
    let predicted: std::collections::BTreeSet<String> = std::fs::read_dir(pred)
        .map_err(|e| Error::io(pred, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".pts").map(str::to_string)
        })
        .collect();
    let expected: std::collections::BTreeSet<String> = manifest.stems.iter().cloned().collect();
    if predicted != expected {
        let missing = expected.difference(&predicted).count();
        let extra = predicted.difference(&expected).count();
        return Err(Error::DimensionMismatch(format!(
            "prediction and ground-truth file sets differ ({missing} missing, {extra} unexpected)"
        )));
    }
    let mut shapes = Vec::with_capacity(samples.len());
    let mut probs = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for stem in &manifest.stems {
        let prefix = pred.join(stem);
        shapes.push(io::read_pts(&with_suffix(&prefix, "pts"))?);
        probs.push(io::read_probs(&with_suffix(&prefix, "auprob"))?);
        let trace_path = with_suffix(&prefix, "trace");
        traces.push(if trace_path.exists() {
            Some(io::read_trace(&trace_path)?.shapes)
        } else {
            None
        });
    }
    let all_traced = traces.iter().all(Option::is_some);
    let preds: Vec<Prediction<'_>> = shapes
        .iter()
        .zip(&probs)
        .zip(&traces)
        .map(|((shape, probs), trace)| Prediction {
            shape,
            probs,
            stages: if all_traced { trace.as_deref() } else { None },
        })
        .collect();
    let truth: Vec<GroundTruth<'_>> = samples
        .iter()
        .map(|s| GroundTruth {
            shape: &s.gt_shape,
            labels: &s.gt_labels,
        })
        .collect();
    let mut report = evaluate(&preds, &truth, manifest.eye_indices, threshold)?;
    report.variant = variant.map(|v| v.as_str().to_string());
    Ok(report)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let variant = match &a.model {
        Some(path) => Some(ModelFile::load(path)?.model.config.variant),
        None => None,
    };
    let report = evaluate_dirs(&a.pred, &a.gt, a.threshold, variant)?;
    let out = a.out.unwrap_or_else(|| a.pred.join("report.json"));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    println!("{}", report.summary());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coupling_syntax() {
        let c = parse_couplings("0:1:2.5,3:4:-1").unwrap();
        assert_eq!(c.0, vec![(0, 1, 2.5), (3, 4, -1.0)]);
        assert!(parse_couplings("none").unwrap().0.is_empty());
        assert!(parse_couplings("0:1").is_err());
        assert!(parse_couplings("a:1:2").is_err());
        assert!(parse_couplings("0:1:inf").is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(
            run(["cjcrf", "synth", "--out", "x", "--n", "0"]),
            EXIT_USAGE
        );
        assert_eq!(run(["cjcrf", "bogus"]), EXIT_USAGE);
        assert_eq!(
            run([
                "cjcrf",
                "train",
                "--data",
                "d",
                "--out",
                "m",
                "--variant",
                "best"
            ]),
            EXIT_USAGE
        );
        assert_eq!(
            run(["cjcrf", "detect", "--model", "m", "--out", "o"]),
            EXIT_USAGE
        );
        assert_eq!(
            run([
                "cjcrf",
                "eval",
                "--pred",
                "p",
                "--gt",
                "g",
                "--threshold",
                "1.5"
            ]),
            EXIT_USAGE
        );
        assert_eq!(run(["cjcrf", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_inputs_are_runtime_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let m = missing.to_str().unwrap();
        assert_eq!(
            run(["cjcrf", "train", "--data", m, "--out", m]),
            EXIT_RUNTIME
        );
        assert_eq!(run(["cjcrf", "eval", "--pred", m, "--gt", m]), EXIT_RUNTIME);
    }
}
