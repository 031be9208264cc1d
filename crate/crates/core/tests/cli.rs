use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cjcrf::cascade::Variant;
use cjcrf::io;
use cjcrf::metrics::EvalReport;
use cjcrf::ModelFile;

fn cjcrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cjcrf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cjcrf(args);
    assert!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data_{n}_{seed}"));
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    out
}

#[test]
fn synth_is_reproducible_and_lists_every_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--n", "10", "--seed", "7"]);
    }
    assert_eq!(listing(&a), listing(&b));

    let manifest = fs::read_to_string(a.join(io::MANIFEST_FILE)).unwrap();
    let files: Vec<&str> = manifest
        .lines()
        .skip_while(|l| *l != "files")
        .skip(1)
        .collect();
    assert_eq!(files.len(), 10);
    for (i, line) in files.iter().enumerate() {
        let names: Vec<&str> = line.split_whitespace().collect();
        let stem = format!("{i:04}");
        assert_eq!(
            names,
            [".pgm", ".pts", ".au", ".box"].map(|e| format!("{stem}{e}"))
        );
        for name in names {
            assert!(a.join(name).is_file(), "{name} missing");
        }
    }
    // 10 quadruples plus the manifest itself.
    assert_eq!(listing(&a).len(), 41);
}

#[test]
fn different_seeds_give_different_data() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), 3, 1);
    let b = synth(tmp.path(), 3, 2);
    assert_ne!(
        fs::read(a.join("0000.pts")).unwrap(),
        fs::read(b.join("0000.pts")).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cjcrf(&["synth", "--out", s(tmp.path()), "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(
        cjcrf(&["synth", "--out", s(tmp.path())]).status.code(),
        Some(2)
    );
    assert_eq!(
        cjcrf(&["synth", "--out", "x", "--n", "3", "--coupling", "1:2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(cjcrf(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = cjcrf(&[
        "train",
        "--data",
        s(&missing),
        "--out",
        s(&tmp.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    // coupling index out of range for the AU count
    let out = cjcrf(&[
        "synth",
        "--out",
        s(&missing),
        "--n",
        "2",
        "--aus",
        "3",
        "--coupling",
        "0:5:1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_detect_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 30, 11);
    let model = tmp.path().join("model.json");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--seed",
        "5",
    ]);

    // defaults are echoed into the model file
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    let cfg = &doc["config"];
    assert_eq!(cfg["cascade"]["stages"], 4);
    assert_eq!(cfg["cascade"]["lambda_shape"], 0.5);
    assert_eq!(cfg["cascade"]["lambda_prob"], 0.5);
    assert_eq!(cfg["cascade"]["variant"], "full");
    assert_eq!(cfg["cd"]["hidden"], 150);
    assert_eq!(cfg["cd"]["epochs"], 800);
    assert_eq!(doc["stages"].as_array().unwrap().len(), 4);

    let pred = tmp.path().join("pred");
    ok(&[
        "detect",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--out",
        s(&pred),
        "--trace",
    ]);
    for i in 0..30 {
        let stem = format!("{i:04}");
        let trace = fs::read_to_string(pred.join(format!("{stem}.trace"))).unwrap();
        assert_eq!(trace.lines().count(), 5, "x⁰..x⁴ for {stem}");
        let probs = io::read_probs(&pred.join(format!("{stem}.auprob"))).unwrap();
        assert_eq!(probs.len(), 8);
        assert!(probs.as_slice().iter().all(|p| (0.0..=1.0).contains(p)));
        let labels = io::read_labels(&pred.join(format!("{stem}.au"))).unwrap();
        assert_eq!(labels, probs.threshold(0.5));
    }

    let report_path = tmp.path().join("report.json");
    let stdout = ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&data),
        "--model",
        s(&model),
        "--out",
        s(&report_path),
    ]);
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.variant.as_deref(), Some("full"));
    assert_eq!(report.n_samples, 30);
    assert_eq!(report.per_stage_error.len(), 5);
    // training images: the cascade beats its own mean-shape start
    assert!(
        report.mean_normalized_error < report.per_stage_error[0],
        "{report:?}"
    );
    assert!(stdout.contains(&format!("{:.2}", 100.0 * report.weighted_f1.unwrap())));

    // the written report agrees with an in-process evaluation
    let direct = cjcrf::cli::evaluate_dirs(&pred, &data, 0.5, Some(Variant::Full)).unwrap();
    assert_eq!(direct, report);

    // single-image mode gives the same answer as dataset mode
    let prefix = tmp.path().join("single");
    ok(&[
        "detect",
        "--model",
        s(&model),
        "--image",
        s(&data.join("0003.pgm")),
        "--box",
        s(&data.join("0003.box")),
        "--out",
        s(&prefix),
    ]);
    assert_eq!(
        fs::read(tmp.path().join("single.pts")).unwrap(),
        fs::read(pred.join("0003.pts")).unwrap()
    );
}

#[test]
fn eval_reports_the_model_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 8, 3);
    let model = tmp.path().join("nc.json");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--variant",
        "noconstraint",
        "--stages",
        "1",
        "--hidden",
        "8",
        "--epochs",
        "5",
    ]);
    assert_eq!(
        ModelFile::load(&model).unwrap().model.config.variant,
        Variant::NoConstraint
    );
    let pred = tmp.path().join("pred");
    ok(&[
        "detect",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--out",
        s(&pred),
    ]);
    let stdout = ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&data),
        "--model",
        s(&model),
    ]);
    assert!(stdout.contains("variant: noconstraint"));
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(pred.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.variant.as_deref(), Some("noconstraint"));
    assert!(report.per_stage_error.is_empty());
}

#[test]
fn perfect_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 20, 4);
    let pred = tmp.path().join("pred");
    fs::create_dir(&pred).unwrap();
    for i in 0..20 {
        let stem = format!("{i:04}");
        fs::copy(
            data.join(format!("{stem}.pts")),
            pred.join(format!("{stem}.pts")),
        )
        .unwrap();
        let labels = io::read_labels(&data.join(format!("{stem}.au"))).unwrap();
        let probs = cjcrf::geometry::AuProbs::new(labels.to_f64()).unwrap();
        io::write_probs(&pred.join(format!("{stem}.auprob")), &probs).unwrap();
    }
    let stdout = ok(&["eval", "--pred", s(&pred), "--gt", s(&data)]);
    assert!(
        stdout.contains("mean error (% interocular): 0.00"),
        "{stdout}"
    );
    assert!(stdout.contains("weighted F1 (%): 100.00"), "{stdout}");
    assert!(stdout.contains("weighted AUC (%): 100.00"), "{stdout}");

    // a missing prediction is a runtime error
    fs::remove_file(pred.join("0007.pts")).unwrap();
    assert_eq!(
        cjcrf(&["eval", "--pred", s(&pred), "--gt", s(&data)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn detect_rejects_mismatched_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 6, 2);
    let model = tmp.path().join("m.json");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--stages",
        "1",
        "--hidden",
        "4",
        "--epochs",
        "2",
    ]);
    let other = tmp.path().join("five_aus");
    ok(&["synth", "--out", s(&other), "--n", "2", "--aus", "5"]);
    let out = cjcrf(&[
        "detect",
        "--model",
        s(&model),
        "--data",
        s(&other),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("AUs"));
}
