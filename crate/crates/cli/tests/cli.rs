use std::path::Path;
use std::process::Command;

use dcnalign::alignment::image_align;
use dcnalign::io::{read_tensor, write_flo, write_tensor};
use dcnalign::rng::SplitMix64;
use dcnalign::{DType, FeatureMap, FlowField, Tensor};
use dcnalign_cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("dcnalign").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
    let len = dims.iter().product();
    let mut v = vec![0.0; len];
    SplitMix64::new(seed).fill_uniform(&mut v, -1.0, 1.0);
    Tensor::from_vec(dims, v).unwrap()
}

#[test]
fn help_everywhere() {
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("equiv-check") && out.contains("fit"));
    for sub in ["equiv-check", "grad-check", "warp", "analyze", "fit"] {
        let (code, out, _) = call(&[sub, "--help"]);
        assert_eq!(code, EXIT_OK, "{sub}");
        assert!(out.contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let (code, _, err) = call(&["frobnicate"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("Usage"));
    assert_eq!(call(&[]).0, EXIT_USAGE);
    assert_eq!(call(&["fit", "--init", "sideways"]).0, EXIT_USAGE);
    assert_eq!(call(&["fit", "--flow", "1"]).0, EXIT_USAGE);
    assert_eq!(call(&["fit", "--occlusion", "20x20"]).0, EXIT_USAGE);
    assert_eq!(
        call(&["equiv-check", "--channels", "3", "--groups", "2"]).0,
        EXIT_USAGE
    );
}

#[test]
fn equiv_check_passes_and_fails_on_zero_tolerance() {
    let (code, out, _) = call(&["equiv-check", "--cases", "100", "--seed", "7"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("max_abs_diff") && out.contains("PASS"));
    let (code, out, _) = call(&[
        "equiv-check",
        "--cases",
        "5",
        "--channels",
        "8",
        "--groups",
        "1",
        "--kernel",
        "3",
        "--sizes",
        "12",
        "--tol",
        "0",
    ]);
    assert_eq!(code, EXIT_FAILURE, "{out}");
}

#[test]
fn grad_check_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.csv");
    let (code, out, _) = call(&["grad-check", "--cases", "5", "--report", path_str(&report)]);
    assert_eq!(code, EXIT_OK, "{out}");
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("case,operator,argument,parameters,max_rel_err,pass\n"));
    assert!(!csv.contains(",false"));
    assert_eq!(
        call(&["grad-check", "--cases", "1", "--h", "0"]).0,
        EXIT_USAGE
    );
}

#[test]
fn warp_matches_library_and_keeps_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let feature = dir.path().join("f.tnsr");
    let flow_path = dir.path().join("u.flo");
    let out_path = dir.path().join("o.tnsr");
    let f = random_tensor(&[3, 5, 6], 1).with_dtype(DType::F32);
    write_tensor(&f, &feature).unwrap();
    let flow = FlowField::constant(5, 6, 1.25, -0.5).unwrap();
    write_flo(&flow, &flow_path).unwrap();
    let (code, _, err) = call(&[
        "warp",
        "--feature",
        path_str(&feature),
        "--flow",
        path_str(&flow_path),
        "--out",
        path_str(&out_path),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let got = read_tensor(&out_path).unwrap();
    assert_eq!(got.dtype(), DType::F32);
    let expected = image_align(&FeatureMap::new(f).unwrap(), &flow)
        .unwrap()
        .into_tensor()
        .with_dtype(DType::F32);
    assert_eq!(got, expected);
}

#[test]
fn analyze_writes_csv_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let offsets = dir.path().join("o.tnsr");
    let masks = dir.path().join("m.tnsr");
    let flow = dir.path().join("flow.tnsr");
    let out_dir = dir.path().join("out");
    write_tensor(&random_tensor(&[2, 3, 2, 4, 5], 2), &offsets).unwrap();
    let m = random_tensor(&[2, 3, 4, 5], 3);
    let m = Tensor::from_vec(m.dims(), m.data().iter().map(|v| v.abs()).collect()).unwrap();
    write_tensor(&m, &masks).unwrap();
    write_tensor(&random_tensor(&[2, 4, 5], 4), &flow).unwrap();
    let args = [
        "analyze",
        "--offsets",
        path_str(&offsets),
        "--flow",
        path_str(&flow),
        "--masks",
        path_str(&masks),
        "--out-dir",
        path_str(&out_dir),
    ];
    let (code, _, err) = call(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    let csv = std::fs::read_to_string(out_dir.join("stats.csv")).unwrap();
    assert!(csv.starts_with("kind,name,producer,index,value\n"));
    for name in [
        "diversity_mean",
        "flow_distance_cdf",
        "flow_distance_rank",
        "mask_flow_pearson",
    ] {
        assert!(csv.contains(name), "{name}");
    }
    let pgm = std::fs::read(out_dir.join("diversity.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n5 4\n255\n"));
    assert_eq!(pgm.len(), b"P5\n5 4\n255\n".len() + 20);

    let first = std::fs::read(out_dir.join("stats.csv")).unwrap();
    assert_eq!(call(&args).0, EXIT_OK);
    assert_eq!(std::fs::read(out_dir.join("stats.csv")).unwrap(), first);
}

#[test]
fn analyze_missing_or_malformed_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tnsr");
    let out = dir.path().join("out");
    let (code, _, err) = call(&[
        "analyze",
        "--offsets",
        path_str(&missing),
        "--flow",
        path_str(&missing),
        "--out-dir",
        path_str(&out),
    ]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("missing.tnsr"));
    let junk = dir.path().join("junk.tnsr");
    std::fs::write(&junk, b"not a tensor").unwrap();
    let (code, _, _) = call(&[
        "analyze",
        "--offsets",
        path_str(&junk),
        "--flow",
        path_str(&junk),
        "--out-dir",
        path_str(&out),
    ]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn fit_reports_traces_and_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("fit.csv");
    let (code, out, err) = call(&[
        "fit",
        "--steps",
        "30",
        "--n",
        "2",
        "--g",
        "2",
        "--report",
        path_str(&report),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.starts_with("fit: 30 steps"));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "step,data_loss,fidelity_loss,max_deviation,mean_diversity"
    );
    assert_eq!(lines.len(), 1 + 30 + 1);
    assert!(lines[31].starts_with("final,"));

    let (code, _, err) = call(&["fit", "--steps", "5", "--lr", "1e308"]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("diverged"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dcnalign");
    let ok = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("Usage"));
    let bad = Command::new(bin).arg("nope").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let missing = Command::new(bin)
        .args([
            "analyze",
            "--offsets",
            "missing.tnsr",
            "--flow",
            "missing.flo",
            "--out-dir",
            "x",
        ])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
