use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffusion-density"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: [&str; 8] = [
    "--set",
    "case=1",
    "--set",
    "K=2",
    "--set",
    "steps=200",
    "--set",
    "arch.widths=32",
];

#[test]
fn gen_train_sample_evaluate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(
        d,
        &[
            &["gen-data", "--n", "400", "--seed", "4", "--out", "data.csv"][..],
            &SMALL,
        ]
        .concat(),
    );
    assert!(d.join("data.csv.meta.json").exists());
    let header = fs::read_to_string(d.join("data.csv")).unwrap();
    assert_eq!(header.lines().next(), Some("x1,x2,x3,x4"));
    assert_eq!(header.lines().count(), 401);

    run(
        d,
        &[
            &[
                "train",
                "--data",
                "data.csv",
                "--out",
                "model.json",
                "--trace",
                "trace.csv",
            ][..],
            &SMALL,
        ]
        .concat(),
    );
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,mean_loss"));

    run(
        d,
        &[
            "sample",
            "--model",
            "model.json",
            "--n",
            "200",
            "--steps",
            "100",
            "--out",
            "s.csv",
        ],
    );
    let eval = run(d, &["evaluate", "--samples", "s.csv", "--meta", "data.csv.meta.json"]);
    let text = String::from_utf8(eval.stdout).unwrap();
    let bpd: f64 = text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    // standard normal in 4-D sits at about 2.05 bits per dimension
    assert!(bpd.is_finite() && (1.8..3.0).contains(&bpd), "bpd {bpd}");
}

#[test]
fn sampling_is_reproducible_for_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(
        d,
        &[&["gen-data", "--n", "50", "--out", "data.csv"][..], &SMALL].concat(),
    );
    for name in ["a.csv", "b.csv"] {
        run(
            d,
            &[
                "sample",
                "--analytic",
                "data.csv.meta.json",
                "--n",
                "40",
                "--steps",
                "50",
                "--seed",
                "9",
                "--out",
                name,
            ],
        );
    }
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
}

#[test]
fn run_case_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        &["run-case", "--out-dir", "out"][..],
        &SMALL,
        &[
            "--set",
            "n_list=50,100",
            "--set",
            "repetitions=1",
            "--set",
            "em_steps=30",
            "--set",
            "n_eval=50",
        ],
    ]
    .concat();
    run(d, &args);
    let report = fs::read_to_string(d.join("out/bpd_report.csv")).unwrap();
    assert_eq!(
        report.lines().next(),
        Some("case,size,method,n,repetition,bpd,runtime_s,status")
    );
    assert_eq!(report.lines().count(), 1 + 2 * 3);
    assert!(d.join("out/bpd_case1_size2.svg").exists());

    run(d, &["plot", "--report", "out/bpd_report.csv", "--out-dir", "replot"]);
    let svg = fs::read_to_string(d.join("replot/bpd_case1_size2.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches("class=\"series\"").count(), 3);
}

#[test]
fn score_mse_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        &["score-mse", "--n-mc", "100", "--out", "mse.csv"][..],
        &SMALL,
        &["--set", "n_list=60", "--set", "repetitions=2"],
    ]
    .concat();
    run(d, &args);
    let csv = fs::read_to_string(d.join("mse.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("n,repetition,score_mse_init,score_mse,std_error")
    );
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn errors_report_name_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .args(["gen-data", "--set", "K=1", "--n", "10", "--out", "x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("InvalidConfig"));

    let out = bin()
        .current_dir(dir.path())
        .args(["plot", "--report", "missing.csv", "--out-dir", "p"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("IoError"));
}
