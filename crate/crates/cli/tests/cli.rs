use std::path::Path;
use std::process::{Command, Output};

use noisylab_core::synth::REFERENCE_NOISE;

fn noisylab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisylab"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generated_labels_carry_the_requested_noise() {
    let dir = tempfile::tempdir().unwrap();
    let o = noisylab(dir.path(), &["--seed", "3", "generate", "--out", "d", "--n-samples", "20000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = noisylab(
        dir.path(),
        &["measure-noise", "--noisy", "d/labels_noisy.csv", "--reference", "d/labels_true.csv", "--out", "noise.txt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for (name, sens, spec) in REFERENCE_NOISE {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        let nums: Vec<f64> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((nums[0] - sens).abs() <= 0.02, "{line}");
        assert!((nums[1] - spec).abs() <= 0.02, "{line}");
    }
    assert!(text.lines().any(|l| l.starts_with("Average")));
    assert!(dir.path().join("noise.txt").is_file());
}

#[test]
fn identical_columns_correlate_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("l.csv"),
        "sample_id,dataset_tag,a,b\ns1,x,1,1\ns2,x,0,0\ns3,x,1,1\ns4,x,0,0\n",
    )
    .unwrap();
    let o = noisylab(dir.path(), &["correlate", "--labels", "l.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row, ["a", "1", "1"]);
    let o = noisylab(dir.path(), &["correlate", "--labels", "l.csv", "--kind", "covariance"]);
    let text = stdout(&o);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row, ["a", "0.25", "0.25"]);
}

#[test]
fn report_on_an_empty_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = noisylab(dir.path(), &["report", "--results", "."]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error"));
}

#[test]
fn malformed_label_csv_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "sample_id,dataset_tag,a\ns1,x,1\ns2,x,7\n").unwrap();
    let o = noisylab(dir.path(), &["correlate", "--labels", "bad.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(noisylab(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(noisylab(dir.path(), &["correlate", "--kind", "spearman", "--labels", "x"]).status.code(), Some(1));
    assert_eq!(noisylab(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn normalize_writes_a_full_range_image() {
    let dir = tempfile::tempdir().unwrap();
    let o = noisylab(dir.path(), &["--seed", "1", "generate", "--out", "d", "--n-samples", "3", "--shift"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let input = std::fs::read_dir(dir.path().join("d/images")).unwrap().next().unwrap().unwrap().path();
    let o = noisylab(dir.path(), &["normalize", input.to_str().unwrap(), "n.pgm"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = noisylab_core::normalization::read_pgm(&dir.path().join("n.pgm")).unwrap();
    let (lo, hi) = img.min_max();
    assert!(lo >= 0.0 && hi > lo);
    let o = noisylab(dir.path(), &["normalize", "missing.pgm", "n.pgm"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("spec.toml"),
        "output_dir = \"unused\"\nconfigurations = [\"baseline\"]\n[training]\nmax_epochs = 2\n",
    )
    .unwrap();
    assert!(noisylab(dir.path(), &["generate", "--out", "d", "--n-samples", "400"]).status.success());
    let o = noisylab(dir.path(), &["train", "--data", "d", "--out", "run", "--spec", "spec.toml", "--configuration", "+noise"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["log.csv", "checkpoint.bin", "run.toml"] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }
    let o = noisylab(dir.path(), &["evaluate", "--run", "run", "--data", "d", "--out", "p.csv", "--bootstrap", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1 + REFERENCE_NOISE.len());
    for line in text.lines().skip(1) {
        let auc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    assert!(dir.path().join("p.csv").is_file());
}
