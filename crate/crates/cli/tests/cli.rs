use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capsroute::data::idx::{write_idx, IdxArray};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_capsroute"));
    c.env_remove("CAPSROUTE_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Ten bar-pattern classes with a little deterministic texture, written as
/// IDX files.
fn synthetic_mnist(dir: &Path, train: usize, test: usize) {
    let make = |n: usize, salt: usize| {
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i * 7 + salt) % 10;
            labels.push(c as u8);
            for y in 0..28 {
                for x in 0..28 {
                    let bar = (y >= 4 + 2 * c && y < 6 + 2 * c && (6..22).contains(&x)) || (x == 4 + 2 * c && y >= 6);
                    let texture = ((i * 31 + y * 17 + x * 13) % 23) as u8;
                    pixels.push(if bar { 230 - texture } else { texture / 4 });
                }
            }
        }
        (
            IdxArray {
                dims: vec![n, 28, 28],
                data: pixels,
            },
            IdxArray { dims: vec![n], data: labels },
        )
    };
    let (ti, tl) = make(train, 0);
    let (vi, vl) = make(test, 3);
    write_idx(&dir.join("train-images-idx3-ubyte"), &ti).unwrap();
    write_idx(&dir.join("train-labels-idx1-ubyte"), &tl).unwrap();
    write_idx(&dir.join("t10k-images-idx3-ubyte"), &vi).unwrap();
    write_idx(&dir.join("t10k-labels-idx1-ubyte"), &vl).unwrap();
}

fn only_subdir(dir: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn help_exits_zero_everywhere() {
    for args in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["eval", "--help"],
        vec!["analyze", "--help"],
        vec!["analyze", "pca", "--help"],
        vec!["gradcheck", "--help"],
    ] {
        assert_eq!(run(&args).status.code(), Some(0), "{args:?}");
    }
}

#[test]
fn bad_invocations_exit_two_without_output() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    for args in [
        vec!["train", "--epochz", "1", "--out", o],
        vec!["analyze", "histogram", "--out", o],
        vec!["analyze", "pca", "--family", "shear", "--out", o],
        vec!["analyze", "perturb", "--preset", "mnist", "--out", o],
        vec!["eval", "--out", o],
    ] {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn missing_dataset_exits_two() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["train", "--epochs", "1", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CAPSROUTE_DATA_DIR"));
    let o = run(&["train", "--data", "/nonexistent/mnist", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn ops_prints_census_and_headline() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["analyze", "ops", "--preset", "mnist", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("parameters 161,824"), "{text}");
    let g: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("total "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.04..=0.08).contains(&g), "{g}");
    let run_dir = only_subdir(out.path());
    for f in ["ops.csv", "run.cfg", "manifest.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn random_pca_needs_no_checkpoint() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "analyze",
        "pca",
        "--family",
        "random",
        "--repetitions",
        "200",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("(K = 11)") && stdout(&o).contains("(K = 51)"));
    assert!(only_subdir(out.path()).join("pca_random.csv").is_file());
}

#[test]
fn gradcheck_passes_and_catches_fault() {
    let ok = run(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let text = stdout(&ok);
    for op in ["conv2d", "squash", "caps_dense", "margin_loss"] {
        assert_eq!(text.lines().filter(|l| l.split_whitespace().next() == Some(op)).count(), 1, "{op}");
    }
    let bad = run(&["gradcheck", "--inject-fault", "squash"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("squash"));
    assert_eq!(run(&["gradcheck", "--inject-fault", "nope"]).status.code(), Some(2));
}

fn log_errors(run_dir: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(run_dir.join("log.csv")).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "test_error").unwrap();
    r.records().map(|rec| rec.unwrap()[col].parse().unwrap()).collect()
}

#[test]
fn train_eval_analyze_round_trip() {
    let data = tempfile::tempdir().unwrap();
    synthetic_mnist(data.path(), 1000, 200);
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("run.txt");
    fs::write(&cfg, "# smoke run\nepochs = 3\nbatch_size = 8\n").unwrap();
    let o = bin()
        .env("CAPSROUTE_DATA_DIR", data.path())
        .args(["train", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--limit", "1000", "--seed", "7"])
        .args(["--quiet", "--out", out.path().join("runs").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = only_subdir(&out.path().join("runs"));
    assert!(run_dir.file_name().unwrap().to_str().unwrap().ends_with("-s7"));
    let resolved = fs::read_to_string(run_dir.join("run.cfg")).unwrap();
    assert!(resolved.contains("epochs = 1\n") && resolved.contains("batch_size = 8\n"), "{resolved}");
    let errors = log_errors(&run_dir);
    assert_eq!(errors.len(), 1);

    let best = run_dir.join("best.ckpt");
    let d = data.path().to_str().unwrap();
    let o = run(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", d]);
    assert_eq!(o.status.code(), Some(0));
    let expected = format!("test error {:.4}%", 100.0 * errors[0]);
    assert!(stdout(&o).contains(&expected), "{} vs {expected}", stdout(&o));

    let pair = format!("{},{}", best.display(), run_dir.join("final.ckpt").display());
    let o = run(&["eval", "--ensemble", &pair, "--threshold", "1.0", "--data", d]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["eval", "--ensemble", &pair, "--threshold", "0.0", "--data", d]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ensemble of 2 admitted"));

    let analyses = out.path().join("analysis");
    let a = analyses.to_str().unwrap();
    let b = best.to_str().unwrap();
    for (args, file) in [
        (vec!["perturb", "--dim", "3"], "perturb.pgm"),
        (vec!["pca", "--family", "translate_x", "--images", "4"], "pca_translate_x.csv"),
        (vec!["errors", "--count", "4"], "errors.csv"),
    ] {
        let o = bin()
            .args(["analyze"])
            .args(&args)
            .args(["--checkpoint", b, "--data", d, "--out", a])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        let found = fs::read_dir(&analyses)
            .unwrap()
            .any(|e| e.unwrap().path().join(file).is_file());
        assert!(found, "{file}");
    }
}

#[test]
fn strict_reruns_are_identical() {
    let data = tempfile::tempdir().unwrap();
    synthetic_mnist(data.path(), 400, 100);
    let mut finals = Vec::new();
    for name in ["a", "b"] {
        let out = tempfile::tempdir().unwrap();
        let o = bin()
            .env("CAPSROUTE_DATA_DIR", data.path())
            .args(["train", "--epochs", "1", "--seed", "3", "--strict", "--quiet"])
            .args(["--out", out.path().join(name).to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let run_dir = only_subdir(&out.path().join(name));
        finals.push((fs::read(run_dir.join("final.ckpt")).unwrap(), log_errors(&run_dir)));
    }
    assert_eq!(finals[0].1, finals[1].1);
    assert!(finals[0].0 == finals[1].0, "final checkpoints differ");
}
