use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_missformer"));
    c.env_remove("MISSFORMER_OUT_DIR");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    run(&["generate", "--regime", "object", "--n", "12", "--seed", "4", "--out", "corpus.txt"], d);
    let corpus = lines(&d.join("corpus.txt"));
    assert_eq!(corpus.len(), 12);
    for l in &corpus {
        let f: Vec<&str> = l.split_whitespace().collect();
        let k: usize = f[0].parse().unwrap();
        assert_eq!(f.len(), 2 + 2 * k);
    }

    run(
        &["corrupt", "--input", "corpus.txt", "--noise-std", "0.5", "--missing-prob", "0.2", "--out", "obs.txt"],
        d,
    );
    let obs = lines(&d.join("obs.txt"));
    assert_eq!(obs.len(), 12);
    for l in &obs {
        let f: Vec<&str> = l.split_whitespace().collect();
        let k: usize = f[0].parse().unwrap();
        assert_eq!(f[1], "positions");
        assert_eq!(f.len(), 2 + 3 * k);
    }

    run(
        &[
            "train", "--corpus", "corpus.txt", "--epochs", "3", "--d-model", "8", "--batch-size", "4",
            "--missing-prob", "0.1", "--out", "model.ckpt",
        ],
        d,
    );
    assert!(fs::read(d.join("model.ckpt")).unwrap().starts_with(b"missformer-checkpoint"));
    let log = lines(&d.join("model.ckpt.log"));
    assert_eq!(log.len(), 3);
    for (i, l) in log.iter().enumerate() {
        let f: Vec<&str> = l.split_whitespace().collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].parse::<usize>().unwrap(), i);
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        f[2].parse::<u128>().unwrap();
    }
    assert!(d.join("model.ckpt.config").exists());

    let out = run(
        &["eval", "--ckpt", "model.ckpt", "--corpus", "corpus.txt", "--label", "tiny", "--out", "records.txt"],
        d,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("tiny"));
    run(&["eval", "--baseline", "linear", "--corpus", "corpus.txt", "--out", "records.txt"], d);
    let rec = lines(&d.join("records.txt"));
    assert_eq!(rec.len(), 2);
    for l in &rec {
        let f: Vec<&str> = l.split_whitespace().collect();
        assert_eq!(f.len(), 5);
        assert_eq!(f[0], "reconstruction");
        assert_eq!(f[1], "12");
    }

    run(&["predict", "--ckpt", "model.ckpt", "--input", "obs.txt", "--out", "est.txt"], d);
    let est = lines(&d.join("est.txt"));
    let first_k: usize = obs[0].split_whitespace().next().unwrap().parse().unwrap();
    let est_k: usize = est[0].split_whitespace().next().unwrap().parse().unwrap();
    assert_eq!(est_k, first_k);
    assert_eq!(est.len(), 12);

    for cmd in ["plot-attn", "plot-traj"] {
        let svg = format!("{cmd}.svg");
        run(&[cmd, "--ckpt", "model.ckpt", "--corpus", "corpus.txt", "--sample", "1", "--out", &svg], d);
        let text = fs::read_to_string(d.join(&svg)).unwrap();
        assert!(text.contains("<svg") && text.trim_end().ends_with("</svg>"));
        assert!(d.join(format!("{svg}.txt")).exists());
    }

    let out = run(&["report", "records.txt", "--cited", "--out", "report.txt"], d);
    let table = fs::read_to_string(d.join("report.txt")).unwrap();
    assert!(table.contains("reconstruction"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("reconstruction"));
}

#[test]
fn output_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("outputs");
    fs::create_dir(&out_dir).unwrap();
    let status = bin()
        .args(["generate", "--n", "3", "--out", "c.txt"])
        .env("MISSFORMER_OUT_DIR", &out_dir)
        .current_dir(tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(lines(&out_dir.join("c.txt")).len(), 3);
    assert!(!tmp.path().join("c.txt").exists());
}

#[test]
fn flag_beats_config_file_beats_default() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.cfg"), "# tiny\nepochs = 2\nd_model=8\nsamples = 6\nbatch-size = 3\n").unwrap();

    run(&["train", "--config", "run.cfg", "--out", "a.ckpt"], d);
    assert_eq!(lines(&d.join("a.ckpt.log")).len(), 2);
    run(&["train", "--config", "run.cfg", "--epochs", "4", "--out", "b.ckpt"], d);
    assert_eq!(lines(&d.join("b.ckpt.log")).len(), 4);
    let echo = fs::read_to_string(d.join("b.ckpt.config")).unwrap();
    assert!(echo.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["epochs", "=", "4"]));
}

#[test]
fn exit_codes_separate_usage_from_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| bin().args(args).current_dir(d).output().unwrap().status.code();

    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["train", "--epochs", "many"]), Some(1));
    assert_eq!(code(&["generate", "--n", "2", "--regime", "boat"]), Some(1));
    assert_eq!(code(&["eval", "--ckpt", "absent.ckpt", "--samples", "2"]), Some(2));
    fs::write(d.join("bad.txt"), "3 1.0 0 0 1\n").unwrap();
    assert_eq!(code(&["corrupt", "--input", "bad.txt"]), Some(2));
}
