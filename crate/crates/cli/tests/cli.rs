use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn evidex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evidex")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 32×32 corpus and a briefly trained model, shared by the tests below.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn model(&self) -> PathBuf {
        self.root.join("model.evdx")
    }
    fn image(&self, i: usize) -> PathBuf {
        self.corpus().join(format!("images/img_{i:05}.ppm"))
    }
}

fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let ws = Workspace { _dir: dir, root };
        let out = evidex(&["gen-data", "--out", s(&ws.corpus()), "--n-per-class", "10", "--size", "32", "--seed", "3"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = evidex(&["train", "--corpus", s(&ws.corpus()), "--out", s(&ws.model()), "--epochs", "2"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("test_accuracy="));
        ws
    })
}

#[test]
fn gen_data_counts_and_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = evidex(&["gen-data", "--out", s(dir.path()), "--n-per-class", "200", "--size", "32"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let count = |sub: &str| fs::read_dir(a.path().join(sub)).unwrap().count();
    assert_eq!((count("images"), count("masks")), (800, 800));
    let manifest = fs::read_to_string(a.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 801);
    for f in ["manifest.csv", "images/img_00123.ppm", "masks/mask_00456.pgm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn gen_data_rejects_small_images_and_bad_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = evidex(&["gen-data", "--out", s(dir.path()), "--size", "16"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("minimum 32"));

    let file = dir.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    let out = evidex(&["gen-data", "--out", s(&file.join("sub")), "--n-per-class", "1"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&evidex(&["frobnicate"])), 1);
    assert_eq!(code(&evidex(&["explain", "--steps", "many"])), 1);
    assert_eq!(code(&evidex(&["train"])), 1);
    assert_eq!(code(&evidex(&["--help"])), 0);
}

#[test]
fn explain_is_byte_reproducible() {
    let ws = workspace();
    let run = |out: &Path| {
        evidex(&[
            "explain", "--model", s(&ws.model()), "--image", s(&ws.image(5)), "--out", s(out), "--steps", "15",
            "--seed", "4",
        ])
    };
    let (a, b) = (ws.root.join("ex_a"), ws.root.join("ex_b"));
    let (ra, rb) = (run(&a), run(&b));
    assert!(matches!(code(&ra), 0 | 5), "{}", stderr(&ra));
    assert_eq!(code(&ra), code(&rb));
    for f in ["mask.pgm", "mask_binary.pgm", "masked.ppm"] {
        let bytes = fs::read(a.join(f)).unwrap();
        assert_eq!(bytes, fs::read(b.join(f)).unwrap(), "{f}");
        assert!(String::from_utf8_lossy(&bytes[..40]).contains("seed 4"));
    }
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(report.starts_with("image_id,method,y,conf_x"));
    let preserved = report.lines().nth(1).unwrap().split(',').nth(5).unwrap() == "1";
    assert_eq!(code(&ra) == 0, preserved);
}

#[test]
fn explain_validation() {
    let ws = workspace();
    let out_dir = ws.root.join("ex_bad");
    let model = ws.model();
    let base = ["explain", "--model", s(&model), "--out", s(&out_dir)];
    let with = |extra: &[&str]| evidex(&[&base[..], extra].concat());

    let out = with(&["--image", s(&ws.image(1)), "--steps", "0"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("steps"));

    let big = ws.root.join("big");
    assert_eq!(code(&evidex(&["gen-data", "--out", s(&big), "--n-per-class", "1", "--size", "40"])), 0);
    let out = with(&["--image", s(&big.join("images/img_00000.ppm"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("40") && stderr(&out).contains("32"), "{}", stderr(&out));

    let out = with(&["--image", s(&ws.image(1)), "--preset", "huge"]);
    assert_eq!(code(&out), 1);

    let junk = ws.root.join("junk.evdx");
    fs::write(&junk, b"NOPE").unwrap();
    let out = evidex(&["explain", "--model", s(&junk), "--image", s(&ws.image(1)), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("magic"));
}

#[test]
fn config_file_keys_and_precedence() {
    let ws = workspace();
    let cfg = ws.root.join("run.conf");
    fs::write(
        &cfg,
        format!(
            "# explain settings\nmodel = {}\nimage = {}\nout = {}\nsteps = 0\nlambda-area = 5\n",
            s(&ws.model()),
            s(&ws.image(2)),
            s(&ws.root.join("ex_cfg"))
        ),
    )
    .unwrap();
    // file says steps = 0, which is invalid on its own
    assert_eq!(code(&evidex(&["explain", "--config", s(&cfg)])), 1);
    let out = evidex(&["explain", "--config", s(&cfg), "--steps", "3"]);
    assert!(matches!(code(&out), 0 | 5), "{}", stderr(&out));

    let typo = ws.root.join("typo.conf");
    fs::write(&typo, "lamda_area = 5\n").unwrap();
    let out = evidex(&["explain", "--config", s(&typo)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lamda_area"));
}

#[test]
fn gradcam_outputs() {
    let ws = workspace();
    let out_dir = ws.root.join("gc");
    let out = evidex(&[
        "gradcam", "--model", s(&ws.model()), "--image", s(&ws.image(3)), "--keep-fraction", "0.25", "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mask = evidex::synth::netpbm::read_pgm(out_dir.join("mask_binary.pgm")).unwrap();
    assert_eq!(mask.values.iter().filter(|&&v| v > 0.5).count(), 256);
    assert!(out_dir.join("heatmap.pgm").exists());
    let out = evidex(&["gradcam", "--model", s(&ws.model()), "--image", s(&ws.image(3)), "--layer", "nope", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn evaluate_writes_three_method_groups() {
    let ws = workspace();
    let csv = ws.root.join("eval/rows.csv");
    let run = || {
        evidex(&[
            "evaluate", "--model", s(&ws.model()), "--corpus", s(&ws.corpus()), "--n", "4", "--steps", "5",
            "--workers", "2", "--out", s(&csv),
        ])
    };
    let out = run();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = evidex::metrics::load_reports(&csv).unwrap();
    assert_eq!(rows.len(), 12);
    let summary = fs::read_to_string(ws.root.join("eval/rows_summary.csv")).unwrap();
    for m in ["medcam", "gradcam", "random"] {
        assert!(summary.lines().any(|l| l.starts_with(&format!("{m},preservation_rate"))), "{m}");
    }
    let strip = |rows: Vec<evidex::metrics::EvidenceReport>| {
        rows.into_iter().map(|r| evidex::metrics::EvidenceReport { wall_seconds: 0.0, ..r }).collect::<Vec<_>>()
    };
    assert_eq!(code(&run()), 0);
    assert_eq!(strip(rows), strip(evidex::metrics::load_reports(&csv).unwrap()));
}

#[test]
fn selftest_passes() {
    let out = evidex(&["selftest"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}
