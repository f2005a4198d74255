//! Black-box tests of the installed binary: argument parsing, exit codes,
//! and end-to-end wiring of every subcommand against a tiny dataset.
//! Model quality is asserted elsewhere; this file guards the contract
//! between the shell and the pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rnvkit"));
    c.env_remove("RNVKIT_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process should not be signalled")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Tiny dataset spec: 2 train + 2 test cases at 32^3 (both train cases and
/// both test cases are lesion-positive under the generation schedule).
fn write_spec(path: &Path) {
    let spec = r#"{
        "n_train": 2,
        "n_test": 2,
        "seed": 7,
        "template": { "nz": 32, "nx": 32, "ny": 32, "surface_smoothness_px": 10.0 }
    }"#;
    fs::write(path, spec).unwrap();
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

// ============================================================
// Argument surface
// ============================================================

#[test]
fn no_arguments_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("Usage"));

    let version = run(&["--version"]);
    assert_eq!(code(&version), 0);
    assert!(stdout(&version).contains("rnvkit"));
}

#[test]
fn invalid_thread_cap_is_a_usage_error() {
    for bad in ["0", "minus-one", ""] {
        let out = bin()
            .env("RNVKIT_THREADS", bad)
            .args(["eval", "--pred", "x", "--truth", "y", "--out", "z"])
            .output()
            .unwrap();
        assert_eq!(code(&out), 1, "RNVKIT_THREADS={bad:?}");
        assert!(stderr(&out).contains("RNVKIT_THREADS"));
    }
    // A positive cap is accepted; the command then fails on the bogus
    // paths with a data error, not a usage error.
    let out = bin()
        .env("RNVKIT_THREADS", "4")
        .args(["eval", "--pred", "x", "--truth", "y", "--out", "z"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_config_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("spec.json");
    fs::write(&cfg, "{ not json").unwrap();
    let out = run(&[
        "phantom",
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_input_file_is_a_data_error() {
    let out = run(&[
        "phantom",
        "gen",
        "--config",
        "/nonexistent/spec.json",
        "--out",
        "/tmp/unused-rnvkit-test-out",
    ]);
    assert_eq!(code(&out), 2);
}

// ============================================================
// Dataset generation
// ============================================================

#[test]
fn phantom_gen_writes_a_dataset_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("spec.json");
    write_spec(&cfg);

    let d1 = tmp.path().join("d1");
    let out = run(&[
        "phantom",
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d1.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("4 cases"));
    assert!(d1.join("manifest.json").is_file());
    assert!(d1.join("provenance.json").is_file());
    assert!(d1.join("case000_oct.ovol").is_file());
    assert!(d1.join("case003_octa.ovol").is_file());

    let d2 = tmp.path().join("d2");
    let out2 = run(&[
        "phantom",
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d2.to_str().unwrap(),
    ]);
    assert_eq!(code(&out2), 0);
    assert_eq!(dir_snapshot(&d1), dir_snapshot(&d2));
}

// ============================================================
// Full command chain on one tiny dataset
// ============================================================

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    data: PathBuf,
    manifest: String,
}

impl Fixture {
    fn new() -> Fixture {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let cfg = root.join("spec.json");
        write_spec(&cfg);
        let data = root.join("data");
        let out = run(&[
            "phantom",
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        let manifest = data.join("manifest.json").to_str().unwrap().to_owned();
        Fixture {
            _tmp: tmp,
            root,
            data,
            manifest,
        }
    }

    fn case(&self, name: &str) -> String {
        self.data.join(name).to_str().unwrap().to_owned()
    }
}

fn write_rnv_cfg(path: &Path) {
    fs::write(
        path,
        r#"{ "stages": 2, "base_channels": 4, "max_epochs": 2, "patience": 2 }"#,
    )
    .unwrap();
}

fn write_vri_cfg(path: &Path) {
    fs::write(
        path,
        r#"{ "stages": 2, "base_channels": 2, "max_epochs": 2, "patience": 2, "bscans_per_case": 2 }"#,
    )
    .unwrap();
}

#[test]
fn train_infer_eval_track_chain_works() {
    let fx = Fixture::new();

    // ---- stage-1 training
    let vri_cfg = fx.root.join("vri_cfg.json");
    write_vri_cfg(&vri_cfg);
    let vri_out = fx.root.join("vri");
    let out = run(&[
        "train",
        "vri",
        "--manifest",
        &fx.manifest,
        "--config",
        vri_cfg.to_str().unwrap(),
        "--seed",
        "11",
        "--out",
        vri_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let vri_ckpt = vri_out.join("vri.ckpt");
    assert!(vri_ckpt.is_file());
    assert!(vri_out.join("train_log.csv").is_file());

    // ---- stage-2 training, twice with the same seed: byte-identical
    let rnv_cfg = fx.root.join("rnv_cfg.json");
    write_rnv_cfg(&rnv_cfg);
    let mut ckpts = Vec::new();
    for dir in ["rnv_a", "rnv_b"] {
        let rnv_out = fx.root.join(dir);
        let out = run(&[
            "train",
            "rnv",
            "--manifest",
            &fx.manifest,
            "--config",
            rnv_cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--surface",
            "truth",
            "--out",
            rnv_out.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        assert!(stdout(&out).contains("checkpoint"));
        ckpts.push(fs::read(rnv_out.join("rnv.ckpt")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1], "same seed must give identical weights");
    let rnv_ckpt = fx.root.join("rnv_a").join("rnv.ckpt");

    // ---- training with a predicted surface requires the stage-1 checkpoint
    let out = run(&[
        "train",
        "rnv",
        "--manifest",
        &fx.manifest,
        "--seed",
        "5",
        "--surface",
        "predicted",
        "--out",
        fx.root.join("rnv_c").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);

    // ---- inference, truth surface (case002 is a lesion-positive test case)
    let pred2 = fx.root.join("pred").join("case002");
    let out = run(&[
        "infer",
        "--oct",
        &fx.case("case002_oct.ovol"),
        "--octa",
        &fx.case("case002_octa.ovol"),
        "--rnv-ckpt",
        rnv_ckpt.to_str().unwrap(),
        "--surface",
        "truth",
        "--truth-vri",
        &fx.case("case002_vri.ovol"),
        "--out",
        pred2.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pred2.join("diagnosis.json")).unwrap()).unwrap();
    assert_eq!(report["case_id"], "case002");
    assert!(pred2.join("rnv_prob.pgm").is_file());
    assert!(pred2.join("overlay.pgm").is_file());

    // ---- inference, predicted surface
    let pred3 = fx.root.join("pred").join("case003");
    let out = run(&[
        "infer",
        "--oct",
        &fx.case("case003_oct.ovol"),
        "--octa",
        &fx.case("case003_octa.ovol"),
        "--vri-ckpt",
        vri_ckpt.to_str().unwrap(),
        "--rnv-ckpt",
        rnv_ckpt.to_str().unwrap(),
        "--out",
        pred3.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    // ---- predicted surface without a stage-1 checkpoint: usage error
    let out = run(&[
        "infer",
        "--oct",
        &fx.case("case002_oct.ovol"),
        "--octa",
        &fx.case("case002_octa.ovol"),
        "--rnv-ckpt",
        rnv_ckpt.to_str().unwrap(),
        "--out",
        fx.root.join("pred").join("bad").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);

    // ---- missing input volume: data error
    let out = run(&[
        "infer",
        "--oct",
        &fx.case("case099_oct.ovol"),
        "--octa",
        &fx.case("case099_octa.ovol"),
        "--rnv-ckpt",
        rnv_ckpt.to_str().unwrap(),
        "--surface",
        "truth",
        "--truth-vri",
        &fx.case("case099_vri.ovol"),
        "--out",
        fx.root.join("pred").join("bad2").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);

    // ---- evaluation over the inferred cases
    let eval_out = fx.root.join("eval");
    let out = run(&[
        "eval",
        "--pred",
        fx.root.join("pred").to_str().unwrap(),
        "--truth",
        fx.data.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(eval_out.join("per_case.csv").is_file());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_cases"], 2);

    // ---- longitudinal tracking over two copied visits
    let visits = fx.root.join("visits");
    for (name, months) in [("v0", "0.0"), ("v1", "6.0")] {
        let vdir = visits.join(name);
        fs::create_dir_all(&vdir).unwrap();
        fs::copy(pred2.join("rnv_mask.ovol"), vdir.join("rnv_mask.ovol")).unwrap();
        fs::copy(pred2.join("vessels.ovol"), vdir.join("vessels.ovol")).unwrap();
        fs::write(
            vdir.join("visit.json"),
            format!("{{ \"time_months\": {months} }}"),
        )
        .unwrap();
    }
    let track_out = fx.root.join("track");
    let out = run(&[
        "track",
        "--case-dir",
        visits.to_str().unwrap(),
        "--out",
        track_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(track_out.join("progression.csv").is_file());
    assert!(track_out.join("progression.json").is_file());
    let text = fs::read_to_string(track_out.join("progression.csv")).unwrap();
    assert_eq!(text.lines().count(), 3, "header + two visits");
}
