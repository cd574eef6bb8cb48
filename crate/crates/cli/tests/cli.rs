use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ghl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghl"))
        .args(args)
        .current_dir(cwd)
        .env("GHL_DATA_DIR", cwd.join("no-data-needed"))
        .output()
        .expect("spawn ghl")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn data_rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.split("\r\n").skip(1).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn one_epoch_gives_one_row() {
    let t = tmp();
    ok(&ghl(t.path(), &["train", "--config", "blobs_ghl", "--epochs", "1", "--out-dir", "r"]));
    let csv = t.path().join("r/metrics.csv");
    assert_eq!(data_rows(&csv).len(), 1);
    let header = std::fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("epoch,train_loss,train_acc,test_acc,wall_seconds,"));
}

#[test]
fn outputs_stay_in_the_run_directory() {
    let t = tmp();
    ok(&ghl(t.path(), &["train", "--epochs", "1"]));
    let top: Vec<PathBuf> = std::fs::read_dir(t.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(top, vec![t.path().join("runs")]);
    let runs: Vec<PathBuf> = std::fs::read_dir(t.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].file_name().unwrap().to_str().unwrap().to_string();
    let hash = manifest(&runs[0])["config_hash"].as_str().unwrap().to_string();
    assert_eq!(name, format!("blobs_ghl-{}", &hash[..12]));
    let mut files: Vec<String> = std::fs::read_dir(&runs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["checkpoint.ckpt", "manifest.json", "metrics.csv", "timing.csv"]);
}

#[test]
fn rule_override_changes_only_the_rule() {
    let t = tmp();
    let base = ["train", "--epochs", "2", "--seed", "5"];
    ok(&ghl(t.path(), &[&base[..], &["--rule", "ghl", "--out-dir", "a"]].concat()));
    ok(&ghl(t.path(), &[&base[..], &["--rule", "hebb_swta", "--out-dir", "b"]].concat()));
    let (mut a, mut b) = (manifest(&t.path().join("a")), manifest(&t.path().join("b")));
    assert_eq!(a["config"]["rule"], "ghl");
    assert_eq!(b["config"]["rule"], "hebb_swta");
    for m in [&mut a, &mut b] {
        let obj = m.as_object_mut().unwrap();
        for volatile in ["config_hash", "out_dir", "started_unix"] {
            obj.remove(volatile);
        }
        obj["config"].as_object_mut().unwrap().remove("rule");
    }
    assert_eq!(a, b);
    assert_ne!(
        std::fs::read(t.path().join("a/metrics.csv")).unwrap(),
        std::fs::read(t.path().join("b/metrics.csv")).unwrap()
    );
}

#[test]
fn single_thread_reruns_are_byte_identical() {
    let t = tmp();
    for dir in ["x", "y"] {
        ok(&ghl(t.path(), &["train", "--epochs", "3", "--threads", "1", "--out-dir", dir]));
    }
    let x = std::fs::read(t.path().join("x/metrics.csv")).unwrap();
    assert_eq!(x, std::fs::read(t.path().join("y/metrics.csv")).unwrap());
    // wall-clock time is kept out of the deterministic table
    for row in data_rows(&t.path().join("x/metrics.csv")) {
        assert_eq!(row.split(',').nth(4), Some(""));
    }
    assert_eq!(data_rows(&t.path().join("x/timing.csv")).len(), 3);
}

#[test]
fn flags_beat_file_beat_defaults() {
    let t = tmp();
    std::fs::write(t.path().join("c.toml"), "base = \"blobs_ghl\"\neta = 0.2\nepochs = 1\n[dataset]\nspread = 0.25\n")
        .unwrap();
    ok(&ghl(t.path(), &["train", "--config", "c.toml", "--eta", "0.03", "--out-dir", "r"]));
    let m = manifest(&t.path().join("r"));
    assert_eq!(m["config"]["eta"], 0.03);
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["dataset"]["spread"], 0.25);
    assert_eq!(m["config"]["dataset"]["n_train"], 300);
    assert_eq!(m["config"]["batch_size"], 16);
}

#[test]
fn config_hash_is_git_style_sha256_of_canonical_json() {
    use sha2::{Digest, Sha256};
    let t = tmp();
    ok(&ghl(t.path(), &["train", "--epochs", "1", "--out-dir", "r"]));
    let m = manifest(&t.path().join("r"));
    let json = serde_json::to_string(&m["config"]).unwrap();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0{json}", json.len()));
    let expected: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(m["config_hash"], expected);
}

#[test]
fn bad_key_names_the_key_and_the_accepted_ones() {
    let t = tmp();
    std::fs::write(t.path().join("bad.toml"), "base = \"blobs_ghl\"\nlearning_rate = 0.1\n").unwrap();
    let out = ghl(t.path(), &["train", "--config", "bad.toml"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("learning_rate") && err.contains("`eta`") && err.contains("`batch_size`"), "{err}");
    assert!(!t.path().join("runs").exists());
}

#[test]
fn unsafe_checkpoint_paths_are_rejected() {
    let t = tmp();
    std::fs::write(t.path().join("c.toml"), "base = \"blobs_ghl\"\ncheckpoint_path = \"../escape.ckpt\"\n").unwrap();
    let out = ghl(t.path(), &["train", "--config", "c.toml", "--out-dir", "r"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("checkpoint_path"));
    assert!(!t.path().join("escape.ckpt").exists());
}

#[test]
fn interrupted_run_resumes_to_the_same_table() {
    let t = tmp();
    let base = ["train", "--epochs", "4", "--threads", "1"];
    ok(&ghl(t.path(), &[&base[..], &["--out-dir", "full"]].concat()));
    let cut = ghl(t.path(), &[&base[..], &["--out-dir", "cut", "--stop-after", "2"]].concat());
    assert!(!cut.status.success());
    assert_eq!(data_rows(&t.path().join("cut/metrics.csv")).len(), 2);
    ok(&ghl(t.path(), &[&base[..], &["--out-dir", "cut", "--resume"]].concat()));
    assert_eq!(
        std::fs::read(t.path().join("full/metrics.csv")).unwrap(),
        std::fs::read(t.path().join("cut/metrics.csv")).unwrap()
    );
}

#[test]
fn eval_reproduces_the_final_test_accuracy() {
    let t = tmp();
    ok(&ghl(t.path(), &["train", "--epochs", "2", "--out-dir", "r"]));
    let rows = data_rows(&t.path().join("r/metrics.csv"));
    let test_acc: f64 = rows.last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    let out = ghl(t.path(), &["eval", "--checkpoint", "r/checkpoint.ckpt"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(&format!("accuracy {test_acc:.4}")), "{text}");
    assert!(text.contains("300 samples"), "{text}");
}

#[test]
fn gradcheck_exit_codes() {
    let t = tmp();
    let pass = ghl(t.path(), &["gradcheck", "--arch", "tiny_conv", "--input", "2x6x6", "--classes", "3"]);
    ok(&pass);
    let text = String::from_utf8(pass.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("layer ")).count(), 2, "{text}");

    let corrupt = ghl(t.path(), &["gradcheck", "--arch", "mlp:6-5-3", "--corrupt-backward", "1.001"]);
    assert_eq!(corrupt.status.code(), Some(1));
    assert!(String::from_utf8(corrupt.stdout).unwrap().contains("FAIL"));

    ok(&ghl(t.path(), &["gradcheck", "--arch", "mlp:6-5-3", "--zero-weights"]));

    let big = ghl(t.path(), &["gradcheck", "--arch", "mlp:784-256-10"]);
    assert!(!big.status.success());
    assert!(stderr(&big).contains("limited to 10000"), "{}", stderr(&big));
}

#[test]
fn two_rule_ablation_gives_two_summary_rows() {
    let t = tmp();
    let out = ghl(
        t.path(),
        &["ablate", "--rules", "ghl,sign_only", "--seeds", "0", "--epochs", "1", "--out-dir", "ab"],
    );
    ok(&out);
    let rows = data_rows(&t.path().join("ab/summary.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("ghl,0,") && rows[1].starts_with("sign_only,0,"), "{rows:?}");
    // five rates per rule, one seed
    assert_eq!(data_rows(&t.path().join("ab/runs.csv")).len(), 10);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("| global | local |"), "{table}");
    assert_eq!(table, std::fs::read_to_string(t.path().join("ab/table.md")).unwrap() + "ab/summary.csv\n");
}

#[test]
fn ablation_argument_errors() {
    let t = tmp();
    let empty = ghl(t.path(), &["ablate", "--rules", "ghl,sign_only", "--seeds", "", "--epochs", "1"]);
    assert!(!empty.status.success());
    assert!(stderr(&empty).contains("seed"));

    let one = ghl(t.path(), &["ablate", "--rules", "ghl", "--seeds", "0", "--epochs", "1"]);
    assert!(!one.status.success());
    assert!(stderr(&one).contains("two rules"));

    let unknown = ghl(t.path(), &["ablate", "--rules", "ghl,hebbian_magic", "--epochs", "1"]);
    assert!(!unknown.status.success());
    assert!(stderr(&unknown).contains("hebbian_magic"));
}

#[test]
fn sweep_writes_one_row_per_value_and_seed() {
    let t = tmp();
    ok(&ghl(
        t.path(),
        &["sweep", "--param", "tau", "--values", "0.5,2", "--seeds", "0,1", "--epochs", "1", "--out-dir", "sw"],
    ));
    let rows = data_rows(&t.path().join("sw/sweep.csv"));
    assert_eq!(rows.len(), 4);
    let m = manifest(&t.path().join("sw/tau=2-seed1"));
    assert_eq!((m["config"]["tau"].as_f64(), m["config"]["seed"].as_u64()), (Some(2.0), Some(1)));
}
