use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use terracodec::dataio::load_cube;
use terracodec_cli::{selftest, RunConfig};

fn tec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tec")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 10] = ["--height", "32", "--width", "32", "--bands", "4", "--frames", "3", "--preset", "small"];

/// A two-sequence corpus and a briefly trained FP checkpoint.
fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = r#"{"train": {"steps": 2, "batch": 1, "crop": 32, "stats_sequences": 2}}"#;
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    let o = tec(d, &[&SMALL[..], &["synth", "--out", "corpus", "--sequences", "2"]].concat());
    assert_eq!(code(&o), 0, "{o:?}");
    let o = tec(d, &[&SMALL[..], &["--config", "cfg.json", "train", "--out", "fp"]].concat());
    assert_eq!(code(&o), 0, "{o:?}");
    let stem = d.join("fp");
    (dir, stem)
}

#[test]
fn coding_commands_round_trip() {
    let (dir, _) = setup();
    let d = dir.path();
    let o = tec(d, &["encode", "--input", "corpus/seq_0000.tecr", "--checkpoint", "fp", "--out", "a.tecb"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("bppbf"));
    let o = tec(d, &["decode", "--input", "a.tecb", "--checkpoint", "fp", "--out", "a.tecr"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let (orig, rec) = (load_cube(&d.join("corpus/seq_0000.tecr")).unwrap(), load_cube(&d.join("a.tecr")).unwrap());
    assert_eq!(orig.len(), rec.len());
    assert_eq!(orig.dims(), rec.dims());
    // Decoding is deterministic.
    tec(d, &["decode", "--input", "a.tecb", "--checkpoint", "fp", "--out", "b.tecr"]);
    assert_eq!(std::fs::read(d.join("a.tecr")).unwrap(), std::fs::read(d.join("b.tecr")).unwrap());
}

#[test]
fn eval_and_curve_agree() {
    let (dir, _) = setup();
    let d = dir.path();
    let o = tec(d, &["eval", "--corpus", "corpus", "--checkpoint", "fp"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["class"], "all");
    let o = tec(d, &["curve", "--corpus", "corpus", "--checkpoint", "fp", "--out", "c.csv"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let csv = std::fs::read_to_string(d.join("c.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4].parse::<f64>().unwrap(), lines[0]["bppbf"].as_f64().unwrap());
    // Same inputs give the same table.
    tec(d, &["curve", "--corpus", "corpus", "--checkpoint", "fp", "--out", "c2.csv"]);
    assert_eq!(csv, std::fs::read_to_string(d.join("c2.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let (dir, _) = setup();
    let d = dir.path();
    assert_eq!(code(&tec(d, &["encode", "--bogus"])), 2);
    assert_eq!(code(&tec(d, &["--budget", "4", "eval", "--corpus", "corpus", "--checkpoint", "fp"])), 2);
    assert_eq!(code(&tec(d, &["--family", "flex", "--budget", "17", "eval", "--corpus", "corpus", "--checkpoint", "fp"])), 2);
    // A FLEX budget against a non-FLEX checkpoint is a usage error too.
    assert_eq!(code(&tec(d, &["--family", "flex", "--budget", "4", "eval", "--corpus", "corpus", "--checkpoint", "fp"])), 2);
    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&tec(d, &["eval", "--corpus", "empty", "--checkpoint", "fp"])), 3);
    std::fs::write(d.join("junk.tecb"), b"not a bitstream").unwrap();
    assert_eq!(code(&tec(d, &["decode", "--input", "junk.tecb", "--checkpoint", "fp", "--out", "x.tecr"])), 3);
}

#[test]
fn selftest_passes_and_detects_tampering() {
    let (dir, stem) = setup();
    let d = dir.path();
    let o = tec(d, &["selftest", "--checkpoint", "fp"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 7);
    let bin = stem.with_extension("bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[100] ^= 0x40;
    std::fs::write(&bin, bytes).unwrap();
    let o = tec(d, &["selftest", "--checkpoint", "fp"]);
    assert_eq!(code(&o), 4, "{o:?}");
    assert!(stdout(&o).contains("FAIL checkpoint-hash"));
}

#[test]
fn tie_rule_catches_a_mutated_quantizer() {
    assert!(selftest::tie_rule(terracodec::entropy::quantize).is_ok());
    // Rounding halves toward zero.
    assert!(selftest::tie_rule(|v| (v.abs() - 0.5).ceil().copysign(v) as i32).is_err());
    assert!(selftest::tie_rule(|v| v.round_ties_even() as i32).is_err());
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = tec(d, &["--family", "flex", "--budget", "4", "--lambda", "16", "--show-config", "selftest"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let cfg: RunConfig = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg.budget, Some(4));
    assert_eq!(cfg.lambda, 16.0);
    std::fs::write(d.join("c.json"), stdout(&o)).unwrap();
    let again = tec(d, &["--config", "c.json", "--show-config", "selftest"]);
    assert_eq!(stdout(&again), stdout(&o));
    std::fs::write(d.join("bad.json"), r#"{"lamda": 3}"#).unwrap();
    assert_eq!(code(&tec(d, &["--config", "bad.json", "selftest"])), 2);
}

#[test]
fn inpaint_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dims = ["--height", "64", "--width", "64", "--bands", "4", "--frames", "4", "--preset", "small", "--cloud-prob", "0.9"];
    let cfg = r#"{"train": {"steps": 1, "batch": 1, "crop": 64, "stats_sequences": 1}}"#;
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    assert_eq!(code(&tec(d, &[&dims[..], &["synth", "--out", "corpus", "--sequences", "1"]].concat())), 0);
    let o = tec(d, &[&dims[..], &["--family", "tt", "--config", "cfg.json", "train", "--out", "tt"]].concat());
    assert_eq!(code(&o), 0, "{o:?}");
    let args = ["inpaint", "--input", "corpus/seq_0000.tecr", "--masks", "corpus/mask_0000.tecr", "--checkpoint", "tt", "--target", "2"];
    let o = tec(d, &[&args[..], &["--out", "i.tecr", "--truth", "corpus/clear_0000.tecr", "--report", "r.json"]].concat());
    assert_eq!(code(&o), 0, "{o:?}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["target"], 2);
    assert_eq!(r["total_tokens"], 16);
    assert_eq!(load_cube(&d.join("i.tecr")).unwrap().len(), 1);
    assert_eq!(code(&tec(d, &[&args[..8], &["--target", "9", "--out", "j.tecr"]].concat())), 2);
    // FP checkpoints cannot inpaint.
    let fp = tec(d, &[&dims[..], &["--config", "cfg.json", "train", "--out", "fp"]].concat());
    assert_eq!(code(&fp), 0, "{fp:?}");
    let o = tec(d, &["inpaint", "--input", "corpus/seq_0000.tecr", "--masks", "corpus/mask_0000.tecr", "--checkpoint", "fp", "--target", "2", "--out", "k.tecr"]);
    assert_eq!(code(&o), 3, "{o:?}");
}
