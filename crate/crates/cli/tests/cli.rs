use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn rfvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path, objective: &str, iterations: u64) -> PathBuf {
    let text = format!(
        r#"{{
  "name": "tiny-run",
  "dataset": {{"resolution": 8, "cardinalities": [3, 3, 3, 3]}},
  "model": {{"latent_dim": 4, "encoder_hidden": [16], "decoder_hidden": [16]}},
  "objective": {objective},
  "optimizer": {{"disc_hidden": [16]}},
  "training": {{"batch_size": 8, "iterations": {iterations}, "seed": 7, "checkpoint_every": 10, "log_every": 5}},
  "eval": {{"vote": {{"l": 20, "num_pairs": 120, "repeats": 2}}, "traversal_count": 5}}
}}"#
    );
    let tag: String = objective.chars().filter(char::is_ascii_alphanumeric).collect();
    let path = dir.join(format!("cfg-{tag}-{iterations}.json"));
    fs::write(&path, text).unwrap();
    path
}

const RFVAE: &str = r#"{"kind": "rfvae"}"#;
const VANILLA: &str = r#"{"kind": "vanilla", "gamma": 0.0}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(cfg: &Path, out: &Path) {
    let o = rfvae(&["generate", "--config", s(cfg), "--out", s(out)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn desk_preset_reports_image_count() {
    let tmp = TempDir::new().unwrap();
    let o = rfvae(&["generate", "--preset", "desk", "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("2048 images"), "{}", stdout(&o));
}

#[test]
fn generation_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), RFVAE, 0);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&cfg, &a);
    generate(&cfg, &b);
    let fa = fs::read(a.join("dataset.rfds")).unwrap();
    assert_eq!(fa, fs::read(b.join("dataset.rfds")).unwrap());
    assert_eq!(&fa[..4], b"RFDS");
}

#[test]
fn config_errors_exit_2_with_prefix() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"dataset": {"cardinalities": [4, 1, 8, 8]}}"#).unwrap();
    let o = rfvae(&["generate", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: "), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);

    fs::write(&bad, r#"{"trainng": {}}"#).unwrap();
    let o = rfvae(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));

    let o = rfvae(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: "));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), RFVAE, 5);
    let o = rfvae(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error[io]: "), "{}", stderr(&o));
}

#[test]
fn vanilla_training_never_builds_a_discriminator() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), VANILLA, 12);
    let run = tmp.path().join("run");
    generate(&cfg, &run);
    let o = rfvae(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("logs/train.log")).unwrap();
    assert!(log.contains("discriminator: none"), "{log}");
    let csv = fs::read_to_string(run.join("logs/loss.csv")).unwrap();
    assert!(csv.starts_with("step,recon,kl_0,kl_1,kl_2,kl_3,weighted_kl,tc,l1_r,entropy_r,total\n"));
    // steps 0, 5 and 10
    assert_eq!(csv.lines().count(), 4);
    assert!(run.join("checkpoints/ckpt_00000010.rfvl").exists());
    assert!(run.join("checkpoints/last.rfvl").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = TempDir::new().unwrap();
    let short = tiny_config(tmp.path(), RFVAE, 10);
    let long = tiny_config(tmp.path(), RFVAE, 20);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&long, &a);
    generate(&long, &b);
    for (cfg, run) in [(&long, &a), (&short, &b), (&long, &b)] {
        let o = rfvae(&["train", "--config", s(cfg), "--out", s(run)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |p: &Path, f: &str| fs::read(p.join(f)).unwrap();
    assert_eq!(read(&a, "logs/loss.csv"), read(&b, "logs/loss.csv"));
    assert_eq!(read(&a, "checkpoints/last.rfvl"), read(&b, "checkpoints/last.rfvl"));
    let csv = String::from_utf8(read(&a, "logs/loss.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with(",r_3"));
}

#[test]
fn seed_flag_overrides_config_and_is_echoed() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), VANILLA, 2);
    let run = tmp.path().join("run");
    generate(&cfg, &run);
    let o = rfvae(&["train", "--config", s(&cfg), "--out", s(&run), "--seed", "99"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = fs::read_to_string(run.join("config.json")).unwrap();
    assert!(echo.contains("\"seed\": 99"), "{echo}");
    assert!(run.join("metadata.json").exists());
}

#[test]
fn non_finite_loss_aborts_with_exit_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), r#"{"kind": "beta", "beta": 1e308}"#, 5);
    let run = tmp.path().join("run");
    generate(&cfg, &run);
    let o = rfvae(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[nan]: "), "{}", stderr(&o));
    assert!(stderr(&o).contains("weighted_kl"));
    assert!(!run.join("checkpoints/last.rfvl").exists());
}

#[test]
fn oracle_eval_is_perfect_and_report_merges() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), VANILLA, 4);
    let run = tmp.path().join("run");
    generate(&cfg, &run);
    let o = rfvae(&["eval", "--config", s(&cfg), "--out", s(&run), "--oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("eval/metrics.csv")).unwrap();
    let score = |name: &str| -> f64 {
        let row = csv.lines().find(|l| l.split(',').nth(2) == Some(name)).unwrap();
        row.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert!(score("metric1") >= 0.99 && score("metric2") >= 0.99, "{csv}");
    assert!(fs::read_to_string(run.join("eval/report.txt")).unwrap().contains("D / C / I"));

    let o = rfvae(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success());
    let o = rfvae(&["eval", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trained = tmp.path().join("trained.csv");
    fs::copy(run.join("eval/metrics.csv"), &trained).unwrap();

    let merged = tmp.path().join("merged");
    let o = rfvae(&["report", s(&trained), s(&run), "--out", s(&merged)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.contains("tiny-")).count(), 2);
    assert!(merged.join("report.csv").exists());

    let partial = tmp.path().join("partial.csv");
    let kept: Vec<&str> = csv.lines().filter(|l| !l.contains(",metric3_c,")).collect();
    fs::write(&partial, kept.join("\n")).unwrap();
    let o = rfvae(&["report", s(&partial)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[merge]: ") && stderr(&o).contains("metric3_c"));
}

#[test]
fn traversals_write_one_grid_per_dim() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), RFVAE, 3);
    let run = tmp.path().join("run");
    generate(&cfg, &run);
    assert!(rfvae(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let o = rfvae(&["traverse", "--config", s(&cfg), "--out", s(&run), "--index", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for j in 0..4 {
        let pgm = fs::read(run.join(format!("traversals/dim_{j}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n40 8\n255\n"));
        assert_eq!(pgm.len(), 12 + 40 * 8);
    }
    let manifest = fs::read_to_string(run.join("traversals/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(".pgm")).count(), 4);

    let o = rfvae(&["traverse", "--config", s(&cfg), "--out", s(&run), "--index", "81"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: index error"));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), VANILLA, 2);
    let run = tmp.path().join("run");
    generate(&cfg, &run);
    assert!(rfvae(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let ck = run.join("checkpoints/last.rfvl");
    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&ck, bytes).unwrap();
    let o = rfvae(&["eval", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error[format]: "), "{}", stderr(&o));
}
