use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use tfjoint::io::wav::{write_wav, BitDepth};
use tfjoint::signal::Waveform;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfjoint"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 1, "expected one line, got {text:?}");
    serde_json::from_str(text.trim()).expect("stdout is JSON")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stdout));
    json(&out)
}

fn fails(args: &[&str], kind: &str) {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let v = json(&out);
    assert_eq!(v["error"], kind, "{v}");
}

fn raw_field<'a>(line: &'a str, key: &str) -> &'a str {
    let start = line.find(&format!("\"{key}\":")).expect("key present") + key.len() + 3;
    let rest = &line[start..];
    &rest[..rest.find([',', '}']).unwrap()]
}

fn tone(dir: &Path, name: &str, seconds: f64, f0: f64) -> String {
    let n = (seconds * 16000.0) as usize;
    let s = (0..n)
        .map(|i| {
            let t = i as f64 / 16000.0;
            0.3 * (2.0 * std::f64::consts::PI * f0 * t).sin() + 0.1 * (2.0 * std::f64::consts::PI * 2.7 * f0 * t).sin()
        })
        .collect();
    let p = dir.join(name);
    write_wav(&p, &Waveform::new(s, 16000).unwrap(), BitDepth::Float32).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn evaluate_identical_files_hits_the_clamp() {
    let d = TempDir::new().unwrap();
    let a = tone(d.path(), "a.wav", 0.2, 220.0);
    let out = run(&["evaluate", "--est", &a, "--ref", &a]);
    assert!(out.status.success());
    let line = String::from_utf8(out.stdout).unwrap();
    assert_eq!(raw_field(&line, "si_sdr"), "80.0000");
}

#[test]
fn extract_reconstruct_loss_pipeline() {
    let d = TempDir::new().unwrap();
    let p = |n: &str| d.path().join(n).to_string_lossy().into_owned();
    let a = tone(d.path(), "a.wav", 0.3, 220.0);
    let b = tone(d.path(), "b.wav", 0.3, 230.0);
    let v = ok(&["extract", "--in", &a, "--out", &p("a.melf")]);
    assert_eq!(v["n_mels"], 80);
    assert_eq!(v["frames"], 21);
    ok(&["extract", "--in", &b, "--out", &p("b.melf")]);

    ok(&["reconstruct", "--in", &p("a.melf"), "--out", &p("r1.wav"), "--iterations", "8"]);
    ok(&["reconstruct", "--in", &p("a.melf"), "--out", &p("r2.wav"), "--iterations", "8"]);
    assert_eq!(std::fs::read(p("r1.wav")).unwrap(), std::fs::read(p("r2.wav")).unwrap());

    let out = run(&[
        "loss", "--pred", &p("b.melf"), "--target", &p("a.melf"), "--est", &b, "--ref", &a, "--lambda", "0",
    ]);
    assert!(out.status.success());
    let line = String::from_utf8(out.stdout).unwrap();
    assert_eq!(raw_field(&line, "total"), raw_field(&line, "loss_f"));

    let v = ok(&["loss", "--pred", &p("b.melf"), "--target", &p("a.melf"), "--iterations", "4"]);
    let want = v["loss_f"].as_f64().unwrap() + 1e-3 * v["loss_t"].as_f64().unwrap();
    assert!((v["total"].as_f64().unwrap() - want).abs() <= 1e-5 * want.abs().max(1.0));
}

#[test]
fn errors_are_single_json_lines() {
    let d = TempDir::new().unwrap();
    let missing = d.path().join("nope.wav").to_string_lossy().into_owned();
    fails(&["evaluate", "--est", &missing, "--ref", &missing], "io");

    let junk = d.path().join("junk.melf");
    std::fs::write(&junk, b"NOPE0000").unwrap();
    let junk = junk.to_string_lossy().into_owned();
    fails(&["reconstruct", "--in", &junk, "--out", "x.wav"], "format");

    let cfg = d.path().join("bad.cfg");
    std::fs::write(&cfg, "train.colour = blue\n").unwrap();
    let out = d.path().join("ck").to_string_lossy().into_owned();
    fails(&["train", "--config", &cfg.to_string_lossy(), "--out", &out], "invalid-config");
    fails(&["train", "--out", &out, "--set", "train.beta1=1.5"], "invalid-config");

    fails(&["no-such-command"], "invalid-config");
    assert!(run(&["--help"]).status.success());
}

#[test]
fn gradcheck_command_passes() {
    let v = ok(&["gradcheck", "--frames", "4"]);
    assert_eq!(v["passed"], true);
    assert_eq!(v["elements"], 320);
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn train_then_synthesize() {
    let d = TempDir::new().unwrap();
    let p = |n: &str| d.path().join(n).to_string_lossy().into_owned();
    let cfg = "\
# tiny run
corpus.size = 4
corpus.min_duration = 0.2
corpus.max_duration = 0.3
model.embed = 4
model.encoder = 8
model.decoder = 8
train.steps = 3
train.batch_size = 2
";
    std::fs::write(p("run.cfg"), format!("{cfg}log_path = {}\n", p("log.jsonl"))).unwrap();
    let v = ok(&["train", "--config", &p("run.cfg"), "--out", &p("ck")]);
    assert_eq!(v["steps"], 3);
    let log = std::fs::read_to_string(p("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for l in log.lines() {
        let s: Value = serde_json::from_str(l).unwrap();
        assert!(s["loss_t"].is_number());
    }

    let v = ok(&["train", "--resume", &p("ck"), "--set", "train.steps=4", "--out", &p("ck2")]);
    assert_eq!(v["steps"], 4);

    let args = ["synthesize", "--ckpt", &p("ck2"), "--tokens", "3 1 4 1", "--iterations", "4"];
    ok(&[&args[..], &["--out", &p("s1.wav")]].concat());
    ok(&[&args[..], &["--out", &p("s2.wav")]].concat());
    assert_eq!(std::fs::read(p("s1.wav")).unwrap(), std::fs::read(p("s2.wav")).unwrap());
    fails(&["synthesize", "--ckpt", &p("ck2"), "--tokens", "99", "--out", &p("x.wav")], "invalid-input");
}
