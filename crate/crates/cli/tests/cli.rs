use std::path::Path;
use std::process::{Command, Output};

use tsr_core::harness::pipeline::Model;
use tsr_core::harness::{self, Manifest};

fn tsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        "[data]\ncorpus_dir = {:?}\ngenerate_count = 5\ngenerate_size = 32\nn_train_pairs = 6\nn_eval_pairs = 3\n\n\
         [patch]\nsize = 16\nstride = 16\n\n[net]\nwidth = 6\ndepth = 1\n",
        dir.join("corpus").display().to_string()
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(tsr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(tsr(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(tsr(&["train-teacher", "--out", "x", "--kind", "sideways"]).status.code(), Some(2));
    assert_eq!(tsr(&[]).status.code(), Some(2));
    assert_eq!(tsr(&["--help"]).status.code(), Some(0));
    assert_eq!(tsr(&["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_print_one_typed_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("r.csv");
    let o = tsr(&["sweep-t", "--config", cfg, "--ckpt", "/no/such.ckpt", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("error: ")).expect(&err);
    assert!(line.starts_with("error: MissingFile: "), "{line}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[weights]\nlambda_fl = -1.0\n").unwrap();
    let o = tsr(&["synth-data", "--config", bad.to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error: ValidationError: "), "{}", stderr(&o));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, vec![0u8; 64]).unwrap();
    let o = tsr(&["eval", "--config", cfg, "--ckpt", junk.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error: MalformedCheckpoint: "), "{}", stderr(&o));
}

#[test]
fn error_line_uses_the_core_error_kind() {
    let e = anyhow::Error::from(tsr_core::Error::ChecksumMismatch).context("checkpoint a.ckpt");
    let line = tsr_cli::error_line(&e);
    assert!(line.starts_with("error: ChecksumMismatch: checkpoint a.ckpt"), "{line}");
    assert!(!line.contains('\n'));
    assert_eq!(tsr_cli::error_line(&anyhow::anyhow!("plain")), "error: Error: plain");
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let run = |args: &[&str]| {
        let o = tsr(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    run(&["synth-data", "--config", cfg, "--out", &p("corpus")]);
    assert_eq!(std::fs::read_dir(dir.path().join("corpus")).unwrap().count(), 5);
    run(&["train-teacher", "--config", cfg, "--kind", "fidelity", "--steps", "3", "--out", &p("tf.ckpt")]);
    run(&["train-teacher", "--config", cfg, "--kind", "realness", "--steps", "3", "--out", &p("tr.ckpt")]);
    run(&["distill-stage1", "--config", cfg, "--teacher-f", &p("tf.ckpt"), "--teacher-r", &p("tr.ckpt"), "--steps", "2", "--out", &p("s1.ckpt")]);
    run(&["distill-stage2", "--config", cfg, "--ckpt", &p("s1.ckpt"), "--steps", "2", "--out", &p("s2.ckpt")]);
    run(&["eval", "--config", cfg, "--ckpt", &p("s2.ckpt"), "--t", "0.4", "--out", &p("eval.csv")]);
    run(&["sweep-alpha", "--config", cfg, "--ckpt-f", &p("tf.ckpt"), "--ckpt-r", &p("tr.ckpt"), "--out", &p("alpha.csv")]);
    run(&["sweep-t", "--config", cfg, "--ckpt", &p("s2.ckpt"), "--out", &p("t.csv")]);

    let s2 = Model::load(Path::new(&p("s2.ckpt"))).unwrap();
    assert!(s2.t_controllable());
    assert_eq!(s2.meta.step, 2);
    let tf = Model::load(Path::new(&p("tf.ckpt"))).unwrap();
    assert_eq!(tf.meta.stage, "teacher_f");

    let (key, rows) = harness::read_report(&std::fs::read_to_string(p("eval.csv")).unwrap()).unwrap();
    assert_eq!((key.as_str(), rows.len(), rows[0].key), ("t", 1, 0.4));
    let (key, rows) = harness::read_report(&std::fs::read_to_string(p("alpha.csv")).unwrap()).unwrap();
    assert_eq!((key.as_str(), rows.len()), ("alpha", 6));

    let log = std::fs::read_to_string(tsr_cli::log_path(Path::new(&p("s1.ckpt")))).unwrap();
    assert!(log.starts_with("step,loss,wall_ms,rec,fl,rn\n"), "{log}");
    assert_eq!(log.lines().count(), 3);

    let m: Manifest =
        serde_json::from_str(&std::fs::read_to_string(tsr_cli::manifest_path(Path::new(&p("s1.ckpt")))).unwrap()).unwrap();
    assert_eq!(m.command, "distill-stage1");
    assert_eq!(m.config_hash, s2.meta.config_hash);
    assert!(m.seeds.contains_key("stage1") && m.seeds.contains_key("percep"));
}
