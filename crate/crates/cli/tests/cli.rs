use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf");
    fs::read_to_string(p).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.conf");
    fs::write(&p, format!("{}\n{extra}\n", smoke_config())).unwrap();
    p
}

fn mslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mslam"))
        .args(args)
        .env_remove("MSLAM_LOG")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join("manifest.txt")).unwrap()
}

#[test]
fn missing_config_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = mslam(&["pretrain", "--config", s(&tmp.path().join("absent.conf")), "--out", s(&out)]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("absent.conf"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn unknown_flag_prints_usage() {
    let o = mslam(&["pretrain", "--bogus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().contains("Usage"));
}

#[test]
fn bad_config_key_is_a_one_line_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "model.wings = 2");
    let o = mslam(&["build-vocab", "--config", s(&cfg), "--out", s(&tmp.path().join("v"))]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("model.wings"), "{err}");
    assert!(!tmp.path().join("v").exists());
}

#[test]
fn refuses_to_overwrite_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("vocab");
    assert!(mslam(&["build-vocab", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let o = mslam(&["build-vocab", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().contains("--force"));
    assert!(mslam(&["build-vocab", "--config", s(&cfg), "--out", s(&out), "--force"]).status.success());
    assert!(!tmp.path().join("vocab.lock").exists());
}

#[test]
fn pretrain_outputs_and_byte_identical_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = mslam(&["pretrain", "--config", s(&cfg), "--out", s(out), "--seed", "4"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = fs::read_to_string(a.join("log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.starts_with("step\tlr\ttotal\tcontrastive\tspeech_mlm\ttext_mlm\ttlm\tctc\n"));
    for f in ["log.tsv", "checkpoint.bin", "vocab.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = manifest(&a);
    assert!(m.contains("seed = 4\n"));
    assert!(m.contains("version = "));
    assert!(m.lines().any(|l| l.starts_with("config_sha256 = ") && l.len() == 16 + 64));

    // downstream commands reuse the checkpoint and are reproducible too
    let cfg2 = write_config(tmp.path(), &format!("encoder.checkpoint = {}", s(&a.join("checkpoint.bin"))));
    let mut reports = Vec::new();
    for name in ["p1", "p2"] {
        let out = tmp.path().join(name);
        let o = mslam(&["probe", "--config", s(&cfg2), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(fs::read(out.join("report.tsv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn speech_only_variant_drops_text_streams() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.total_steps = 2");
    let out = tmp.path().join("so");
    let o = mslam(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--variant", "speech-only"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert!(m.contains("variant = speech-only\n"));
    // twice the speech batch, nothing else
    assert!(m.contains("batch = 4,0,0\n"), "{m}");
    assert!(m.contains("loss_weights = 1,0,0,0\n"), "{m}");
    let bad = mslam(&["pretrain", "--config", s(&cfg), "--out", s(&tmp.path().join("x")), "--variant", "text-only"]);
    assert!(!bad.status.success());
}

#[test]
fn eval_matrix_and_finetune_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("m");
    let o = mslam(&["eval-matrix", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = fs::read_to_string(out.join("matrix.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = m.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], vec!["mslam-ctc", "S", "T"]);
    assert_eq!(rows[1][0], "S");
    assert_eq!(rows[2][0], "T");
    for r in &rows[1..] {
        for v in &r[1..] {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }

    let cfg = write_config(tmp.path(), "finetune.task = translate\ntranslate.tgt = bb\ntranslate.joint_mt = true");
    let out = tmp.path().join("t");
    let o = mslam(&["finetune", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert!(r.starts_with("input\ttoken_accuracy\texact_match\nspeech\t"), "{r}");
}

#[test]
fn grad_check_prints_every_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("g");
    let o = mslam(&["grad-check", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["ctc", "contrastive", "mlm", "paired", "seq2seq", "pretrain-step"]);
    for l in text.lines().skip(1) {
        let err: f64 = l.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{l}");
    }
    assert_eq!(fs::read_to_string(out.join("gradcheck.tsv")).unwrap(), text);
}
