use std::path::Path;
use std::process::{Command, Output};

fn sleepnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sleepnet")).args(args).output().expect("spawn sleepnet")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_requested_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("d.slpd");
    let o = sleepnet(&["synth", "--recordings", "3", "--epochs", "63", "--seed", "4", "--out", p(&f)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = sleepnet::data::read_dataset(&f).unwrap();
    assert_eq!(ds.recordings.len(), 3);
    assert_eq!(ds.num_epochs(), 189);
    assert_eq!(ds, sleepnet::data::generate_synthetic(3, 63, 4));
}

#[test]
fn synth_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.slpd");
    let b = dir.path().join("b.slpd");
    for f in [&a, &b] {
        assert!(sleepnet(&["synth", "--recordings", "2", "--epochs", "21", "--out", p(f)]).status.success());
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn missing_checkpoint_is_state_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("d.slpd");
    assert!(sleepnet(&["synth", "--recordings", "1", "--epochs", "21", "--out", p(&f)]).status.success());
    let o = sleepnet(&["eval", "--data", p(&f), "--checkpoint", p(&dir.path().join("nope"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error: state: checkpoint not found"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn finetune_without_checkpoint_is_state_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sleepnet(&["finetune", "--data", "x.slpd", "--init", p(&dir.path().join("missing")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: state:"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["frobnicate"][..], &["synth", "--epochs", "many"], &[]] {
        let o = sleepnet(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).starts_with("error: usage:"), "{}", stderr(&o));
    }
}

#[test]
fn help_succeeds_for_every_command() {
    assert!(sleepnet(&["--help"]).status.success());
    for cmd in ["synth", "spectrogram", "stage0", "pretrain", "finetune", "eval", "ablate", "gradcheck", "describe"] {
        let o = sleepnet(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{cmd}");
    }
}

#[test]
fn unknown_config_key_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    std::fs::write(&c, r#"{"learning_rate": 0.1}"#).unwrap();
    let o = sleepnet(&["stage0", "--data", "x.slpd", "--config", p(&c), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error: input: unknown configuration key `learning_rate`"), "{}", stderr(&o));
}

#[test]
fn spectrogram_csv_has_frames_and_bins() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("d.slpd");
    assert!(sleepnet(&["synth", "--recordings", "2", "--epochs", "21", "--out", p(&f)]).status.success());
    let o = sleepnet(&["spectrogram", "--data", p(&f), "--recording", "1", "--epoch", "3", "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + sleepnet::dsp::N_FRAMES);
    assert!(lines[1].starts_with("1,3,0,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 3 + sleepnet::dsp::N_BINS));
    let o = sleepnet(&["spectrogram", "--data", p(&f), "--epoch", "40", "--csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn spectrogram_sidecar_matches_dsp() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("d.slpd");
    let out = dir.path().join("spec.bin");
    assert!(sleepnet(&["synth", "--recordings", "2", "--epochs", "21", "--seed", "2", "--out", p(&f)]).status.success());
    let o = sleepnet(&["spectrogram", "--data", p(&f), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let header: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("spec.bin.json")).unwrap()).unwrap();
    assert_eq!(header, serde_json::json!({"n": 42, "frames": 29, "bins": 129}));
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(bytes.len(), 42 * 29 * 129 * 4);
    let ds = sleepnet::data::generate_synthetic(2, 21, 2);
    let want = sleepnet::dsp::stft_spectrogram(&ds.recordings[1].epochs[5].raw);
    let off = (21 + 5) * 29 * 129 * 4;
    let got: Vec<f32> = bytes[off..off + 29 * 129 * 4].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(got, want.values);
}

#[test]
fn gradcheck_passes() {
    let o = sleepnet(&["gradcheck"]);
    assert!(o.status.success(), "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).lines().count() >= 30);
}

#[test]
fn describe_lists_layers_at_both_scales() {
    for scale in ["desk", "paper"] {
        let o = sleepnet(&["describe", "--scale", scale]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let layers = v["layers"].as_array().unwrap();
        let sum: u64 = layers.iter().map(|l| l["params"].as_u64().unwrap()).sum();
        assert_eq!(v["total_params"].as_u64().unwrap(), sum);
        assert!(layers[0]["name"].as_str().unwrap().starts_with("cnn"));
    }
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let data = d("d.slpd");
    assert!(sleepnet(&["synth", "--recordings", "3", "--epochs", "42", "--out", p(&data)]).status.success());
    let o = sleepnet(&["stage0", "--data", p(&data), "--steps", "3", "--out", p(&d("s0"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    // fine-tuning needs a pre-training checkpoint
    let o = sleepnet(&["finetune", "--data", p(&data), "--init", p(&d("s0")), "--out", p(&d("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = sleepnet(&["pretrain", "--data", p(&data), "--init", p(&d("s0")), "--steps", "3", "--out", p(&d("pt")), "--log", p(&d("pt.csv"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(d("pt.csv")).unwrap().lines().count(), 2 + 3);
    let o = sleepnet(&["finetune", "--data", p(&data), "--init", p(&d("pt")), "--steps", "3", "--out", p(&d("ft"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sleepnet(&["eval", "--data", p(&data), "--checkpoint", p(&d("ft")), "--out", p(&d("m.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d("m.json")).unwrap()).unwrap();
    assert_eq!(m["epochs"], 126);
    assert!(m["accuracy"].as_f64().unwrap() <= 1.0);
}
