use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml");

fn run(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechalign"))
        .args(args)
        .env("SPEECHALIGN_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn synth(root: &Path) -> PathBuf {
    let o = run(&["synth", "--config", SMOKE], root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    root.join("synth")
}

#[test]
fn gradcheck_passes_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--config", TINY], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains(" ok ")).count(), 8);
    assert!(dir.path().join("gradcheck/gradcheck.json").is_file());
}

#[test]
fn every_output_directory_records_config_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    for f in ["config.toml", "VERSION", "pretrain.jsonl", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let cfg = fs::read_to_string(data.join("config.toml")).unwrap();
    assert!(cfg.contains("synth_train_utterances = 20"));
}

#[test]
fn ablate_two_by_two_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let o = run(&["ablate", "--config", SMOKE, "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports = fs::read_dir(dir.path().join("ablate/reports")).unwrap().count();
    assert_eq!(reports, 4);
    assert!(dir.path().join("ablate/table.txt").is_file());

    let o = run(&["report", dir.path().join("ablate").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("scratch") && table.contains("seq-mlm"));
}

#[test]
fn pretrain_and_finetune_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let manifest = data.join("pretrain.jsonl");
    let mut ckpts = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(
            &["pretrain", "--config", SMOKE, "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        ckpts.push(fs::read(out.join("checkpoint.alnc")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);

    let ckpt = dir.path().join("a/checkpoint.alnc");
    let o = run(
        &["finetune", "--config", SMOKE, "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tuned = dir.path().join("finetune/finetuned.alnc");
    let test = data.join("test.jsonl");
    let o = run(&["evaluate", "--checkpoint", tuned.to_str().unwrap(), "--manifest", test.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("accuracy"));
}

#[test]
fn non_finite_loss_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = dir.path().join("huge.toml");
    let smoke = fs::read_to_string(SMOKE).unwrap().replace("pretrain_lr = 0.003", "pretrain_lr = 1e300");
    fs::write(&cfg, smoke).unwrap();
    let manifest = data.join("pretrain.jsonl");
    let o = run(
        &["pretrain", "--config", cfg.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    assert!(dir.path().join("pretrain/checkpoint.alnc").is_file());
}

#[test]
fn exit_codes_for_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&run(&["synth", "--config", cfg.to_str().unwrap()], dir.path())), 1);
    assert_eq!(code(&run(&["synth", "--variant", "bogus"], dir.path())), 1);
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&run(&["pretrain", "--manifest", "/no/such/file.jsonl"], dir.path())), 2);
}

#[test]
fn report_rejects_mixed_versions() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let o = run(&["ablate", "--config", SMOKE, "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0);
    let other = dir.path().join("ablate/reports/old");
    fs::create_dir_all(&other).unwrap();
    let src = fs::read_dir(dir.path().join("ablate/reports")).unwrap().flatten().find(|e| e.path().is_file()).unwrap();
    fs::copy(src.path(), other.join("copy.metrics.json")).unwrap();
    fs::write(other.join("VERSION"), "speechalign 0.0.1\n").unwrap();
    let o = run(&["report", dir.path().join("ablate").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mixed"));
}
