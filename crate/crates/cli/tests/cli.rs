//! Config handling, run modes and their files, end to end on tiny settings.

use std::path::Path;
use std::process::Command;

use dvp_cli::commands::{gen_data, run_bandit_test, run_dump_attn, run_flops, run_sweep, run_train};
use dvp_cli::config::{ENCODER_DECODER_LR, ENCODER_LR};
use dvp_cli::{resolve_config, run, Mode, RunConfig};
use dvp_core::prompt::Strategy;
use dvp_core::transformer::checkpoint;

const TINY: &str = r#"
seed = 1
[model]
layers = 3
width = 16
heads = 2
ffn_mult = 2
[prompt]
strategy = "dvp-single"
layer = 2
[task]
train_size = 64
val_size = 32
test_size = 16
[train]
epochs = 2
batch_size = 16
[train.optim]
kind = "adamw"
lr = 1e-3
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY, None).unwrap()
}

fn dvp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dvp"))
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn learning_rate_default_follows_model_kind() {
    let enc = RunConfig::from_toml("", None).unwrap();
    assert_eq!(enc.train.optim.lr, ENCODER_LR);
    let ed = RunConfig::from_toml("[model]\nkind = \"encoder-decoder\"\n", None).unwrap();
    assert_eq!(ed.train.optim.lr, ENCODER_DECODER_LR);
    let explicit = RunConfig::from_toml("[model]\nkind = \"encoder-decoder\"\n[train.optim]\nlr = 0.5\n", None).unwrap();
    assert_eq!(explicit.train.optim.lr, 0.5);
    assert_eq!(RunConfig::default(), enc);
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    assert!(RunConfig::from_toml("[model]\nlayerz = 3\n", None).is_err());
    assert!(RunConfig::from_toml("[prompt]\nstrategy = \"late\"\n", None).is_err());
    let cfg = RunConfig::from_toml("[search]\nsamples = 9\n", None).unwrap();
    let err = format!("{:#}", cfg.validate().unwrap_err());
    assert!(err.contains("search.samples"), "{err}");
    let cfg = RunConfig::from_toml("[train]\nepochs = 0\n", None).unwrap();
    assert!(format!("{:#}", cfg.validate().unwrap_err()).contains("train"));
}

#[test]
fn data_paths_resolve_against_the_config_and_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[data]\ntrain = \"f/train.bin\"\nval = \"f/val.bin\"\nnum_classes = 8\n";
    let cfg = RunConfig::from_toml(text, Some(dir.path())).unwrap();
    assert_eq!(cfg.data.as_ref().unwrap().train, dir.path().join("f/train.bin"));
    let err = format!("{:#}", cfg.validate().unwrap_err());
    assert!(err.contains("data") && err.contains("does not exist"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[search]\nsamples = 0\n").unwrap();
    let out = dvp().arg("--config").arg(&bad).arg("flops").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("search.samples"));

    let missing = dvp().args(["--config", "/nonexistent/dvp.toml", "flops"]).output().unwrap();
    assert!(!missing.status.success());

    let ok = dvp().arg("--out").arg(dir.path().join("f")).arg("flops").output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("flops:"));
    assert!(dir.path().join("f/flops.csv").exists());
}

#[test]
fn seed_and_out_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, TINY).unwrap();
    let cfg = resolve_config(Some(&path), Some(42), Some(dir.path().join("o"))).unwrap();
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.out, dir.path().join("o"));
    assert_eq!(cfg.model.layers, 3);
    assert_eq!(cfg.search_samples(), 3);
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_train(&tiny(), dir.path(), |_| {}).unwrap();
    assert_eq!(r.history.len(), 2);
    assert!(r.test_accuracy.is_some());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "# dvp metrics v1");
    assert_eq!(lines[1], "epoch,train_loss,train_acc,val_loss,val_acc");
    assert_eq!(lines.len(), 4);
    let back = checkpoint::load(&dir.path().join("final.dvpm")).unwrap();
    assert_eq!(back, r.model);
    assert!(std::fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("final val accuracy"));
}

#[test]
fn adapter_mode_keeps_frozen_tensors_between_checkpoints() {
    let mut cfg = tiny();
    cfg.adapter.enabled = true;
    let dir = tempfile::tempdir().unwrap();
    run_train(&cfg, dir.path(), |_| {}).unwrap();
    let init = checkpoint::load(&dir.path().join("init.dvpm")).unwrap();
    let fin = checkpoint::load(&dir.path().join("final.dvpm")).unwrap();
    let policy = fin.freeze_policy();
    assert!(policy.adapters_only);
    let mut moved = 0;
    for ((name, a), (_, b)) in init.params.iter().zip(fin.params.iter()) {
        if policy.is_trainable(name) {
            moved += usize::from(a != b);
        } else {
            assert_eq!(a, b, "{name}");
        }
    }
    assert!(moved > 0);
}

#[test]
fn single_layer_sweep_is_a_train_run() {
    let mut cfg = tiny();
    cfg.sweep.layers = Some(vec![2]);
    let dir = tempfile::tempdir().unwrap();
    let sweep = run_sweep(&cfg, dir.path()).unwrap();
    let train_dir = tempfile::tempdir().unwrap();
    let train = run_train(&cfg, train_dir.path(), |_| {}).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    assert_eq!(sweep.rows[0].history, train.history);
    assert_eq!(sweep.best_layer, 2);
    assert_eq!(first_line(&dir.path().join("sweep.csv")), "# dvp sweep v1");
    assert!(dir.path().join("metrics_layer_02.csv").exists());
}

#[test]
fn flops_table_covers_strategies_and_layers() {
    let mut cfg = tiny();
    cfg.flops.preset = dvp_cli::config::FlopsPreset::PaperEncoder;
    let dir = tempfile::tempdir().unwrap();
    let rows = run_flops(&cfg, dir.path()).unwrap();
    // common and cls once, both dynamic strategies at every one of 12 layers
    assert_eq!(rows.len(), 2 + 2 * 12);
    for r in &rows {
        match r.prompt.strategy {
            Strategy::Common => assert_eq!(r.ratio, 1.0),
            Strategy::DvpSingle => assert_eq!(r.token_count, 17),
            _ => assert!(r.ratio < 1.0),
        }
    }
    let late = rows.iter().find(|r| r.prompt.strategy == Strategy::DvpSingle && r.prompt.layer == 12).unwrap();
    assert!(late.ratio <= 0.25);
    assert!(std::fs::read_to_string(dir.path().join("flops.txt")).unwrap().contains("dvp-single"));
}

#[test]
fn bandit_test_trace_and_zero_rate() {
    let mut cfg = tiny();
    cfg.bandit_test.seeds = 3;
    cfg.bandit_test.steps = 150;
    cfg.bandit_test.alpha = 0.0;
    let dir = tempfile::tempdir().unwrap();
    run_bandit_test(&cfg, dir.path()).unwrap();
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(2).collect();
    assert_eq!(rows.len(), 150);
    let last: Vec<&str> = rows[149].split(',').collect();
    // H_1..H_5 follow step, trained_arm, sampled_arms, rewards, baseline
    assert!(last[5..10].iter().all(|h| h.parse::<f64>().unwrap() == 0.0), "{last:?}");
    let seeds = std::fs::read_to_string(dir.path().join("seeds.csv")).unwrap();
    assert_eq!(seeds.lines().count(), 2 + 3);
}

#[test]
fn bernoulli_bandit_test_finds_a_clear_winner() {
    let mut cfg = tiny();
    cfg.bandit_test.oracle = dvp_cli::config::OracleKind::Bernoulli;
    cfg.bandit_test.means = vec![0.1, 0.9, 0.1];
    cfg.bandit_test.samples = 3;
    cfg.bandit_test.alpha = 0.1;
    cfg.bandit_test.seeds = 10;
    cfg.bandit_test.steps = 500;
    let dir = tempfile::tempdir().unwrap();
    let s = run_bandit_test(&cfg, dir.path()).unwrap();
    assert_eq!(s.best_arm, 2);
    assert_eq!(s.recovery_rate, 1.0);
}

#[test]
fn generated_files_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    gen_data(&tiny(), &data_dir).unwrap();
    for split in ["train", "val", "test"] {
        assert!(data_dir.join(format!("{split}.bin")).exists());
        assert!(data_dir.join(format!("{split}.csv")).exists());
    }
    let text = format!(
        "{TINY}[data]\ntrain = \"data/train.bin\"\nval = \"data/val.bin\"\ntest = \"data/test.bin\"\nnum_classes = 8\n"
    );
    let cfg = RunConfig::from_toml(&text, Some(dir.path())).unwrap();
    cfg.validate().unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = run_train(&cfg, out.path(), |_| {}).unwrap();
    assert_eq!(r.history.len(), 2);
}

#[test]
fn dump_attn_writes_one_map_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let n = run_dump_attn(&tiny(), dir.path(), |_| {}).unwrap();
    assert!(n >= 3);
    for layer in 1..=3 {
        let path = dir.path().join(format!("layer_{layer:02}.csv"));
        assert_eq!(first_line(&path), "# dvp attention v1");
    }
    assert!(std::fs::read_to_string(dir.path().join("heatmap.txt")).unwrap().contains("layer 1"));

    // Reuse the trained checkpoint instead of training again.
    let mut cfg = tiny();
    cfg.dump.checkpoint = Some(dir.path().join("final.dvpm"));
    let again = tempfile::tempdir().unwrap();
    assert_eq!(run_dump_attn(&cfg, again.path(), |_| {}).unwrap(), n);
    for layer in 1..=3 {
        let name = format!("layer_{layer:02}.csv");
        assert_eq!(std::fs::read(dir.path().join(&name)).unwrap(), std::fs::read(again.path().join(&name)).unwrap());
    }
}

#[test]
fn reruns_reproduce_metrics_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny();
    cfg.out = a.path().to_path_buf();
    run(Mode::Train, &cfg, true).unwrap();
    cfg.out = b.path().to_path_buf();
    run(Mode::Train, &cfg, true).unwrap();
    for f in ["metrics.csv", "final.dvpm", "summary.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
