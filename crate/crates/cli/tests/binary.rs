mod common;

use std::fs;
use std::path::Path;

use causal_cxr::model::Model;
use causal_cxr::numcore::OptimizerState;
use causal_cxr::synthbench::Split;
use causal_cxr_cli::checkpoint::Checkpoint;
use causal_cxr_cli::commands::{self, read_attention};
use causal_cxr_cli::config::RunConfig;
use causal_cxr_cli::{EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_PROPERTY, EXIT_USAGE};
use common::{bin, code, small_config, write_config};

fn pipeline(dir: &Path, cfg: &Path) {
    let (c, o) = (cfg.to_str().unwrap(), dir.to_str().unwrap());
    for cmd in ["gen-data", "train", "eval"] {
        let out = bin(&[cmd, "--config", c, "--out", o]);
        assert_eq!(code(&out), EXIT_OK, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn fixed_seed_pipeline_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = write_config(a.path(), "");
    pipeline(a.path(), &cfg);
    pipeline(b.path(), &cfg);
    for f in ["eval_test.kv", "eval_test.tsv", "trajectory.kv", "losses.tsv", "data/manifest.txt", "data/train.img"] {
        assert!(fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    // The checkpoint header echoes the output directory, so compare contents.
    let arch = small_config("").model;
    let (ca, cb) = (
        Checkpoint::load(&a.path().join("checkpoint.bin"), &arch).unwrap(),
        Checkpoint::load(&b.path().join("checkpoint.bin"), &arch).unwrap(),
    );
    assert!(ca.model == cb.model && ca.optimizer == cb.optimizer && ca.epoch == cb.epoch);
    let other = tempfile::tempdir().unwrap();
    let out = bin(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", other.path().to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code(&out), EXIT_OK);
    assert!(fs::read(a.path().join("data/train.img")).unwrap() != fs::read(other.path().join("data/train.img")).unwrap());
}

#[test]
fn logged_steps_satisfy_the_loss_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    pipeline(dir.path(), &cfg);
    let log = fs::read_to_string(dir.path().join("losses.tsv")).unwrap();
    let mut rows = 0;
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let num = |s: &str| if s == "n/a" { 0.0 } else { s.parse::<f64>().unwrap() };
        let (sl, conf, bd, total) = (num(f[2]), num(f[3]), num(f[4]), num(f[5]));
        // Columns carry six decimals, so the identity holds to the print precision.
        assert!((sl + 0.5 * conf + 0.5 * bd - total).abs() < 2e-6, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 2 * 6);
    let stdout = String::from_utf8(bin(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).stdout).unwrap();
    assert!(stdout.contains("loss identity max residual 0e0"), "{stdout}");
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert_eq!(code(&bin(&[])), EXIT_USAGE);
    assert_eq!(code(&bin(&["frobnicate"])), EXIT_USAGE);
    assert_eq!(code(&bin(&["--help"])), EXIT_OK);
    assert_eq!(code(&bin(&["defaults"])), EXIT_OK);

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.epochs = lots\n").unwrap();
    let out = bin(&["gen-data", "--config", bad.to_str().unwrap(), "--out", o]);
    assert_eq!(code(&out), EXIT_USAGE);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let cfg = write_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&bin(&["train", "--config", c, "--out", o])), EXIT_DATA);
    assert_eq!(code(&bin(&["gen-data", "--config", c, "--out", o])), EXIT_OK);
    let img = dir.path().join("data/val.img");
    let mut bytes = fs::read(&img).unwrap();
    bytes[100] ^= 0xff;
    fs::write(&img, bytes).unwrap();
    let out = bin(&["train", "--config", c, "--out", o]);
    assert_eq!(code(&out), EXIT_DATA);
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupted"));

    let fresh = tempfile::tempdir().unwrap();
    let f = fresh.path().to_str().unwrap();
    let nan = write_config(fresh.path(), "train.learning_rate = 1e300\n");
    let n = nan.to_str().unwrap();
    assert_eq!(code(&bin(&["gen-data", "--config", n, "--out", f])), EXIT_OK);
    let out = bin(&["train", "--config", n, "--out", f]);
    assert_eq!(code(&out), EXIT_NUMERIC, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&bin(&["eval", "--config", n, "--out", f])), EXIT_DATA);
}

#[test]
fn scm_check_examples() {
    let out = bin(&["scm-check", "--example", "confounded"]);
    assert_eq!(code(&out), EXIT_OK);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS") && text.contains("backdoor P(Y|do(x))"));
    assert_eq!(code(&bin(&["scm-check", "--example", "singleton"])), EXIT_OK);
    assert_eq!(code(&bin(&["scm-check", "--example", "negative-control"])), EXIT_OK);
    let out = bin(&["scm-check", "--example", "negative-control", "--graph", "observational"]);
    assert_eq!(code(&out), EXIT_PROPERTY);
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
    assert_eq!(code(&bin(&["scm-check", "--example", "nope"])), EXIT_USAGE);
    assert_eq!(code(&bin(&["scm-check"])), EXIT_USAGE);

    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.scm");
    fs::write(&table, commands::bundled_table("confounded").unwrap().replace("sizes 2 2 2 2", "sizes 2 2 2 3")).unwrap();
    assert_eq!(code(&bin(&["scm-check", table.to_str().unwrap()])), EXIT_DATA);
    assert_eq!(code(&bin(&["scm-check", "/nonexistent.scm"])), EXIT_DATA);
}

#[test]
fn attention_export_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    pipeline(dir.path(), &cfg);
    let (c, o) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    let out = bin(&["export-attention", "--config", c, "--out", o, "--index", "3"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let maps = read_attention(&fs::read(dir.path().join("attention_test_3.bin")).unwrap()).unwrap();
    assert_eq!(maps.shape(), &[4, 8, 8]);
    for k in 0..4 {
        let s: f64 = maps.data()[k * 64..(k + 1) * 64].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let text = fs::read_to_string(dir.path().join("attention_test_3.txt")).unwrap();
    assert!(text.starts_with("classes=4 height=8 width=8 split=test index=3"));
    assert_eq!(text.lines().count(), 1 + 4 * 9);
    assert_eq!(code(&bin(&["export-attention", "--config", c, "--out", o, "--index", "40"])), EXIT_DATA);
    assert!(read_attention(b"nope").is_err());
}

#[test]
fn untrained_checkpoint_scores_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: RunConfig = small_config("").with_out_dir(Some(dir.path().to_path_buf()));
    cfg.data.test_size = 400;
    commands::gen_data(&cfg, &mut Vec::new()).unwrap();
    let model = Model::init(cfg.model.clone(), 5).unwrap();
    let opt = OptimizerState::new(model.params.tensors(), cfg.train.optimizer);
    let path = dir.path().join("untrained.bin");
    Checkpoint::new(model, opt, 0, &cfg).save(&path).unwrap();
    let report = commands::eval(&cfg, Some(&path), Split::Test, &mut Vec::new()).unwrap();
    assert!((report.mean_auc - 0.5).abs() <= 0.1, "{}", report.mean_auc);
}
