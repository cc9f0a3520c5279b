#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use causal_cxr_cli::config::RunConfig;

/// A configuration small enough to generate, train and evaluate in about a second.
pub const SMALL: &str = "\
data.image_size = 32
data.train_size = 48
data.val_size = 24
data.test_size = 40
model.stage_channels = 8,16
model.stage_kernels = 4,4
model.hidden_dim = 16
model.branch_channels = 8
model.key_dim = 4
model.gate_bottleneck = 4
model.feature_dim = 8
train.epochs = 2
train.batch_size = 8
eval.resamples = 100
";

pub fn small_config(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{SMALL}{extra}")).unwrap()
}

pub fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

pub fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causal-cxr"))
        .args(args)
        .env_remove("CAUSAL_CXR_OUT")
        .output()
        .unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}
