//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`RunConfig::documented_defaults`]); unknown or repeated keys
//! are rejected with their line number. The only environment override is
//! `CAUSAL_CXR_OUT`, which replaces `out_dir`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use causal_cxr::backbone::BackboneConfig;
use causal_cxr::causal::LossForm;
use causal_cxr::decoder::{ComplementMode, DecoderConfig};
use causal_cxr::metrics::DEFAULT_RESAMPLES;
use causal_cxr::model::ModelConfig;
use causal_cxr::numcore::AdamConfig;
use causal_cxr::synthbench::BenchmarkSpec;
use causal_cxr::train::TrainConfig;
use causal_cxr::{Error, Result};

pub const OUT_DIR_ENV: &str = "CAUSAL_CXR_OUT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/data`.
    pub dataset_dir: Option<PathBuf>,
    pub data: BenchmarkSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_resamples: usize,
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset_dir: None,
            data: BenchmarkSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_resamples: DEFAULT_RESAMPLES,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

/// Key, meaning. Defaults come from [`RunConfig::default`].
const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed for data, init, strata, shuffling and bootstrap"),
    ("out_dir", "output directory (env CAUSAL_CXR_OUT overrides)"),
    ("dataset_dir", "dataset directory; empty means <out_dir>/data"),
    ("data.image_size", "image side in pixels"),
    ("data.num_classes", "number of labels C"),
    ("data.train_size", "training samples"),
    ("data.val_size", "validation samples"),
    ("data.test_size", "test samples"),
    ("data.rho_train", "artifact-label coupling on train and val"),
    ("data.rho_test", "artifact-label coupling on test"),
    ("data.class_frequencies", "per-class positive rates, comma separated"),
    ("data.cooccurrence", "CxC matrix, rows separated by ';'"),
    ("data.confounders", "kind:class list (glyph, border_crop, device) or none"),
    ("data.noise_level", "std of additive Gaussian pixel noise"),
    ("data.pattern_contrast", "class pattern intensity above background"),
    ("model.stage_channels", "output channels of each stride-2 stage"),
    ("model.stage_kernels", "even kernel size of each stage"),
    ("model.hidden_dim", "feature width d"),
    ("model.attention", "channel and position attention paths on/off"),
    ("model.branch_kernels", "odd kernels of the two attention paths"),
    ("model.branch_channels", "width of each attention path"),
    ("model.gate_bottleneck", "channel gate bottleneck width"),
    ("model.key_dim", "position attention key width"),
    ("model.attention_budget", "largest feature grid (h*w) for position attention"),
    ("model.decoder_layers", "cross-attention decoder layers"),
    ("model.complement_mode", "verbatim or renormalized complement weights"),
    ("model.feature_dim", "head feature width d'"),
    ("model.loss_form", "multilabel or categorical"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "samples per optimizer step"),
    ("train.alpha1", "weight of the confounding loss"),
    ("train.alpha2", "weight of the backdoor loss"),
    ("train.learning_rate", "Adam learning rate"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.epsilon", "Adam epsilon"),
    ("train.warmup_steps", "linear warmup steps, 0 for none"),
    ("eval.resamples", "bootstrap resamples for confidence intervals"),
    ("ablation.seeds", "seeds of the ablation grid, comma separated"),
];

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|t| parse(key, t.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(key, v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key}: expected two values, got {v:?}"))),
    }
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("line {}: key {k} set twice", n + 1)));
            }
            cfg.set(k, v).map_err(|e| {
                let msg = match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                };
                Error::Config(format!("line {}: {msg}", n + 1))
            })?;
            seen.push(k.to_string());
        }
        cfg.sync();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let b = &mut self.model.backbone;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "dataset_dir" => self.dataset_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "model.stage_channels" => b.stage_channels = parse_list(key, v)?,
            "model.stage_kernels" => b.stage_kernels = parse_list(key, v)?,
            "model.hidden_dim" => b.hidden_dim = parse(key, v)?,
            "model.attention" => b.attention = parse_bool(key, v)?,
            "model.branch_kernels" => b.branch_kernels = pair(key, v)?,
            "model.branch_channels" => b.branch_channels = parse(key, v)?,
            "model.gate_bottleneck" => b.gate_bottleneck = parse(key, v)?,
            "model.key_dim" => b.key_dim = parse(key, v)?,
            "model.attention_budget" => b.attention_budget = parse(key, v)?,
            "model.decoder_layers" => self.model.decoder.num_layers = parse(key, v)?,
            "model.complement_mode" => self.model.decoder.complement_mode = ComplementMode::parse(v)?,
            "model.feature_dim" => self.model.feature_dim = parse(key, v)?,
            "model.loss_form" => self.model.loss_form = LossForm::parse(v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.alpha1" => t.alpha1 = parse(key, v)?,
            "train.alpha2" => t.alpha2 = parse(key, v)?,
            "train.learning_rate" => t.optimizer.learning_rate = parse(key, v)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "train.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "train.epsilon" => t.optimizer.epsilon = parse(key, v)?,
            "train.warmup_steps" => t.optimizer.warmup_steps = parse(key, v)?,
            "eval.resamples" => self.eval_resamples = parse(key, v)?,
            "ablation.seeds" => self.ablation_seeds = parse_list(key, v)?,
            _ => {
                let owned = match key.strip_prefix("data.") {
                    Some(k) if k != "seed" => self.data.set(k, v).map_err(|e| Error::Config(e.to_string()))?,
                    _ => false,
                };
                if !owned {
                    return Err(Error::Config(format!("unknown key {key}")));
                }
            }
        }
        self.sync();
        Ok(())
    }

    /// Propagates shared values (seed, sizes, width) into the sub-configs.
    fn sync(&mut self) {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        let s = self.data.image_size;
        self.model.backbone.input_size = (s, s);
        self.model.decoder.num_classes = self.data.num_classes;
        self.model.decoder.hidden_dim = self.model.backbone.hidden_dim;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync();
        self
    }

    /// Applies `--out` and then the environment override.
    pub fn with_out_dir(mut self, flag: Option<PathBuf>) -> Self {
        if let Some(p) = flag {
            self.out_dir = p;
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|p| !p.is_empty()) {
            self.out_dir = PathBuf::from(p);
        }
        self
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval_resamples < 100 {
            return Err(Error::Config(format!("eval.resamples must be at least 100, got {}", self.eval_resamples)));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation.seeds is empty".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let o: &AdamConfig = &t.optimizer;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
            (
                "dataset_dir".into(),
                self.dataset_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
        ];
        out.extend(
            self.data
                .to_pairs()
                .into_iter()
                .filter(|(k, _)| *k != "seed")
                .map(|(k, v)| (format!("data.{k}"), v)),
        );
        out.extend(self.architecture_pairs().into_iter().filter(|(k, _)| k.starts_with("model.")));
        out.extend([
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.alpha1".into(), t.alpha1.to_string()),
            ("train.alpha2".into(), t.alpha2.to_string()),
            ("train.learning_rate".into(), o.learning_rate.to_string()),
            ("train.weight_decay".into(), o.weight_decay.to_string()),
            ("train.beta1".into(), o.beta1.to_string()),
            ("train.beta2".into(), o.beta2.to_string()),
            ("train.epsilon".into(), o.epsilon.to_string()),
            ("train.warmup_steps".into(), o.warmup_steps.to_string()),
            ("eval.resamples".into(), self.eval_resamples.to_string()),
            ("ablation.seeds".into(), list(&self.ablation_seeds)),
        ]);
        debug_assert_eq!(out.len(), KEY_DOCS.len());
        out
    }

    /// Keys that fix parameter shapes; a checkpoint only loads into a run
    /// whose values match.
    pub fn architecture_pairs(&self) -> Vec<(String, String)> {
        architecture_pairs(&self.model)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((k, v), (_, doc)) in self.to_pairs().iter().zip(KEY_DOCS) {
            writeln!(out, "# {doc}\n{k} = {v}").unwrap();
        }
        out
    }

    /// Default config file with one comment line per key.
    pub fn documented_defaults() -> String {
        Self::default().to_text()
    }
}

pub fn architecture_pairs(m: &ModelConfig) -> Vec<(String, String)> {
    let b: &BackboneConfig = &m.backbone;
    let d: &DecoderConfig = &m.decoder;
    vec![
        ("data.image_size".into(), b.input_size.0.to_string()),
        ("data.num_classes".into(), d.num_classes.to_string()),
        ("model.stage_channels".into(), list(&b.stage_channels)),
        ("model.stage_kernels".into(), list(&b.stage_kernels)),
        ("model.hidden_dim".into(), b.hidden_dim.to_string()),
        ("model.attention".into(), b.attention.to_string()),
        ("model.branch_kernels".into(), format!("{},{}", b.branch_kernels.0, b.branch_kernels.1)),
        ("model.branch_channels".into(), b.branch_channels.to_string()),
        ("model.gate_bottleneck".into(), b.gate_bottleneck.to_string()),
        ("model.key_dim".into(), b.key_dim.to_string()),
        ("model.attention_budget".into(), b.attention_budget.to_string()),
        ("model.decoder_layers".into(), d.num_layers.to_string()),
        ("model.complement_mode".into(), d.complement_mode.as_str().into()),
        ("model.feature_dim".into(), m.feature_dim.to_string()),
        ("model.loss_form".into(), m.loss_form.as_str().into()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn every_key_is_documented() {
        let keys: Vec<String> = RunConfig::default().to_pairs().into_iter().map(|(k, _)| k).collect();
        let docs: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, docs);
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        let e = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("data.seed = 3\n").is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let cfg = RunConfig::parse("seed = 9\ndata.image_size = 32\nmodel.stage_channels = 8,16,32\nmodel.hidden_dim = 32\n").unwrap();
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.model.backbone.input_size, (32, 32));
        assert_eq!(cfg.model.decoder.hidden_dim, 32);
    }
}
