//! The subcommands. Each validates its configuration before touching disk
//! and writes human-readable progress to `out`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use causal_cxr::causal::{scm_identities_on, Graph, IdentityReport, ScmTable};
use causal_cxr::metrics::{self, AblationTable, EvalReport, LocalizationReport};
use causal_cxr::numcore::Tensor;
use causal_cxr::synthbench::{generate_dataset, Dataset, Split};
use causal_cxr::train::{self, Progress, TrainOutcome};
use causal_cxr::Error;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Identity deviations above this fail `scm-check`.
pub const SCM_TOLERANCE: f64 = 1e-9;

fn say(out: &mut dyn Write, msg: &str) -> CliResult<()> {
    writeln!(out, "{msg}").map_err(|e| CliError::Core(e.into()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Core(e.into()))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Core(e.into()))
}

pub fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Dataset> {
    cfg.validate()?;
    let dir = cfg.dataset_dir();
    let ds = generate_dataset(&cfg.data, &dir)?;
    for s in &ds.manifest.splits {
        say(out, &format!("{}: {} samples, label counts {:?}", s.split.as_str(), s.count, s.label_counts))?;
    }
    say(out, &format!("rho_train {} rho_test {}", cfg.data.rho_train, cfg.data.rho_test))?;
    say(out, &format!("manifest sha256 {}", ds.manifest_sha256()?))?;
    say(out, &format!("wrote {}", dir.display()))?;
    Ok(ds)
}

/// Opens the run's dataset and checks it matches the configured image size
/// and class count.
fn open_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let ds = Dataset::open(&cfg.dataset_dir())?;
    let spec = ds.spec();
    if spec.image_size != cfg.data.image_size || spec.num_classes != cfg.data.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes at {}px but the run expects {} at {}px",
            spec.num_classes, spec.image_size, cfg.data.num_classes, cfg.data.image_size
        ))
        .into());
    }
    Ok(ds)
}

fn fmt_opt(applied: bool, v: f64) -> String {
    if applied {
        format!("{v:.6}")
    } else {
        "n/a".into()
    }
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let ds = open_dataset(cfg)?;
    let train_set = ds.load_split(Split::Train)?;
    let val_set = ds.load_split(Split::Val)?;
    create_dir(&cfg.out_dir)?;
    say(
        out,
        &format!(
            "training {} epochs on {} samples, alphas ({}, {})",
            cfg.train.epochs,
            train_set.len(),
            cfg.train.alpha1,
            cfg.train.alpha2
        ),
    )?;
    let mut losses = String::from("epoch\tstep\tl_sl\tl_conf\tl_bd\ttotal\n");
    let mut io_err = None;
    let outcome = train::train(&cfg.model, &cfg.train, &train_set, &val_set, |p| match p {
        Progress::Step(s) => {
            let b = &s.breakdown;
            writeln!(
                losses,
                "{}\t{}\t{:.6}\t{}\t{}\t{:.6}",
                s.epoch,
                s.step,
                b.l_sl,
                fmt_opt(s.conf_applied, b.l_conf),
                fmt_opt(s.bd_applied, b.l_bd),
                b.total
            )
            .unwrap();
        }
        Progress::Epoch { epoch, evals } => {
            let line = format!(
                "epoch {epoch:>3}  val auc causal {:.4}  confounding {:.4}  intervened {:.4}  loss {:.4}",
                evals[0].mean_auc, evals[1].mean_auc, evals[2].mean_auc, evals[0].total
            );
            if let Err(e) = writeln!(out, "{line}") {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::Core(e.into()));
    }
    if cfg.train.alpha1 == 0.0 && cfg.train.alpha2 == 0.0 {
        say(out, "baseline run: l_conf and l_bd not applied")?;
    }
    let ckpt = Checkpoint::new(outcome.best.clone(), outcome.best_optimizer.clone(), outcome.best_epoch, cfg);
    ckpt.save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    write_file(&cfg.out_dir.join("losses.tsv"), losses)?;
    write_file(&cfg.out_dir.join("trajectory.tsv"), outcome.trajectory.to_table())?;
    write_file(&cfg.out_dir.join("trajectory.kv"), outcome.trajectory.to_key_values())?;
    say(
        out,
        &format!(
            "best epoch {} (val causal mean auc {:.4}); loss identity max residual {:e}",
            outcome.best_epoch,
            outcome.best_val_auc,
            outcome.max_identity_residual()
        ),
    )?;
    say(out, &format!("wrote {}", cfg.out_dir.display()))?;
    Ok(outcome)
}

fn checkpoint_path(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, out: &mut dyn Write) -> CliResult<EvalReport> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(&checkpoint_path(cfg, checkpoint), &cfg.model)?;
    let samples = open_dataset(cfg)?.load_split(split)?;
    let scores = train::score_split(&ckpt.model, &samples, cfg.train.alpha1, cfg.train.alpha2)?;
    let report = metrics::evaluate(&scores.causal, &scores.labels, cfg.eval_resamples, cfg.seed)?;
    create_dir(&cfg.out_dir)?;
    let stem = format!("eval_{}", split.as_str());
    write_file(&cfg.out_dir.join(format!("{stem}.tsv")), report.to_table())?;
    write_file(&cfg.out_dir.join(format!("{stem}.kv")), report.to_key_values())?;
    say(out, &format!("{} split, {} samples, checkpoint epoch {}", split.as_str(), samples.len(), ckpt.epoch))?;
    out.write_all(report.to_table().as_bytes()).map_err(|e| CliError::Core(e.into()))?;
    Ok(report)
}

pub fn ablate(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<AblationTable> {
    cfg.validate()?;
    let ds = open_dataset(cfg)?;
    let (tr, va, te) = (ds.load_split(Split::Train)?, ds.load_split(Split::Val)?, ds.load_split(Split::Test)?);
    create_dir(&cfg.out_dir)?;
    let mut io_err = None;
    let table = train::run_ablation(&cfg.model, &cfg.train, &cfg.ablation_seeds, &tr, &va, &te, |row| {
        let auc = match &row.test_auc {
            Ok(a) => format!("{a:.4}"),
            Err(e) => format!("failed: {e}"),
        };
        if let Err(e) = writeln!(out, "variant {} seed {}: test auc {auc}", row.variant.id, row.seed) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::Core(e.into()));
    }
    let text = table.to_table();
    write_file(&cfg.out_dir.join("ablation.tsv"), &text)?;
    out.write_all(text.as_bytes()).map_err(|e| CliError::Core(e.into()))?;
    if !table.ordering_holds() {
        return Err(CliError::PropertyFailed("ablation ordering v4>v2>v1 and v4>v3>v1 does not hold".into()));
    }
    Ok(table)
}

/// Example tables shipped with the binary.
pub const BUNDLED_TABLES: [(&str, &str); 3] = [
    ("confounded", include_str!("../tables/confounded.scm")),
    ("negative-control", include_str!("../tables/negative_control.scm")),
    ("singleton", include_str!("../tables/singleton.scm")),
];

pub fn bundled_table(name: &str) -> CliResult<&'static str> {
    BUNDLED_TABLES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = BUNDLED_TABLES.iter().map(|(n, _)| *n).collect();
            CliError::Usage(format!("no bundled table {name}; available: {}", names.join(", ")))
        })
}

fn fmt_dist(v: &[f64]) -> String {
    v.iter().map(|p| format!("{p:.12}")).collect::<Vec<_>>().join(" ")
}

pub fn render_identity_report(r: &IdentityReport) -> String {
    let mut s = String::new();
    let graph = match r.graph {
        Graph::Mutilated => "mutilated (X set by intervention)",
        Graph::Observational => "observational",
    };
    writeln!(s, "graph: {graph}").unwrap();
    for (x, (b, e)) in r.backdoor.iter().zip(&r.enumerated).enumerate() {
        writeln!(s, "x={x}  backdoor P(Y|do(x)) = [{}]", fmt_dist(b)).unwrap();
        writeln!(s, "x={x}  enumerated P(Y|x)    = [{}]", fmt_dist(e)).unwrap();
    }
    writeln!(s, "(i)   marginal invariance  max |P_b(c) - P(c)|       = {:e}", r.marginal_invariance).unwrap();
    writeln!(s, "(ii)  response invariance  max |P_b(y|x,c) - P(y|x,c)| = {:e}", r.response_invariance).unwrap();
    writeln!(s, "(iii) independence         max |P_b(c|x) - P_b(c)|     = {:e}", r.independence).unwrap();
    s
}

pub fn scm_check(table_text: &str, graph: Graph, out: &mut dyn Write) -> CliResult<IdentityReport> {
    let scm = ScmTable::parse(table_text)?;
    let report = scm_identities_on(&scm, graph)?;
    out.write_all(render_identity_report(&report).as_bytes())
        .map_err(|e| CliError::Core(e.into()))?;
    let dev = report.max_deviation();
    if dev > SCM_TOLERANCE {
        say(out, &format!("FAIL: deviation {dev:e} exceeds {SCM_TOLERANCE:e}"))?;
        return Err(CliError::PropertyFailed(format!("identity deviation {dev:e} exceeds {SCM_TOLERANCE:e}")));
    }
    say(out, "PASS")?;
    Ok(report)
}

/// Attention maps file: magic `CXRA`, version `u32`, classes `u32`, height
/// `u32`, width `u32`, then `C·H·W` little-endian `f64` values, class-major.
pub fn attention_bytes(maps: &Tensor) -> Vec<u8> {
    let mut out = b"CXRA".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    for &d in maps.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in maps.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_attention(bytes: &[u8]) -> CliResult<Tensor> {
    let bad = || CliError::Core(Error::Corruption("not an attention map file".into()));
    if bytes.len() < 20 || &bytes[..4] != b"CXRA" {
        return Err(bad());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = vec![word(1), word(2), word(3)];
    let data: Vec<f64> = bytes[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(shape, data)?)
}

#[derive(Debug, Clone)]
pub struct AttentionExport {
    pub maps: Tensor,
    pub bin_path: PathBuf,
    pub text_path: PathBuf,
    pub localization: LocalizationReport,
}

pub fn export_attention(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
    index: usize,
    out: &mut dyn Write,
) -> CliResult<AttentionExport> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(&checkpoint_path(cfg, checkpoint), &cfg.model)?;
    let samples = open_dataset(cfg)?.load_split(split)?;
    let sample = samples.get(index).ok_or_else(|| {
        Error::Manifest(format!("index {index} out of range for {} split of {}", split.as_str(), samples.len()))
    })?;
    let maps = ckpt.model.attention_maps(&sample.pixels)?;
    let (c, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    create_dir(&cfg.out_dir)?;
    let stem = format!("attention_{}_{index}", split.as_str());
    let bin_path = cfg.out_dir.join(format!("{stem}.bin"));
    let text_path = cfg.out_dir.join(format!("{stem}.txt"));
    write_file(&bin_path, attention_bytes(&maps))?;

    let mut text = format!(
        "classes={c} height={h} width={w} split={} index={index} labels={:?}\n",
        split.as_str(),
        sample.labels
    );
    for k in 0..c {
        writeln!(text, "class {k}").unwrap();
        for r in 0..h {
            let row: Vec<String> = (0..w).map(|x| format!("{:.4}", maps.data()[(k * h + r) * w + x])).collect();
            writeln!(text, "{}", row.join(" ")).unwrap();
        }
    }
    write_file(&text_path, &text)?;
    for &(k, b) in &sample.causal_boxes {
        let hit = metrics::argmax_hit(&maps.data()[k * h * w..(k + 1) * h * w], h, w, sample.size(), &b, &sample.confounder_mask);
        say(
            out,
            &format!(
                "class {k}: argmax cell {:?}, in causal box: {}, on confounder: {}",
                hit.cell, hit.in_box, hit.in_confounder
            ),
        )?;
    }
    let localization = train::localization(&ckpt.model, &samples)?;
    say(
        out,
        &format!(
            "{} split: argmax in causal box {:.3}, on confounder {:.3} over {} positive (image, class) pairs",
            split.as_str(),
            localization.box_rate(),
            localization.confounder_rate(),
            localization.pairs
        ),
    )?;
    say(out, &format!("wrote {} and {}", bin_path.display(), text_path.display()))?;
    Ok(AttentionExport { maps, bin_path, text_path, localization })
}
