//! Mini-batch training with the combined loss, per-epoch validation of the
//! three classifiers and best-checkpoint selection.

use rand::seq::SliceRandom;

use crate::causal::{self, derangement, LossBreakdown};
use crate::error::{Error, Result};
use crate::metrics::{self, record_trajectory, Classifier, ClassifierEval, TrajectoryLog};
use crate::model::{Model, ModelConfig, Prediction};
use crate::numcore::{adam_step, AdamConfig, OptimizerState, Tape};
use crate::rng::{indexed, Stream};
use crate::synthbench::LabeledImage;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            alpha1: 0.5,
            alpha2: 0.5,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        causal::total_loss((0.0, 0.0, 0.0), self.alpha1, self.alpha2)?;
        self.optimizer.validate()
    }
}

/// Loss breakdown of one optimizer step. `conf_applied`/`bd_applied` are
/// false when the term was left out of the graph (zero weight or a batch
/// too small to intervene); the breakdown then carries 0 for that part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub conf_applied: bool,
    pub bd_applied: bool,
}

/// Scores of every classifier over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScores {
    pub causal: Vec<Vec<f64>>,
    pub confounding: Vec<Vec<f64>>,
    pub intervened: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
    pub losses: LossBreakdown,
}

impl SplitScores {
    pub fn scores(&self, c: Classifier) -> &[Vec<f64>] {
        match c {
            Classifier::Causal => &self.causal,
            Classifier::Confounding => &self.confounding,
            Classifier::Intervened => &self.intervened,
        }
    }
}

fn bce(z: &[f64], y: &[u8]) -> f64 {
    let s: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| crate::numcore::kernels::softplus(z) - z * y as f64)
        .sum();
    s / z.len() as f64
}

fn kl_uniform(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mean_logp = z.iter().map(|v| v - lse).sum::<f64>() / z.len() as f64;
    -(z.len() as f64).ln() - mean_logp
}

/// Scores all samples. The intervened classifier pairs sample `i` with the
/// confounding features of sample `(i + 1) mod n`, a fixed derangement, so
/// evaluation is deterministic.
pub fn score_split(model: &Model, samples: &[LabeledImage], alpha1: f64, alpha2: f64) -> Result<SplitScores> {
    let preds: Vec<Prediction> = samples.iter().map(|s| model.predict(&s.pixels)).collect::<Result<_>>()?;
    let n = preds.len();
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    let mut intervened = Vec::with_capacity(n);
    for i in 0..n {
        let j = if n > 1 { (i + 1) % n } else { i };
        intervened.push(model.intervened_logits(&preds[i].h_x, &preds[j].h_c)?);
    }
    let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / n.max(1) as f64;
    let l_sl = mean(&|i| bce(&preds[i].z_x, &labels[i]));
    let l_conf = mean(&|i| kl_uniform(&preds[i].z_c));
    let l_bd = mean(&|i| bce(&intervened[i], &labels[i]));
    let sig = |z: &[f64]| z.iter().map(|&v| crate::numcore::kernels::sigmoid(v)).collect::<Vec<f64>>();
    Ok(SplitScores {
        causal: preds.iter().map(|p| sig(&p.z_x)).collect(),
        confounding: preds.iter().map(|p| sig(&p.z_c)).collect(),
        intervened: intervened.iter().map(|z| sig(z)).collect(),
        labels,
        losses: causal::total_loss((l_sl, l_conf, l_bd), alpha1, alpha2)?,
    })
}

/// Mean AUC of one classifier, 0.5 when no class has a defined AUC.
pub fn classifier_auc(scores: &SplitScores, c: Classifier) -> Result<f64> {
    match metrics::mean_auc(scores.scores(c), &scores.labels) {
        Err(Error::UndefinedAuc { .. }) => Ok(0.5),
        r => r,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the best causal validation mean AUC.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Optimizer state right after the best epoch.
    pub best_optimizer: OptimizerState,
    pub last: Model,
    pub optimizer: OptimizerState,
    pub trajectory: TrajectoryLog,
    pub steps: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn max_identity_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.breakdown.identity_residual()).fold(0.0, f64::max)
    }
}

/// Progress events emitted while training.
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    Step(&'a StepLog),
    Epoch { epoch: usize, evals: &'a [ClassifierEval] },
}

/// One optimizer step on `batch`; returns its loss breakdown.
fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[&LabeledImage],
    cfg: &TrainConfig,
    strata_rng: &mut impl rand::Rng,
) -> Result<(LossBreakdown, bool, bool)> {
    let form = model.config.loss_form;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut sl = Vec::with_capacity(batch.len());
    let mut conf = Vec::with_capacity(batch.len());
    let mut outs = Vec::with_capacity(batch.len());
    let labels: Vec<Vec<f64>> = batch.iter().map(|s| s.labels_f64()).collect();
    for (s, y) in batch.iter().zip(&labels) {
        let f = model.forward(&mut tape, &p, &s.pixels)?;
        sl.push(causal::loss_sl(&mut tape, f.heads.z_x, y, form)?);
        if cfg.alpha1 > 0.0 {
            conf.push(causal::loss_conf(&mut tape, f.heads.z_c)?);
        }
        outs.push(f.heads);
    }
    let l_sl = causal::mean_of(&mut tape, &sl)?;
    let l_conf = if conf.is_empty() { None } else { Some(causal::mean_of(&mut tape, &conf)?) };
    let l_bd = if cfg.alpha2 > 0.0 && batch.len() >= 2 {
        let perm = derangement(batch.len(), strata_rng)?;
        let mut z_hat = Vec::with_capacity(batch.len());
        for (i, &j) in perm.iter().enumerate() {
            z_hat.push(causal::intervene(&mut tape, outs[i].h_x, outs[j].h_c, &p)?);
        }
        let ys: Vec<&[f64]> = labels.iter().map(Vec::as_slice).collect();
        Some(causal::loss_bd(&mut tape, &z_hat, &ys, form)?)
    } else {
        None
    };
    let total = causal::total_loss_var(&mut tape, l_sl, l_conf, l_bd, cfg.alpha1, cfg.alpha2)?;
    let val = |v: Option<crate::numcore::Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
    let parts = (val(Some(l_sl)), val(l_conf), val(l_bd));
    let total_value = tape.value(total).data()[0];
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total_value} (parts {parts:?})")));
    }
    let mut breakdown = causal::total_loss(parts, cfg.alpha1, cfg.alpha2)?;
    breakdown.total = total_value;
    tape.backward(total)?;
    let grads = p.grads(&tape);
    drop(p);
    adam_step(model.params.tensors_mut(), &grads, opt)?;
    Ok((breakdown, l_conf.is_some(), l_bd.is_some()))
}

/// Tolerance of the per-step check `total = l_sl + α1·l_conf + α2·l_bd`.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    mut progress: impl FnMut(Progress),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(model.params.tensors(), cfg.optimizer);
    let mut trajectory = TrajectoryLog::default();
    let mut steps = Vec::new();
    let mut best: Option<(Model, OptimizerState, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut indexed(cfg.seed, Stream::Shuffle, epoch as u32));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut strata_rng = indexed(cfg.seed, Stream::Strata, step as u32);
            let (breakdown, conf_applied, bd_applied) = train_step(&mut model, &mut opt, &batch, cfg, &mut strata_rng)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
                    e => e,
                })?;
            if breakdown.identity_residual() > IDENTITY_TOLERANCE {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, step {step}: loss breakdown off by {:e}",
                    breakdown.identity_residual()
                )));
            }
            let log = StepLog { epoch, step, breakdown, conf_applied, bd_applied };
            progress(Progress::Step(&log));
            steps.push(log);
            step += 1;
        }
        let scores = score_split(&model, val_set, cfg.alpha1, cfg.alpha2)?;
        let evals: Vec<ClassifierEval> = Classifier::ALL
            .iter()
            .map(|&c| {
                Ok(ClassifierEval {
                    classifier: c,
                    mean_auc: classifier_auc(&scores, c)?,
                    l_sl: scores.losses.l_sl,
                    l_conf: scores.losses.l_conf,
                    l_bd: scores.losses.l_bd,
                    total: scores.losses.total,
                })
            })
            .collect::<Result<_>>()?;
        record_trajectory(&mut trajectory, epoch, &evals)?;
        progress(Progress::Epoch { epoch, evals: &evals });
        let auc = evals[0].mean_auc;
        if best.as_ref().map_or(true, |b| auc > b.3) {
            best = Some((model.clone(), opt.clone(), epoch, auc));
        }
    }
    let (best, best_optimizer, best_epoch, best_val_auc) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_auc,
        best_optimizer,
        last: model,
        optimizer: opt,
        trajectory,
        steps,
    })
}

/// Attention-argmax localization of `model` over every positive
/// (image, class) pair of `samples`, using each class's own map and box.
pub fn localization(model: &Model, samples: &[LabeledImage]) -> Result<metrics::LocalizationReport> {
    let mut report = metrics::LocalizationReport::default();
    for s in samples {
        if !s.labels.contains(&1) {
            continue;
        }
        let maps = model.attention_maps(&s.pixels)?;
        let (h, w) = (maps.shape()[1], maps.shape()[2]);
        for &(k, b) in &s.causal_boxes {
            let map = &maps.data()[k * h * w..(k + 1) * h * w];
            report.add(metrics::argmax_hit(map, h, w, s.size(), &b, &s.confounder_mask));
        }
    }
    Ok(report)
}

/// Trains the four feature-learning / causal-loss variants for each seed and
/// scores the causal classifier of each best checkpoint on `test_set`.
/// A variant whose training fails is recorded with its error and the rest
/// continue.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    test_set: &[LabeledImage],
    mut on_row: impl FnMut(&metrics::AblationRow),
) -> Result<metrics::AblationTable> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for v in metrics::ABLATION_VARIANTS {
            let mut mc = model_cfg.clone();
            mc.backbone.attention = v.attention;
            let mut tc = cfg.clone();
            tc.seed = seed;
            if !v.causal_losses {
                tc.alpha1 = 0.0;
                tc.alpha2 = 0.0;
            }
            let test_auc = train(&mc, &tc, train_set, val_set, |_| {})
                .and_then(|out| score_split(&out.best, test_set, tc.alpha1, tc.alpha2))
                .and_then(|s| classifier_auc(&s, Classifier::Causal))
                .map_err(|e| e.to_string());
            let row = metrics::AblationRow { variant: v, seed, test_auc };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(metrics::AblationTable { rows })
}
