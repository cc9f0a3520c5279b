//! ROC AUC, percentile bootstrap intervals and per-epoch trajectories.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{indexed, Stream};

/// Rank-based AUC (Mann-Whitney U / (n₊·n₋)) with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "roc_auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Label(format!("roc_auc label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("roc_auc received a NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc { positives: pos, negatives: neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const CI_METHOD: &str = "percentile bootstrap, 2.5/97.5";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Resamples dropped because they contained a single class.
    pub skipped: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between closest ranks.
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over samples. Resample `r` draws its indices from
/// `rng::indexed(seed, Bootstrap, r)`, so results do not depend on order.
pub fn bootstrap_ci(scores: &[f64], labels: &[u8], n_resamples: usize, seed: u64) -> Result<Interval> {
    bootstrap_with(scores.len(), n_resamples, seed, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        roc_auc(&s, &l).map(Some).or_else(|e| match e {
            Error::UndefinedAuc { .. } => Ok(None),
            e => Err(e),
        })
    })
    .and_then(|r| {
        roc_auc(scores, labels)?;
        Ok(r)
    })
}

/// Bootstrap of an arbitrary statistic of a resample; `None` skips it.
fn bootstrap_with<F>(n: usize, n_resamples: usize, seed: u64, mut stat: F) -> Result<Interval>
where
    F: FnMut(&[usize]) -> Result<Option<f64>>,
{
    if n_resamples < 100 {
        return Err(Error::Config(format!("bootstrap needs at least 100 resamples, got {n_resamples}")));
    }
    if n == 0 {
        return Err(Error::Config("bootstrap over zero samples".into()));
    }
    let mut values = Vec::with_capacity(n_resamples);
    let mut skipped = 0;
    let mut idx = vec![0usize; n];
    for r in 0..n_resamples {
        let mut rng = indexed(seed, Stream::Bootstrap, r as u32);
        for v in idx.iter_mut() {
            *v = rng.gen_range(0..n);
        }
        match stat(&idx)? {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    if values.is_empty() {
        return Err(Error::Numeric("every bootstrap resample was degenerate".into()));
    }
    values.sort_by(f64::total_cmp);
    Ok(Interval {
        low: percentile(&values, 0.025),
        high: percentile(&values, 0.975),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAuc {
    pub auc: f64,
    pub ci: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` where the class has a single label value in the split.
    pub per_class: Vec<Option<ClassAuc>>,
    pub mean_auc: f64,
    pub mean_ci: Interval,
    pub excluded: usize,
    pub n_samples: usize,
    pub n_resamples: usize,
    pub seed: u64,
}

fn mean_auc_of(scores: &[Vec<f64>], labels: &[Vec<u8>], idx: Option<&[usize]>) -> Result<Option<f64>> {
    let c = labels.first().map_or(0, Vec::len);
    let mut sum = 0.0;
    let mut defined = 0;
    for k in 0..c {
        let (s, l): (Vec<f64>, Vec<u8>) = match idx {
            Some(idx) => idx.iter().map(|&i| (scores[i][k], labels[i][k])).unzip(),
            None => scores.iter().zip(labels).map(|(s, l)| (s[k], l[k])).unzip(),
        };
        match roc_auc(&s, &l) {
            Ok(a) => {
                sum += a;
                defined += 1;
            }
            Err(Error::UndefinedAuc { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((defined > 0).then(|| sum / defined as f64))
}

/// Mean AUC over the classes whose AUC is defined.
pub fn mean_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64> {
    mean_auc_of(scores, labels, None)?.ok_or(Error::UndefinedAuc { positives: 0, negatives: 0 })
}

/// Per-class and mean AUC with bootstrap intervals; rows of `scores` and
/// `labels` are samples.
pub fn evaluate(scores: &[Vec<f64>], labels: &[Vec<u8>], n_resamples: usize, seed: u64) -> Result<EvalReport> {
    if scores.len() != labels.len() || scores.iter().zip(labels).any(|(s, l)| s.len() != l.len()) {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: vec![scores.len(), scores.first().map_or(0, Vec::len)],
            rhs: vec![labels.len(), labels.first().map_or(0, Vec::len)],
        });
    }
    let c = labels.first().map_or(0, Vec::len);
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[k]).collect();
        per_class.push(match roc_auc(&s, &l) {
            Ok(auc) => Some(ClassAuc { auc, ci: bootstrap_ci(&s, &l, n_resamples, seed)? }),
            Err(Error::UndefinedAuc { .. }) => None,
            Err(e) => return Err(e),
        });
    }
    let mean = mean_auc(scores, labels)?;
    let mean_ci = bootstrap_with(scores.len(), n_resamples, seed, |idx| mean_auc_of(scores, labels, Some(idx)))?;
    Ok(EvalReport {
        excluded: per_class.iter().filter(|c| c.is_none()).count(),
        per_class,
        mean_auc: mean,
        mean_ci,
        n_samples: scores.len(),
        n_resamples,
        seed,
    })
}

impl EvalReport {
    /// Tab-separated table: `class auc ci_low ci_high skipped`, then `mean`.
    pub fn to_table(&self) -> String {
        let mut out = format!("# ci: {CI_METHOD}, {} resamples, seed {}\n", self.n_resamples, self.seed);
        out.push_str("class\tauc\tci_low\tci_high\tskipped\n");
        for (k, c) in self.per_class.iter().enumerate() {
            match c {
                Some(c) => writeln!(out, "{k}\t{:.6}\t{:.6}\t{:.6}\t{}", c.auc, c.ci.low, c.ci.high, c.ci.skipped),
                None => writeln!(out, "{k}\tundefined\t-\t-\t-"),
            }
            .unwrap();
        }
        writeln!(
            out,
            "mean\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.mean_auc, self.mean_ci.low, self.mean_ci.high, self.mean_ci.skipped
        )
        .unwrap();
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "ci_method={CI_METHOD}").unwrap();
        writeln!(out, "n_samples={}", self.n_samples).unwrap();
        writeln!(out, "n_resamples={}", self.n_resamples).unwrap();
        writeln!(out, "seed={}", self.seed).unwrap();
        writeln!(out, "excluded_classes={}", self.excluded).unwrap();
        for (k, c) in self.per_class.iter().enumerate() {
            if let Some(c) = c {
                writeln!(out, "class.{k}.auc={}", c.auc).unwrap();
                writeln!(out, "class.{k}.ci_low={}", c.ci.low).unwrap();
                writeln!(out, "class.{k}.ci_high={}", c.ci.high).unwrap();
            } else {
                writeln!(out, "class.{k}.auc=undefined").unwrap();
            }
        }
        writeln!(out, "mean.auc={}", self.mean_auc).unwrap();
        writeln!(out, "mean.ci_low={}", self.mean_ci.low).unwrap();
        writeln!(out, "mean.ci_high={}", self.mean_ci.high).unwrap();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classifier {
    Causal,
    Confounding,
    Intervened,
}

impl Classifier {
    pub const ALL: [Classifier; 3] = [Classifier::Causal, Classifier::Confounding, Classifier::Intervened];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Causal => "causal",
            Self::Confounding => "confounding",
            Self::Intervened => "intervened",
        }
    }
}

/// Validation result of one classifier at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierEval {
    pub classifier: Classifier,
    pub mean_auc: f64,
    pub l_sl: f64,
    pub l_conf: f64,
    pub l_bd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub epoch: usize,
    pub eval: ClassifierEval,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<TrajectoryRecord>,
}

pub fn record_trajectory(log: &mut TrajectoryLog, epoch: usize, evals: &[ClassifierEval]) -> Result<()> {
    if let Some(last) = log.records.last() {
        if epoch <= last.epoch {
            return Err(Error::Log(format!("epoch {epoch} after epoch {}", last.epoch)));
        }
    }
    for c in Classifier::ALL {
        let n = evals.iter().filter(|e| e.classifier == c).count();
        if n != 1 {
            return Err(Error::Log(format!("epoch {epoch}: {n} evaluations for the {} classifier", c.as_str())));
        }
    }
    for c in Classifier::ALL {
        let eval = *evals.iter().find(|e| e.classifier == c).unwrap();
        log.records.push(TrajectoryRecord { epoch, eval });
    }
    Ok(())
}

impl TrajectoryLog {
    /// Validation mean AUC per epoch for one classifier.
    pub fn series(&self, classifier: Classifier) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.eval.classifier == classifier)
            .map(|r| (r.epoch, r.eval.mean_auc))
            .collect()
    }

    /// Columns: `epoch classifier mean_auc l_sl l_conf l_bd total`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("epoch\tclassifier\tmean_auc\tl_sl\tl_conf\tl_bd\ttotal\n");
        for r in &self.records {
            let e = &r.eval;
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch,
                e.classifier.as_str(),
                e.mean_auc,
                e.l_sl,
                e.l_conf,
                e.l_bd,
                e.total
            )
            .unwrap();
        }
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let e = &r.eval;
            let p = format!("epoch.{}.{}", r.epoch, e.classifier.as_str());
            writeln!(out, "{p}.mean_auc={}", e.mean_auc).unwrap();
            writeln!(out, "{p}.l_sl={}", e.l_sl).unwrap();
            writeln!(out, "{p}.l_conf={}", e.l_conf).unwrap();
            writeln!(out, "{p}.l_bd={}", e.l_bd).unwrap();
            writeln!(out, "{p}.total={}", e.total).unwrap();
        }
        out
    }
}

/// Rise-then-fall check on a validation AUC series: the peak is strictly
/// before the last epoch, the last value is at least `min_drop` below it and
/// within `chance_tol` of 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryShape {
    pub peak_epoch: usize,
    pub peak: f64,
    pub last_epoch: usize,
    pub last: f64,
}

impl TrajectoryShape {
    pub fn of(series: &[(usize, f64)]) -> Option<Self> {
        let &(last_epoch, last) = series.last()?;
        let &(peak_epoch, peak) = series
            .iter()
            .fold(None, |best: Option<&(usize, f64)>, x| match best {
                Some(b) if b.1 >= x.1 => Some(b),
                _ => Some(x),
            })?;
        Some(Self { peak_epoch, peak, last_epoch, last })
    }

    pub fn rises_then_falls(&self, min_drop: f64, chance_tol: f64) -> bool {
        self.peak_epoch < self.last_epoch && self.last <= self.peak - min_drop && (self.last - 0.5).abs() <= chance_tol
    }
}

/// Mean AUCs reported for the full-scale chest X-ray experiment, in variant
/// order. These are not reproducible at synthetic scale.
pub const REFERENCE_ABLATION_AUC: [f64; 4] = [0.812, 0.833, 0.824, 0.857];

/// One ablation cell: feature-learning attention on/off and causal losses on/off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub id: usize,
    pub attention: bool,
    pub causal_losses: bool,
}

pub const ABLATION_VARIANTS: [AblationVariant; 4] = [
    AblationVariant { id: 1, attention: false, causal_losses: false },
    AblationVariant { id: 2, attention: false, causal_losses: true },
    AblationVariant { id: 3, attention: true, causal_losses: false },
    AblationVariant { id: 4, attention: true, causal_losses: true },
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    /// `Err` holds the message of a training failure.
    pub test_auc: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean test AUC per variant over seeds that trained successfully.
    pub fn variant_means(&self) -> [Option<f64>; 4] {
        let mut out = [None; 4];
        for (slot, v) in out.iter_mut().zip(ABLATION_VARIANTS) {
            let ok: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.variant == v)
                .filter_map(|r| r.test_auc.as_ref().ok().copied())
                .collect();
            if !ok.is_empty() {
                *slot = Some(ok.iter().sum::<f64>() / ok.len() as f64);
            }
        }
        out
    }

    /// `v4 > v2 > v1` and `v4 > v3 > v1` on variant means.
    pub fn ordering_holds(&self) -> bool {
        match self.variant_means() {
            [Some(v1), Some(v2), Some(v3), Some(v4)] => v4 > v2 && v2 > v1 && v4 > v3 && v3 > v1,
            _ => false,
        }
    }

    pub fn to_table(&self) -> String {
        let sign = |b: bool| if b { "+" } else { "-" };
        let mut out = String::from("variant\tattention\tcausal\tseed\ttest_auc\treference_auc\n");
        for r in &self.rows {
            let auc = match &r.test_auc {
                Ok(a) => format!("{a:.6}"),
                Err(e) => format!("failed: {e}"),
            };
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.3}",
                r.variant.id,
                sign(r.variant.attention),
                sign(r.variant.causal_losses),
                r.seed,
                auc,
                REFERENCE_ABLATION_AUC[r.variant.id - 1]
            )
            .unwrap();
        }
        for (v, m) in ABLATION_VARIANTS.iter().zip(self.variant_means()) {
            let auc = m.map_or("failed".to_string(), |m| format!("{m:.6}"));
            writeln!(
                out,
                "{}\t{}\t{}\tmean\t{}\t{:.3}",
                v.id,
                sign(v.attention),
                sign(v.causal_losses),
                auc,
                REFERENCE_ABLATION_AUC[v.id - 1]
            )
            .unwrap();
        }
        writeln!(
            out,
            "# ordering v4>v2>v1 and v4>v3>v1: {}",
            if self.ordering_holds() { "pass" } else { "fail" }
        )
        .unwrap();
        out
    }
}

/// Where the argmax of one class attention map lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArgmaxHit {
    pub cell: (usize, usize),
    /// The cell's pixel footprint overlaps the class box.
    pub in_box: bool,
    /// The cell's pixel footprint contains an artifact pixel.
    pub in_confounder: bool,
}

/// Locates the argmax of a `[h, w]` attention map over a `size × size` image.
/// Cell `(r, c)` covers pixel rows `r·size/h .. (r+1)·size/h` and the
/// matching column range.
pub fn argmax_hit(map: &[f64], h: usize, w: usize, size: usize, target: &crate::synthbench::BBox, mask: &[bool]) -> ArgmaxHit {
    let best = map
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > map[b] { i } else { b });
    let (r, c) = (best / w, best % w);
    let cell = crate::synthbench::BBox {
        x0: c * size / w,
        y0: r * size / h,
        x1: (c + 1) * size / w,
        y1: (r + 1) * size / h,
    };
    let in_confounder = (cell.y0..cell.y1).any(|y| (cell.x0..cell.x1).any(|x| mask[y * size + x]));
    ArgmaxHit { cell: (r, c), in_box: cell.intersects(target, 0), in_confounder }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalizationReport {
    /// Positive (image, class) pairs examined.
    pub pairs: usize,
    pub in_box: usize,
    pub in_confounder: usize,
}

impl LocalizationReport {
    pub fn add(&mut self, hit: ArgmaxHit) {
        self.pairs += 1;
        self.in_box += usize::from(hit.in_box);
        self.in_confounder += usize::from(hit.in_confounder);
    }

    pub fn box_rate(&self) -> f64 {
        self.in_box as f64 / self.pairs.max(1) as f64
    }

    pub fn confounder_rate(&self) -> f64 {
        self.in_confounder as f64 / self.pairs.max(1) as f64
    }
}
