//! Dual heads, the three training losses and the backdoor intervention.

mod scm;

pub use scm::{
    backdoor_adjust, observational_independence_gap, scm_identities, scm_identities_on, Graph, IdentityReport, ScmTable,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::fan_in_uniform;
use crate::decoder::QueryState;
use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamStore, Tape, Tensor, Var};

/// Which cross-entropy form the supervised and backdoor losses use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    /// Per-class sigmoid binary cross-entropy, averaged over classes.
    MultiLabel,
    /// Softmax cross-entropy `-Σ y·log softmax(z)` for single-label tasks.
    Categorical,
}

impl LossForm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MultiLabel => "multilabel",
            Self::Categorical => "categorical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multilabel" => Ok(Self::MultiLabel),
            "categorical" => Ok(Self::Categorical),
            other => Err(Error::Config(format!("unknown loss form {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadsConfig {
    pub num_classes: usize,
    pub hidden_dim: usize,
    /// Width `d'` of `h_x` and `h_c`.
    pub feature_dim: usize,
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config(format!("heads need positive sizes, got {self:?}")));
        }
        Ok(())
    }
}

pub const CAUSAL_MLP: &str = "heads.causal_mlp";
pub const CONF_MLP: &str = "heads.conf_mlp";
pub const CAUSAL_CLS: &str = "cls.causal";
pub const CONF_CLS: &str = "cls.conf";
pub const INTERV_CLS: &str = "cls.interv";

/// Two point-wise MLPs with separate weights and three per-class linear
/// classifiers (causal, confounding, intervened).
pub fn init_params(cfg: &HeadsConfig, store: &mut ParamStore, rng: &mut impl rand::Rng) -> Result<()> {
    cfg.validate()?;
    let (c, d, dp) = (cfg.num_classes, cfg.hidden_dim, cfg.feature_dim);
    for mlp in [CAUSAL_MLP, CONF_MLP] {
        store.insert(format!("{mlp}.w1"), fan_in_uniform(&[d, d], d, 6.0, rng))?;
        store.insert(format!("{mlp}.b1"), Tensor::zeros(&[d]))?;
        store.insert(format!("{mlp}.w2"), fan_in_uniform(&[d, dp], d, 3.0, rng))?;
        store.insert(format!("{mlp}.b2"), Tensor::zeros(&[dp]))?;
    }
    for cls in [CAUSAL_CLS, CONF_CLS, INTERV_CLS] {
        store.insert(format!("{cls}.w"), fan_in_uniform(&[c, dp], dp, 3.0, rng))?;
        store.insert(format!("{cls}.b"), Tensor::zeros(&[c]))?;
    }
    Ok(())
}

/// `relu(Q·W1 + b1)·W2 + b2`, applied to each class query independently.
pub fn mlp(tape: &mut Tape, q: Var, p: &Bound, name: &str) -> Result<Var> {
    let h = tape.matmul(q, p.var(&format!("{name}.w1"))?)?;
    let h = tape.add_row_bias(h, p.var(&format!("{name}.b1"))?)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, p.var(&format!("{name}.w2"))?)?;
    tape.add_row_bias(h, p.var(&format!("{name}.b2"))?)
}

/// Per-class readout `z[k] = Σ_j W[k,j]·h[k,j] + b[k]`.
pub fn classify(tape: &mut Tape, h: Var, p: &Bound, name: &str) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    if tape.shape(h) != tape.shape(w) {
        return Err(Error::Dimension {
            op: "classify",
            lhs: tape.shape(h).to_vec(),
            rhs: tape.shape(w).to_vec(),
        });
    }
    let prod = tape.mul(h, w)?;
    let z = tape.sum_rows(prod)?;
    tape.add(z, p.var(&format!("{name}.b"))?)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub h_x: Var,
    pub h_c: Var,
    pub z_x: Var,
    pub z_c: Var,
    pub z_hat: Option<Var>,
}

pub fn heads(tape: &mut Tape, q: &QueryState, p: &Bound) -> Result<HeadOutputs> {
    let h_x = mlp(tape, q.q_causal, p, CAUSAL_MLP)?;
    let h_c = mlp(tape, q.q_conf, p, CONF_MLP)?;
    let z_x = classify(tape, h_x, p, CAUSAL_CLS)?;
    let z_c = classify(tape, h_c, p, CONF_CLS)?;
    Ok(HeadOutputs {
        h_x,
        h_c,
        z_x,
        z_c,
        z_hat: None,
    })
}

fn check_labels(y: &[f64]) -> Result<()> {
    match y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Label(format!("label entries must be 0 or 1, found {v}"))),
        None => Ok(()),
    }
}

/// Supervised loss of logits `z` against a binary label vector.
pub fn loss_sl(tape: &mut Tape, z: Var, y: &[f64], form: LossForm) -> Result<Var> {
    check_labels(y)?;
    if tape.value(z).numel() != y.len() {
        return Err(Error::Dimension {
            op: "loss_sl",
            lhs: tape.shape(z).to_vec(),
            rhs: vec![y.len()],
        });
    }
    match form {
        LossForm::MultiLabel => tape.bce_with_logits(z, y),
        LossForm::Categorical => {
            let logp = tape.log_softmax_rows(z)?;
            let target = tape.constant(Tensor::new(tape.shape(z).to_vec(), y.to_vec())?);
            let picked = tape.mul(logp, target)?;
            let s = tape.sum(picked);
            Ok(tape.scale(s, -1.0))
        }
    }
}

/// `KL(u ‖ softmax(z_c))` with `u` uniform over the classes:
/// `-ln C - mean_k log softmax(z_c)_k`.
pub fn loss_conf(tape: &mut Tape, z_c: Var) -> Result<Var> {
    let c = tape.value(z_c).numel();
    let logp = tape.log_softmax_rows(z_c)?;
    let m = tape.mean(logp);
    Ok(tape.affine(m, -1.0, -(c as f64).ln()))
}

/// Confounding features borrowed from other samples of the batch.
#[derive(Debug, Clone)]
pub struct StratificationSet {
    pub strata: Vec<Var>,
    /// `source_indices[i]` is the sample whose `h_c` is applied to sample `i`.
    pub source_indices: Vec<usize>,
}

/// Uniformly random permutation of `0..n` without fixed points.
pub fn derangement(n: usize, rng: &mut impl rand::Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InterventionUnavailable(format!(
            "a batch of {n} has no other sample to borrow confounding features from"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(perm);
        }
    }
}

/// Assigns each sample one `ĥ_c` drawn from a different sample.
pub fn sample_strata(batch_h_c: &[Var], rng_seed: u64) -> Result<StratificationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let source_indices = derangement(batch_h_c.len(), &mut rng)?;
    let strata = source_indices.iter().map(|&j| batch_h_c[j]).collect();
    Ok(StratificationSet { strata, source_indices })
}

/// Intervened logits `Φ_i(h_x + ĥ_c)`.
pub fn intervene(tape: &mut Tape, h_x: Var, stratum: Var, p: &Bound) -> Result<Var> {
    if tape.shape(h_x) != tape.shape(stratum) {
        return Err(Error::Dimension {
            op: "intervene",
            lhs: tape.shape(h_x).to_vec(),
            rhs: tape.shape(stratum).to_vec(),
        });
    }
    let mixed = tape.add(h_x, stratum)?;
    classify(tape, mixed, p, INTERV_CLS)
}

/// Mean supervised loss over every (sample, stratum) pair; `labels[i]` is the
/// label of the sample that contributed the causal features of `z_hat[i]`.
pub fn loss_bd(tape: &mut Tape, z_hat: &[Var], labels: &[&[f64]], form: LossForm) -> Result<Var> {
    if z_hat.is_empty() || z_hat.len() != labels.len() {
        return Err(Error::Dimension {
            op: "loss_bd",
            lhs: vec![z_hat.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut parts = Vec::with_capacity(z_hat.len());
    for (&z, y) in z_hat.iter().zip(labels) {
        let l = loss_sl(tape, z, y, form)?;
        parts.push(l);
    }
    mean_of(tape, &parts)
}

/// Mean of scalar vars.
pub fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let stacked = tape.concat(parts)?;
    Ok(tape.mean(stacked))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_sl: f64,
    pub l_conf: f64,
    pub l_bd: f64,
    pub total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl LossBreakdown {
    /// `|total - (l_sl + α1·l_conf + α2·l_bd)|`.
    pub fn identity_residual(&self) -> f64 {
        (self.total - (self.l_sl + self.alpha1 * self.l_conf + self.alpha2 * self.l_bd)).abs()
    }
}

fn check_alphas(alpha1: f64, alpha2: f64) -> Result<()> {
    if !(alpha1 >= 0.0 && alpha2 >= 0.0 && alpha1.is_finite() && alpha2.is_finite()) {
        return Err(Error::Config(format!(
            "loss weights must be finite and non-negative, got ({alpha1}, {alpha2})"
        )));
    }
    Ok(())
}

/// `total = l_sl + α1·l_conf + α2·l_bd`.
pub fn total_loss(parts: (f64, f64, f64), alpha1: f64, alpha2: f64) -> Result<LossBreakdown> {
    check_alphas(alpha1, alpha2)?;
    let (l_sl, l_conf, l_bd) = parts;
    if ![l_sl, l_conf, l_bd].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("loss parts {parts:?}")));
    }
    Ok(LossBreakdown {
        l_sl,
        l_conf,
        l_bd,
        total: l_sl + alpha1 * l_conf + alpha2 * l_bd,
        alpha1,
        alpha2,
    })
}

/// Tape version of [`total_loss`]. Absent parts contribute nothing and stay
/// off the gradient path.
pub fn total_loss_var(
    tape: &mut Tape,
    l_sl: Var,
    l_conf: Option<Var>,
    l_bd: Option<Var>,
    alpha1: f64,
    alpha2: f64,
) -> Result<Var> {
    check_alphas(alpha1, alpha2)?;
    let mut total = l_sl;
    if let Some(l) = l_conf {
        let w = tape.scale(l, alpha1);
        total = tape.add(total, w)?;
    }
    if let Some(l) = l_bd {
        let w = tape.scale(l, alpha2);
        total = tape.add(total, w)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4]));
        let l = loss_sl(&mut tape, z, &[1.0, 0.0, 1.0, 1.0], LossForm::MultiLabel).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_decreases_with_margin() {
        let y = [1.0, 0.0, 1.0];
        let mut last = f64::INFINITY;
        for m in [0.5, 1.0, 2.0, 5.0, 10.0, 40.0] {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::vector(vec![m, -m, m]));
            let l = loss_sl(&mut tape, z, &y, LossForm::MultiLabel).unwrap();
            let v = tape.value(l).data()[0];
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-15);
    }

    #[test]
    fn labels_must_be_binary() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            loss_sl(&mut tape, z, &[0.5, 1.0], LossForm::MultiLabel),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn categorical_form() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let l = loss_sl(&mut tape, z, &[0.0, 1.0], LossForm::Categorical).unwrap();
        assert!((tape.value(l).data()[0] - (-(0.75f64).ln())).abs() < 1e-14);
    }

    #[test]
    fn conf_loss_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::filled(&[5], 2.7));
        let l = loss_conf(&mut tape, z).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-15);

        let z = tape.constant(Tensor::vector(vec![3f64.ln(), 0.0]));
        let l = loss_conf(&mut tape, z).unwrap();
        let want = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn batch_of_two_swaps() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        for seed in 0..20 {
            let s = sample_strata(&[a, b], seed).unwrap();
            assert_eq!(s.source_indices, vec![1, 0]);
            assert_eq!(s.strata, vec![b, a]);
        }
        assert!(matches!(sample_strata(&[a], 0), Err(Error::InterventionUnavailable(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss((1.0, 2.0, 4.0), 0.5, 0.5).unwrap();
        assert_eq!(b.total, 4.0);
        let base = total_loss((0.7, 2.0, 4.0), 0.0, 0.0).unwrap();
        assert_eq!(base.total, 0.7);
        assert!(matches!(total_loss((1.0, 1.0, 1.0), -0.1, 0.0), Err(Error::Config(_))));
    }
}
