//! Cross-attention decoder that splits class queries into a causal branch
//! (attention-weighted features) and a confounding branch (features weighted
//! by the complement of the attention).

use rand::Rng;

use crate::backbone::{fan_in_uniform, FeatureMap};
use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamStore, Tape, Tensor, Var};

/// How the complement weights `1 - A` are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplementMode {
    /// `Ā = 1 - A`; rows sum to `H·W - 1`, so confounding queries are about
    /// `H·W - 1` times larger than causal ones.
    Verbatim,
    /// `Ā = (1 - A) / (H·W - 1)`; rows sum to 1. The default: with verbatim
    /// weights the inflated confounding features dominate the intervened
    /// logits early on and slow the causal branch badly.
    Renormalized,
}

impl ComplementMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Verbatim => "verbatim",
            Self::Renormalized => "renormalized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "renormalized" => Ok(Self::Renormalized),
            other => Err(Error::Config(format!("unknown complement mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub complement_mode: ComplementMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_classes: 4,
            complement_mode: ComplementMode::Renormalized,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "decoder needs positive layers/dim/classes, got {self:?}"
            )));
        }
        Ok(())
    }

    fn ffn_width(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Class queries after the decoder. `attention` is the final layer's `[C, H·W]`
/// attention matrix.
#[derive(Debug, Clone, Copy)]
pub struct QueryState {
    pub q_causal: Var,
    pub q_conf: Var,
    pub layer_index: usize,
    pub attention: Var,
}

/// The learned per-class query embedding is added to the incoming queries
/// before scoring, at every layer. Each layer owns a feed-forward block.
pub fn init_params(cfg: &DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let (c, d, f) = (cfg.num_classes, cfg.hidden_dim, cfg.ffn_width());
    store.insert("decoder.query_embed", fan_in_uniform(&[c, d], 1, 1.0, rng))?;
    for l in 0..cfg.num_layers {
        let pre = format!("decoder.layer{l}.ffn");
        store.insert(format!("{pre}.w1"), fan_in_uniform(&[d, f], d, 6.0, rng))?;
        store.insert(format!("{pre}.b1"), Tensor::zeros(&[f]))?;
        store.insert(format!("{pre}.w2"), fan_in_uniform(&[f, d], f, 3.0, rng))?;
        store.insert(format!("{pre}.b2"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

/// Output of one cross-attention layer, before its feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub q_causal: Var,
    pub q_conf: Var,
    pub attention: Var,
    pub complement: Var,
}

/// `A = softmax((Q + E)·F̃ᵀ / √d)`, `Q = A·F`, `Q̄ = Ā·F`.
pub fn decode_layer(
    tape: &mut Tape,
    q_prev: Var,
    fmap: &FeatureMap,
    p: &Bound,
    cfg: &DecoderConfig,
) -> Result<LayerOutput> {
    let expect = [cfg.num_classes, cfg.hidden_dim];
    if tape.shape(q_prev) != expect || fmap.d != cfg.hidden_dim {
        return Err(Error::Dimension {
            op: "decode_layer",
            lhs: tape.shape(q_prev).to_vec(),
            rhs: vec![fmap.h * fmap.w, fmap.d],
        });
    }
    let n = fmap.h * fmap.w;
    if cfg.complement_mode == ComplementMode::Renormalized && n == 1 {
        return Err(Error::Geometry {
            op: "decode_layer",
            detail: "renormalized complement needs more than one position (H·W = 1)".into(),
        });
    }
    let embed = p.var("decoder.query_embed")?;
    let queries = tape.add(q_prev, embed)?;
    let keys = tape.transpose(fmap.f_pos)?;
    let scores = tape.matmul(queries, keys)?;
    let attention = tape.softmax_rows(scores, (cfg.hidden_dim as f64).sqrt())?;
    let q_causal = tape.matmul(attention, fmap.f)?;
    let complement = match cfg.complement_mode {
        ComplementMode::Verbatim => tape.affine(attention, -1.0, 1.0),
        ComplementMode::Renormalized => {
            let s = 1.0 / (n as f64 - 1.0);
            tape.affine(attention, -s, s)
        }
    };
    let q_conf = tape.matmul(complement, fmap.f)?;
    Ok(LayerOutput {
        q_causal,
        q_conf,
        attention,
        complement,
    })
}

/// Per-query `q + W2·relu(W1·q + b1) + b2`.
pub fn feed_forward(tape: &mut Tape, q: Var, p: &Bound, layer: usize) -> Result<Var> {
    let pre = format!("decoder.layer{layer}.ffn");
    let h = tape.matmul(q, p.var(&format!("{pre}.w1"))?)?;
    let h = tape.add_row_bias(h, p.var(&format!("{pre}.b1"))?)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, p.var(&format!("{pre}.w2"))?)?;
    let h = tape.add_row_bias(h, p.var(&format!("{pre}.b2"))?)?;
    tape.add(q, h)
}

/// Threads the causal queries through `L` layers starting from `Q_0 = 0`.
/// The confounding queries are the final layer's complement branch.
pub fn decode(tape: &mut Tape, fmap: &FeatureMap, p: &Bound, cfg: &DecoderConfig) -> Result<QueryState> {
    cfg.validate()?;
    let mut q = tape.constant(Tensor::zeros(&[cfg.num_classes, cfg.hidden_dim]));
    let mut last = None;
    for l in 0..cfg.num_layers {
        let out = decode_layer(tape, q, fmap, p, cfg)?;
        q = feed_forward(tape, out.q_causal, p, l)?;
        last = Some(out);
    }
    let last = last.expect("num_layers >= 1");
    Ok(QueryState {
        q_causal: q,
        q_conf: last.q_conf,
        layer_index: cfg.num_layers,
        attention: last.attention,
    })
}

/// Final-layer attention reshaped to per-class spatial maps `[C, H, W]`.
pub fn export_attention(tape: &mut Tape, fmap: &FeatureMap, p: &Bound, cfg: &DecoderConfig) -> Result<Tensor> {
    let state = decode(tape, fmap, p, cfg)?;
    tape.value(state.attention)
        .reshaped(&[cfg.num_classes, fmap.h, fmap.w])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap_from(tape: &mut Tape, f: Tensor, f_pos: Tensor, h: usize, w: usize) -> FeatureMap {
        let d = f.shape()[1];
        let f = tape.constant(f);
        let f_pos = tape.constant(f_pos);
        FeatureMap { f, f_pos, h, w, d }
    }

    fn zero_embed_store(cfg: &DecoderConfig) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(cfg, &mut store, &mut crate::rng::stream(3, crate::rng::Stream::Init)).unwrap();
        store
            .get_mut("decoder.query_embed")
            .unwrap()
            .data_mut()
            .fill(0.0);
        store
    }

    #[test]
    fn uniform_attention_gives_mean_and_scaled_complement() {
        let cfg = DecoderConfig {
            num_layers: 1,
            hidden_dim: 4,
            num_classes: 2,
            complement_mode: ComplementMode::Verbatim,
        };
        let store = zero_embed_store(&cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = Tensor::new(vec![6, 4], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let fm = fmap_from(&mut tape, f.clone(), Tensor::zeros(&[6, 4]), 2, 3);
        let q0 = tape.constant(Tensor::zeros(&[2, 4]));
        let out = decode_layer(&mut tape, q0, &fm, &p, &cfg).unwrap();
        let qc = tape.value(out.q_causal);
        let qb = tape.value(out.q_conf);
        for k in 0..2 {
            for j in 0..4 {
                let mean: f64 = (0..6).map(|r| f.at2(r, j)).sum::<f64>() / 6.0;
                assert!((qc.at2(k, j) - mean).abs() < 1e-12);
                assert!((qb.at2(k, j) - 5.0 * mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn renormalized_uniform_complement_equals_causal() {
        let cfg = DecoderConfig {
            num_layers: 1,
            hidden_dim: 4,
            num_classes: 2,
            complement_mode: ComplementMode::Renormalized,
        };
        let store = zero_embed_store(&cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = Tensor::new(vec![4, 4], (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let fm = fmap_from(&mut tape, f, Tensor::zeros(&[4, 4]), 2, 2);
        let q0 = tape.constant(Tensor::zeros(&[2, 4]));
        let out = decode_layer(&mut tape, q0, &fm, &p, &cfg).unwrap();
        assert!(tape.value(out.q_causal).max_abs_diff(tape.value(out.q_conf)) < 1e-12);
    }

    #[test]
    fn renormalized_rejects_single_position() {
        let cfg = DecoderConfig {
            num_layers: 1,
            hidden_dim: 4,
            num_classes: 1,
            complement_mode: ComplementMode::Renormalized,
        };
        let store = zero_embed_store(&cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let fm = fmap_from(&mut tape, Tensor::zeros(&[1, 4]), Tensor::zeros(&[1, 4]), 1, 1);
        let q0 = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            decode_layer(&mut tape, q0, &fm, &p, &cfg),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn untrained_export_is_uniform() {
        let cfg = DecoderConfig {
            hidden_dim: 8,
            num_classes: 3,
            ..Default::default()
        };
        let store = zero_embed_store(&cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        // Keys constant across positions, so every query sees equal scores
        // even after the feed-forward block changes Q.
        let f = Tensor::new(vec![16, 8], (0..128).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let fm = fmap_from(&mut tape, f, Tensor::filled(&[16, 8], 0.3), 4, 4);
        let maps = export_attention(&mut tape, &fm, &p, &cfg).unwrap();
        assert_eq!(maps.shape(), &[3, 4, 4]);
        assert!(maps.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch() {
        let cfg = DecoderConfig {
            num_layers: 1,
            hidden_dim: 4,
            num_classes: 2,
            ..Default::default()
        };
        let store = zero_embed_store(&cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let fm = fmap_from(&mut tape, Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4]), 2, 2);
        let q0 = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            decode_layer(&mut tape, q0, &fm, &p, &cfg),
            Err(Error::Dimension { .. })
        ));
    }
}
