//! Small attention CNN mapping an image to the feature map `F` and its
//! positionally-encoded twin `F̃`.
//!
//! Layout: a stack of stride-2 conv stages, then (when attention is on) two
//! parallel paths over the last stage output:
//!
//! ```text
//!            ┌─ Conv_a ─ ReLU ─ channel gate (×) ─┐
//!   x ──────┤                                     ├─ concat ─ 1×1 conv ─ (+ x) ─ F
//!            └─ Conv_b ─ ReLU ─ position attn (+) ─┘
//! ```
//!
//! The wiring is fixed; only the kernel sizes of the two paths are configurable.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Even kernel sizes, one per stage; padding is `k/2 - 1` so every stage
    /// halves the spatial extent exactly.
    pub stage_kernels: Vec<usize>,
    pub hidden_dim: usize,
    /// Channel/position attention paths on or off (the "feature learning"
    /// ablation switch).
    pub attention: bool,
    pub branch_kernels: (usize, usize),
    pub branch_channels: usize,
    pub gate_bottleneck: usize,
    pub key_dim: usize,
    /// Largest `h·w` grid the dense position attention accepts.
    pub attention_budget: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            input_channels: 1,
            stage_channels: vec![8, 16, 64],
            stage_kernels: vec![4, 4, 4],
            hidden_dim: 64,
            attention: true,
            branch_kernels: (3, 5),
            branch_channels: 16,
            gate_bottleneck: 4,
            key_dim: 8,
            attention_budget: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_kernels.len() {
            return cfg("stage_channels and stage_kernels must be non-empty and equally long".into());
        }
        if self.stage_channels.last() != Some(&self.hidden_dim) {
            return cfg(format!(
                "final stage has {} channels but hidden_dim is {}",
                self.stage_channels.last().unwrap(),
                self.hidden_dim
            ));
        }
        if self.hidden_dim % 4 != 0 {
            return cfg(format!("hidden_dim {} must be divisible by 4", self.hidden_dim));
        }
        if let Some(k) = self.stage_kernels.iter().find(|&&k| k < 2 || k % 2 != 0) {
            return cfg(format!("stage kernel {k} must be even and at least 2"));
        }
        let scale = 1usize << self.stage_channels.len();
        let (h0, w0) = self.input_size;
        if h0 == 0 || w0 == 0 || h0 % scale != 0 || w0 % scale != 0 {
            return cfg(format!(
                "input {h0}x{w0} is not divisible by 2^{} = {scale}",
                self.stage_channels.len()
            ));
        }
        if self.input_channels == 0 || self.stage_channels.contains(&0) {
            return cfg("channel counts must be positive".into());
        }
        if self.attention {
            let (ka, kb) = self.branch_kernels;
            if ka % 2 == 0 || kb % 2 == 0 {
                return cfg(format!("branch kernels ({ka}, {kb}) must be odd"));
            }
            if self.branch_channels == 0 || self.gate_bottleneck == 0 || self.key_dim == 0 {
                return cfg("attention widths must be positive".into());
            }
            let (h, w) = self.feature_size();
            if h * w > self.attention_budget {
                return cfg(format!(
                    "feature grid {h}x{w} exceeds attention budget {}; downsample the input or add a stage",
                    self.attention_budget
                ));
            }
        }
        Ok(())
    }

    /// Spatial size `(H, W)` of the output feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        let scale = 1usize << self.stage_channels.len();
        (self.input_size.0 / scale, self.input_size.1 / scale)
    }
}

/// Backbone output: `f` and `f_pos` are `[H·W, d]` (row-major over the grid).
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub f: Var,
    pub f_pos: Var,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

/// 2-D sinusoidal encoding of shape `[h, w, d]`.
///
/// Channels are laid out as `[sin(row·ω), cos(row·ω), sin(col·ω), cos(col·ω)]`
/// with `d/4` geometrically spaced frequencies `ω_i = 10000^(-i/(d/4))`.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {d} must be a positive multiple of 4"
        )));
    }
    let q = d / 4;
    let freqs: Vec<f64> = (0..q).map(|i| 10000f64.powf(-(i as f64) / q as f64)).collect();
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            data.extend(freqs.iter().map(|f| (r as f64 * f).sin()));
            data.extend(freqs.iter().map(|f| (r as f64 * f).cos()));
            data.extend(freqs.iter().map(|f| (c as f64 * f).sin()));
            data.extend(freqs.iter().map(|f| (c as f64 * f).cos()));
        }
    }
    Tensor::new(vec![h, w, d], data)
}

/// Uniform(-bound, bound) tensor with `bound = sqrt(gain / fan_in)`.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let bound = (gain / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub(crate) fn conv_init(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
    store.insert(format!("{name}.w"), fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, 6.0, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))
}

/// Registers all backbone parameters. Convolutions use fan-in-scaled
/// uniform weights; the position-attention value projection starts at zero
/// so the residual block is the identity at initialization.
pub fn init_params(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let mut c_in = cfg.input_channels;
    for (i, (&c, &k)) in cfg.stage_channels.iter().zip(&cfg.stage_kernels).enumerate() {
        conv_init(store, &format!("backbone.stage{i}"), c, c_in, k, rng)?;
        c_in = c;
    }
    if cfg.attention {
        let (d, cb, r, dk) = (cfg.hidden_dim, cfg.branch_channels, cfg.gate_bottleneck, cfg.key_dim);
        conv_init(store, "backbone.branch_a", cb, d, cfg.branch_kernels.0, rng)?;
        conv_init(store, "backbone.branch_b", cb, d, cfg.branch_kernels.1, rng)?;
        store.insert("backbone.gate.w1", fan_in_uniform(&[cb, r], cb, 6.0, rng))?;
        store.insert("backbone.gate.b1", Tensor::zeros(&[r]))?;
        store.insert("backbone.gate.w2", fan_in_uniform(&[r, cb], r, 3.0, rng))?;
        store.insert("backbone.gate.b2", Tensor::zeros(&[cb]))?;
        store.insert("backbone.pos.wq", fan_in_uniform(&[cb, dk], cb, 3.0, rng))?;
        store.insert("backbone.pos.bq", Tensor::zeros(&[dk]))?;
        store.insert("backbone.pos.wk", fan_in_uniform(&[cb, dk], cb, 3.0, rng))?;
        store.insert("backbone.pos.wv", Tensor::zeros(&[cb, cb]))?;
        store.insert("backbone.pos.bv", Tensor::zeros(&[cb]))?;
        conv_init(store, "backbone.fuse", d, 2 * cb, 1, rng)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelAttentionParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ChannelAttentionParams {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: p.var(&format!("{prefix}.w1"))?,
            b1: p.var(&format!("{prefix}.b1"))?,
            w2: p.var(&format!("{prefix}.w2"))?,
            b2: p.var(&format!("{prefix}.b2"))?,
        })
    }
}

/// Squeeze-excitation style gate: `x ⊙ sigmoid(W2·relu(W1·GAP(x) + b1) + b2)`.
pub fn channel_attention(tape: &mut Tape, x: Var, p: &ChannelAttentionParams) -> Result<Var> {
    let c = tape.shape(x)[0];
    if tape.shape(p.w1)[0] != c {
        return Err(Error::Dimension {
            op: "channel_attention",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(p.w1).to_vec(),
        });
    }
    let gate = channel_gate(tape, x, p)?;
    tape.scale_channels(x, gate)
}

/// The per-channel gate in `(0, 1)^c` used by [`channel_attention`].
pub fn channel_gate(tape: &mut Tape, x: Var, p: &ChannelAttentionParams) -> Result<Var> {
    let c = tape.shape(x)[0];
    let s = tape.global_average_pool(x)?;
    let s = tape.reshape(s, &[1, c])?;
    let t = tape.matmul(s, p.w1)?;
    let t = tape.add_row_bias(t, p.b1)?;
    let t = tape.relu(t);
    let g = tape.matmul(t, p.w2)?;
    let g = tape.add_row_bias(g, p.b2)?;
    let g = tape.sigmoid(g);
    tape.reshape(g, &[c])
}

/// Keys carry no bias: a per-row constant is invisible to the row softmax.
#[derive(Debug, Clone, Copy)]
pub struct PositionAttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
}

impl PositionAttentionParams {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| p.var(&format!("{prefix}.{n}"));
        Ok(Self {
            wq: v("wq")?,
            bq: v("bq")?,
            wk: v("wk")?,
            wv: v("wv")?,
            bv: v("bv")?,
        })
    }
}

/// Dense spatial self-attention with a residual connection. Returns the
/// output `[c,h,w]` and the `[h·w, h·w]` attention matrix.
pub fn position_attention_with_weights(
    tape: &mut Tape,
    x: Var,
    p: &PositionAttentionParams,
    budget: usize,
) -> Result<(Var, Var)> {
    let &[c, h, w] = tape.shape(x) else {
        return Err(Error::Shape {
            op: "position_attention",
            shape: tape.shape(x).to_vec(),
            reason: "expected [c,h,w]".into(),
        });
    };
    let n = h * w;
    if n > budget {
        return Err(Error::Config(format!(
            "position attention over {h}x{w} = {n} positions exceeds the budget of {budget}; downsample the feature map"
        )));
    }
    if tape.shape(p.wv)[0] != c {
        return Err(Error::Dimension {
            op: "position_attention",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(p.wv).to_vec(),
        });
    }
    let dk = tape.shape(p.wq)[1];
    let flat = tape.reshape(x, &[c, n])?;
    let rows = tape.transpose(flat)?;
    let project = |tape: &mut Tape, wt: Var, b: Var| -> Result<Var> {
        let y = tape.matmul(rows, wt)?;
        tape.add_row_bias(y, b)
    };
    let q = project(tape, p.wq, p.bq)?;
    let k = tape.matmul(rows, p.wk)?;
    let v = project(tape, p.wv, p.bv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let attn = tape.softmax_rows(scores, (dk as f64).sqrt())?;
    let mixed = tape.matmul(attn, v)?;
    let mixed = tape.transpose(mixed)?;
    let out = tape.add(flat, mixed)?;
    Ok((tape.reshape(out, &[c, h, w])?, attn))
}

pub fn position_attention(tape: &mut Tape, x: Var, p: &PositionAttentionParams, budget: usize) -> Result<Var> {
    Ok(position_attention_with_weights(tape, x, p, budget)?.0)
}

fn conv_block(tape: &mut Tape, x: Var, p: &Bound, name: &str, stride: usize, pad: usize, relu: bool) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    let y = tape.add_channel_bias(y, b)?;
    Ok(if relu { tape.relu(y) } else { y })
}

/// Runs the backbone on `image: [c, H0, W0]` and returns `F` and `F̃`.
pub fn extract_features(tape: &mut Tape, image: Var, cfg: &BackboneConfig, p: &Bound) -> Result<FeatureMap> {
    let expect = [cfg.input_channels, cfg.input_size.0, cfg.input_size.1];
    if tape.shape(image) != expect {
        return Err(Error::Geometry {
            op: "extract_features",
            detail: format!("image shape {:?} does not match configured {:?}", tape.shape(image), expect),
        });
    }
    let mut x = image;
    for (i, &k) in cfg.stage_kernels.iter().enumerate() {
        x = conv_block(tape, x, p, &format!("backbone.stage{i}"), 2, k / 2 - 1, true)?;
    }
    if cfg.attention {
        let (ka, kb) = cfg.branch_kernels;
        let a = conv_block(tape, x, p, "backbone.branch_a", 1, ka / 2, true)?;
        let a = channel_attention(tape, a, &ChannelAttentionParams::bind(p, "backbone.gate")?)?;
        let b = conv_block(tape, x, p, "backbone.branch_b", 1, kb / 2, true)?;
        let b = position_attention(tape, b, &PositionAttentionParams::bind(p, "backbone.pos")?, cfg.attention_budget)?;
        let cat = tape.concat(&[a, b])?;
        let fused = conv_block(tape, cat, p, "backbone.fuse", 1, 0, false)?;
        x = tape.add(x, fused)?;
    }
    let (h, w) = cfg.feature_size();
    let d = cfg.hidden_dim;
    let flat = tape.reshape(x, &[d, h * w])?;
    let f = tape.transpose(flat)?;
    let pe = positional_encoding(h, w, d)?.reshaped(&[h * w, d])?;
    let pe = tape.constant(pe);
    let f_pos = tape.add(f, pe)?;
    Ok(FeatureMap { f, f_pos, h, w, d })
}
