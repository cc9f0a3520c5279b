//! Finite-difference checks of tape gradients.
//!
//! A [`GradCase`] owns its differentiable inputs as a [`ParamStore`] and a
//! closure that records a scalar loss from them. [`check_case`] compares the
//! reverse-mode gradient against central differences, and [`op_catalog`]
//! builds randomized cases for every tape operation and the model's
//! composite blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig, ChannelAttentionParams, FeatureMap, PositionAttentionParams};
use crate::causal::{self, LossForm};
use crate::decoder::{self, ComplementMode, DecoderConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{Bound, ParamStore, Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted `‖g_tape − g_fd‖ / (‖g_tape‖ + ‖g_fd‖)`.
pub const TOLERANCE: f64 = 1e-4;
/// Per-tensor cap on checked coordinates; larger tensors are strided.
pub const MAX_COORDS: usize = 48;
/// Cases whose relu inputs come closer than this to zero are redrawn.
pub const RELU_MARGIN: f64 = 1e-3;

pub type BuildFn = Box<dyn Fn(&mut Tape, &Bound) -> Result<Var> + Send + Sync>;

pub struct GradCase {
    pub name: String,
    pub inputs: ParamStore,
    pub build: BuildFn,
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .field("inputs", &self.inputs.names())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub relative_error: f64,
    pub coords_checked: usize,
    pub relu_margin: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.relative_error <= TOLERANCE
    }
}

fn evaluate(case: &GradCase, store: &ParamStore) -> Result<(Tape, Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = (case.build)(&mut tape, &bound)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "case {} returned a non-scalar of shape {:?}",
            case.name,
            tape.shape(loss)
        )));
    }
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    Ok((tape, grads, value))
}

fn loss_at(case: &GradCase, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = (case.build)(&mut tape, &bound)?;
    Ok(tape.value(loss).data()[0])
}

fn coords(numel: usize) -> Vec<usize> {
    if numel <= MAX_COORDS {
        (0..numel).collect()
    } else {
        (0..MAX_COORDS).map(|i| i * numel / MAX_COORDS).collect()
    }
}

/// Compares tape gradients of every input against central differences.
pub fn check_case(case: &GradCase) -> Result<GradReport> {
    let (tape, analytic, _) = evaluate(case, &case.inputs)?;
    let relu_margin = tape.min_relu_margin();
    let mut store = case.inputs.clone();
    let (mut diff2, mut a2, mut n2, mut checked) = (0.0, 0.0, 0.0, 0);
    for t in 0..store.len() {
        for j in coords(store.tensors()[t].numel()) {
            let orig = store.tensors()[t].data()[j];
            store.tensors_mut()[t].data_mut()[j] = orig + STEP;
            let up = loss_at(case, &store)?;
            store.tensors_mut()[t].data_mut()[j] = orig - STEP;
            let down = loss_at(case, &store)?;
            store.tensors_mut()[t].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[t].data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            checked += 1;
        }
    }
    let denom = a2.sqrt() + n2.sqrt();
    let relative_error = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
    Ok(GradReport {
        name: case.name.clone(),
        relative_error,
        coords_checked: checked,
        relu_margin,
    })
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// Values bounded away from zero, for relu inputs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn store(pairs: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in pairs {
        s.insert(n, t).expect("unique names");
    }
    s
}

/// `Σ y ⊙ w` for a fixed random `w`, turning any output into a scalar whose
/// gradient exercises every output coordinate.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.reshaped(tape.shape(y))?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

type Maker = fn(&mut ChaCha8Rng) -> GradCase;

fn case(name: &str, inputs: ParamStore, build: impl Fn(&mut Tape, &Bound) -> Result<Var> + Send + Sync + 'static) -> GradCase {
    GradCase {
        name: name.into(),
        inputs,
        build: Box::new(build),
    }
}

/// Output projection weights for an output of `numel` elements.
fn weights(rng: &mut ChaCha8Rng, numel: usize) -> Tensor {
    tensor(rng, &[numel], 1.0)
}

fn unary(name: &'static str, rng: &mut ChaCha8Rng, input: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> GradCase {
    let w = weights(rng, input.numel());
    case(name, store(vec![("x", input)]), move |t, p| {
        let y = f(t, p.var("x")?)?;
        project(t, y, &w)
    })
}

fn mk_matmul(rng: &mut ChaCha8Rng) -> GradCase {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let w = weights(rng, m * n);
    let inputs = store(vec![("a", tensor(rng, &[m, k], 1.0)), ("b", tensor(rng, &[k, n], 1.0))]);
    case("matmul", inputs, move |t, p| {
        let y = t.matmul(p.var("a")?, p.var("b")?)?;
        project(t, y, &w)
    })
}

fn mk_transpose(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 1.0);
    unary("transpose", rng, x, |t, x| t.transpose(x))
}

fn binary(name: &'static str, rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let w = weights(rng, shape[0] * shape[1]);
    let inputs = store(vec![("a", tensor(rng, &shape, 1.0)), ("b", tensor(rng, &shape, 1.0))]);
    case(name, inputs, move |t, p| {
        let y = f(t, p.var("a")?, p.var("b")?)?;
        project(t, y, &w)
    })
}

fn mk_add(rng: &mut ChaCha8Rng) -> GradCase {
    binary("add", rng, |t, a, b| t.add(a, b))
}

fn mk_sub(rng: &mut ChaCha8Rng) -> GradCase {
    binary("sub", rng, |t, a, b| t.sub(a, b))
}

fn mk_mul(rng: &mut ChaCha8Rng) -> GradCase {
    binary("mul", rng, |t, a, b| t.mul(a, b))
}

fn mk_add_row_bias(rng: &mut ChaCha8Rng) -> GradCase {
    let (m, n) = (dim(rng), dim(rng));
    let w = weights(rng, m * n);
    let inputs = store(vec![("x", tensor(rng, &[m, n], 1.0)), ("b", tensor(rng, &[n], 1.0))]);
    case("add_row_bias", inputs, move |t, p| {
        let y = t.add_row_bias(p.var("x")?, p.var("b")?)?;
        project(t, y, &w)
    })
}

fn channel_op(name: &'static str, rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> GradCase {
    let shape = [dim(rng), dim(rng), dim(rng)];
    let w = weights(rng, shape.iter().product());
    let inputs = store(vec![("x", tensor(rng, &shape, 1.0)), ("c", tensor(rng, &shape[..1], 1.0))]);
    case(name, inputs, move |t, p| {
        let y = f(t, p.var("x")?, p.var("c")?)?;
        project(t, y, &w)
    })
}

fn mk_add_channel_bias(rng: &mut ChaCha8Rng) -> GradCase {
    channel_op("add_channel_bias", rng, |t, x, b| t.add_channel_bias(x, b))
}

fn mk_scale_channels(rng: &mut ChaCha8Rng) -> GradCase {
    channel_op("scale_channels", rng, |t, x, s| t.scale_channels(x, s))
}

fn mk_affine(rng: &mut ChaCha8Rng) -> GradCase {
    let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let shape = [dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 1.0);
    let w = weights(rng, x.numel());
    case("affine", store(vec![("x", x)]), move |t, p| {
        let y = t.affine(p.var("x")?, a, b);
        project(t, y, &w)
    })
}

fn mk_scale(rng: &mut ChaCha8Rng) -> GradCase {
    let s = rng.gen_range(-2.0..2.0);
    let shape = [dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 1.0);
    let w = weights(rng, x.numel());
    case("scale", store(vec![("x", x)]), move |t, p| {
        let y = t.scale(p.var("x")?, s);
        project(t, y, &w)
    })
}

fn mk_relu(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let x = away_from_zero(rng, &shape);
    unary("relu", rng, x, |t, x| Ok(t.relu(x)))
}

fn mk_sigmoid(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 4.0);
    unary("sigmoid", rng, x, |t, x| Ok(t.sigmoid(x)))
}

fn mk_softplus(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 4.0);
    unary("softplus", rng, x, |t, x| Ok(t.softplus(x)))
}

fn mk_softmax_rows(rng: &mut ChaCha8Rng) -> GradCase {
    let scale = rng.gen_range(0.5..3.0);
    let shape = [dim(rng), dim(rng) + 1];
    let x = tensor(rng, &shape, 3.0);
    let w = weights(rng, x.numel());
    case("softmax_rows", store(vec![("x", x)]), move |t, p| {
        let y = t.softmax_rows(p.var("x")?, scale)?;
        project(t, y, &w)
    })
}

fn mk_log_softmax_rows(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng) + 1];
    let x = tensor(rng, &shape, 3.0);
    unary("log_softmax_rows", rng, x, |t, x| t.log_softmax_rows(x))
}

fn mk_conv2d(rng: &mut ChaCha8Rng) -> GradCase {
    let (c_in, c_out) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = rng.gen_range(1..=4);
    let stride = rng.gen_range(1..=2);
    let mut pad = rng.gen_range(0..=k / 2);
    // Input extents chosen so the output extents oh, ow come out exact.
    let (oh, ow) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (eh, ew) = ((oh - 1) * stride + k, (ow - 1) * stride + k);
    if eh <= 2 * pad || ew <= 2 * pad {
        pad = 0;
    }
    let (h, w) = (eh - 2 * pad, ew - 2 * pad);
    let out_numel = c_out * ((h + 2 * pad - k) / stride + 1) * ((w + 2 * pad - k) / stride + 1);
    let wts = weights(rng, out_numel);
    let inputs = store(vec![
        ("x", tensor(rng, &[c_in, h, w], 1.0)),
        ("k", tensor(rng, &[c_out, c_in, k, k], 1.0)),
    ]);
    case("conv2d", inputs, move |t, p| {
        let y = t.conv2d(p.var("x")?, p.var("k")?, stride, pad)?;
        project(t, y, &wts)
    })
}

fn mk_global_average_pool(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 1.0);
    let w = weights(rng, x.shape()[0]);
    case("global_average_pool", store(vec![("x", x)]), move |t, p| {
        let y = t.global_average_pool(p.var("x")?)?;
        project(t, y, &w)
    })
}

fn mk_reshape(rng: &mut ChaCha8Rng) -> GradCase {
    let (m, n) = (dim(rng), dim(rng));
    let x = tensor(rng, &[m, n], 1.0);
    let w = weights(rng, m * n);
    case("reshape", store(vec![("x", x)]), move |t, p| {
        let y = t.reshape(p.var("x")?, &[n, m])?;
        let y = t.mul(y, y)?;
        project(t, y, &w)
    })
}

fn mk_concat(rng: &mut ChaCha8Rng) -> GradCase {
    let n = dim(rng);
    let parts = rng.gen_range(1..=3);
    let leads: Vec<usize> = (0..parts).map(|_| dim(rng)).collect();
    let names = ["p0", "p1", "p2"];
    let inputs = store(leads.iter().zip(names).map(|(&m, nm)| (nm, tensor(rng, &[m, n], 1.0))).collect());
    let w = weights(rng, leads.iter().sum::<usize>() * n);
    case("concat", inputs, move |t, p| {
        let vars = names[..parts].iter().map(|nm| p.var(nm)).collect::<Result<Vec<_>>>()?;
        let y = t.concat(&vars)?;
        project(t, y, &w)
    })
}

fn mk_sum(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 1.0);
    case("sum", store(vec![("x", x)]), |t, p| {
        let x = p.var("x")?;
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    })
}

fn mk_mean(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 1.0);
    case("mean", store(vec![("x", x)]), |t, p| {
        let x = p.var("x")?;
        let s = t.sigmoid(x);
        Ok(t.mean(s))
    })
}

fn mk_sum_rows(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let x = tensor(rng, &shape, 1.0);
    let w = weights(rng, x.shape()[0]);
    case("sum_rows", store(vec![("x", x)]), move |t, p| {
        let y = t.sum_rows(p.var("x")?)?;
        project(t, y, &w)
    })
}

fn mk_bce(rng: &mut ChaCha8Rng) -> GradCase {
    let n = dim(rng) + 1;
    let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let z = tensor(rng, &[n], 5.0);
    case("bce_with_logits", store(vec![("z", z)]), move |t, p| t.bce_with_logits(p.var("z")?, &targets))
}

fn mk_fan_out(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [dim(rng), dim(rng)];
    let w = weights(rng, shape[0] * shape[1]);
    case("fan_out", store(vec![("x", tensor(rng, &shape, 1.0))]), move |t, p| {
        let x = p.var("x")?;
        let s = t.sigmoid(x);
        let y = t.mul(x, s)?;
        let y = t.add(y, x)?;
        project(t, y, &w)
    })
}

fn mk_channel_attention(rng: &mut ChaCha8Rng) -> GradCase {
    let (c, r) = (rng.gen_range(2..=5), rng.gen_range(1..=3));
    let shape = [c, dim(rng), dim(rng)];
    let w = weights(rng, shape.iter().product());
    let inputs = store(vec![
        ("x", tensor(rng, &shape, 1.0)),
        ("w1", tensor(rng, &[c, r], 1.0)),
        ("b1", tensor(rng, &[r], 1.0)),
        ("w2", tensor(rng, &[r, c], 1.0)),
        ("b2", tensor(rng, &[c], 1.0)),
    ]);
    case("channel_attention", inputs, move |t, p| {
        let params = ChannelAttentionParams {
            w1: p.var("w1")?,
            b1: p.var("b1")?,
            w2: p.var("w2")?,
            b2: p.var("b2")?,
        };
        let y = backbone::channel_attention(t, p.var("x")?, &params)?;
        project(t, y, &w)
    })
}

fn mk_position_attention(rng: &mut ChaCha8Rng) -> GradCase {
    let (c, dk) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let shape = [c, dim(rng), dim(rng)];
    let w = weights(rng, shape.iter().product());
    let inputs = store(vec![
        ("x", tensor(rng, &shape, 1.0)),
        ("wq", tensor(rng, &[c, dk], 1.0)),
        ("bq", tensor(rng, &[dk], 1.0)),
        ("wk", tensor(rng, &[c, dk], 1.0)),
        ("wv", tensor(rng, &[c, c], 1.0)),
        ("bv", tensor(rng, &[c], 1.0)),
    ]);
    case("position_attention", inputs, move |t, p| {
        let params = PositionAttentionParams {
            wq: p.var("wq")?,
            bq: p.var("bq")?,
            wk: p.var("wk")?,
            wv: p.var("wv")?,
            bv: p.var("bv")?,
        };
        let y = backbone::position_attention(t, p.var("x")?, &params, 256)?;
        project(t, y, &w)
    })
}

fn decoder_case(name: &'static str, rng: &mut ChaCha8Rng, mode: ComplementMode) -> GradCase {
    let cfg = DecoderConfig {
        num_layers: 1,
        hidden_dim: rng.gen_range(2..=6),
        num_classes: rng.gen_range(1..=4),
        complement_mode: mode,
    };
    let (h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=3));
    let (c, d, n) = (cfg.num_classes, cfg.hidden_dim, h * w);
    let w_causal = weights(rng, c * d);
    let w_conf = weights(rng, c * d);
    let inputs = store(vec![
        ("q", tensor(rng, &[c, d], 1.0)),
        ("f", tensor(rng, &[n, d], 1.0)),
        ("pe", tensor(rng, &[n, d], 1.0)),
        ("decoder.query_embed", tensor(rng, &[c, d], 1.0)),
    ]);
    case(name, inputs, move |t, p| {
        let f = p.var("f")?;
        let f_pos = t.add(f, p.var("pe")?)?;
        let fmap = FeatureMap { f, f_pos, h, w, d };
        let out = decoder::decode_layer(t, p.var("q")?, &fmap, p, &cfg)?;
        let a = project(t, out.q_causal, &w_causal)?;
        let b = project(t, out.q_conf, &w_conf)?;
        t.add(a, b)
    })
}

fn mk_decode_verbatim(rng: &mut ChaCha8Rng) -> GradCase {
    decoder_case("decode_layer_verbatim", rng, ComplementMode::Verbatim)
}

fn mk_decode_renormalized(rng: &mut ChaCha8Rng) -> GradCase {
    decoder_case("decode_layer_renormalized", rng, ComplementMode::Renormalized)
}

fn mk_feed_forward(rng: &mut ChaCha8Rng) -> GradCase {
    let (c, d, f) = (dim(rng), dim(rng), dim(rng));
    let w = weights(rng, c * d);
    let inputs = store(vec![
        ("q", tensor(rng, &[c, d], 1.0)),
        ("decoder.layer0.ffn.w1", tensor(rng, &[d, f], 1.0)),
        ("decoder.layer0.ffn.b1", tensor(rng, &[f], 1.0)),
        ("decoder.layer0.ffn.w2", tensor(rng, &[f, d], 1.0)),
        ("decoder.layer0.ffn.b2", tensor(rng, &[d], 1.0)),
    ]);
    case("feed_forward", inputs, move |t, p| {
        let y = decoder::feed_forward(t, p.var("q")?, p, 0)?;
        project(t, y, &w)
    })
}

fn head_params(rng: &mut ChaCha8Rng, c: usize, d: usize, dp: usize) -> Vec<(String, Tensor)> {
    let mut v = Vec::new();
    for m in [causal::CAUSAL_MLP, causal::CONF_MLP] {
        v.push((format!("{m}.w1"), tensor(rng, &[d, d], 1.0)));
        v.push((format!("{m}.b1"), tensor(rng, &[d], 1.0)));
        v.push((format!("{m}.w2"), tensor(rng, &[d, dp], 1.0)));
        v.push((format!("{m}.b2"), tensor(rng, &[dp], 1.0)));
    }
    for cls in [causal::CAUSAL_CLS, causal::CONF_CLS, causal::INTERV_CLS] {
        v.push((format!("{cls}.w"), tensor(rng, &[c, dp], 1.0)));
        v.push((format!("{cls}.b"), tensor(rng, &[c], 1.0)));
    }
    v
}

fn owned_store(pairs: Vec<(String, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in pairs {
        s.insert(n, t).expect("unique names");
    }
    s
}

fn mk_heads(rng: &mut ChaCha8Rng) -> GradCase {
    let (c, d, dp) = (rng.gen_range(1..=4), dim(rng), dim(rng));
    let targets: Vec<f64> = (0..c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mut pairs = head_params(rng, c, d, dp);
    pairs.push(("q_causal".into(), tensor(rng, &[c, d], 1.0)));
    pairs.push(("q_conf".into(), tensor(rng, &[c, d], 1.0)));
    let wc = weights(rng, c);
    case("heads", owned_store(pairs), move |t, p| {
        let q = decoder::QueryState {
            q_causal: p.var("q_causal")?,
            q_conf: p.var("q_conf")?,
            layer_index: 1,
            attention: p.var("q_causal")?,
        };
        let out = causal::heads(t, &q, p)?;
        let l = causal::loss_sl(t, out.z_x, &targets, LossForm::MultiLabel)?;
        let c_part = project(t, out.z_c, &wc)?;
        t.add(l, c_part)
    })
}

fn mk_loss_conf(rng: &mut ChaCha8Rng) -> GradCase {
    let n = rng.gen_range(2..=6);
    let z = tensor(rng, &[n], 3.0);
    case("loss_conf", store(vec![("z", z)]), |t, p| causal::loss_conf(t, p.var("z")?))
}

fn mk_loss_bd(rng: &mut ChaCha8Rng) -> GradCase {
    let (c, dp, n) = (rng.gen_range(1..=4), dim(rng), rng.gen_range(2..=4));
    let names_x: Vec<String> = (0..n).map(|i| format!("h_x{i}")).collect();
    let names_c: Vec<String> = (0..n).map(|i| format!("h_c{i}")).collect();
    let labels: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
        .collect();
    let strata_seed = rng.gen();
    let mut pairs = vec![
        (format!("{}.w", causal::INTERV_CLS), tensor(rng, &[c, dp], 1.0)),
        (format!("{}.b", causal::INTERV_CLS), tensor(rng, &[c], 1.0)),
    ];
    for nm in names_x.iter().chain(&names_c) {
        pairs.push((nm.clone(), tensor(rng, &[c, dp], 1.0)));
    }
    case("loss_bd", owned_store(pairs), move |t, p| {
        let hc = names_c.iter().map(|nm| p.var(nm)).collect::<Result<Vec<_>>>()?;
        let strata = causal::sample_strata(&hc, strata_seed)?;
        let mut z_hat = Vec::with_capacity(n);
        for (nm, &s) in names_x.iter().zip(&strata.strata) {
            z_hat.push(causal::intervene(t, p.var(nm)?, s, p)?);
        }
        let refs: Vec<&[f64]> = labels.iter().map(Vec::as_slice).collect();
        causal::loss_bd(t, &z_hat, &refs, LossForm::MultiLabel)
    })
}

/// Small configuration of the full network used by the end-to-end case.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: (8, 8),
            input_channels: 1,
            stage_channels: vec![4, 8],
            stage_kernels: vec![4, 2],
            hidden_dim: 8,
            attention: true,
            branch_kernels: (3, 5),
            branch_channels: 3,
            gate_bottleneck: 2,
            key_dim: 2,
            attention_budget: 256,
        },
        decoder: DecoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_classes: 3,
            complement_mode: ComplementMode::Verbatim,
        },
        feature_dim: 4,
        loss_form: LossForm::MultiLabel,
    }
}

fn mk_full_model(rng: &mut ChaCha8Rng) -> GradCase {
    let cfg = tiny_model_config();
    let mut model = Model::init(cfg.clone(), rng.gen()).expect("tiny config is valid");
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let images: Vec<Tensor> = (0..2)
        .map(|_| Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("shape"))
        .collect();
    let labels: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..3).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
        .collect();
    let (a1, a2) = (rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0));
    let inputs = model.params.clone();
    case("full_model", inputs, move |t, p| {
        let mut sl = Vec::new();
        let mut conf = Vec::new();
        let mut hx = Vec::new();
        let mut hc = Vec::new();
        for (img, y) in images.iter().zip(&labels) {
            let out = model.forward(t, p, img)?;
            sl.push(causal::loss_sl(t, out.heads.z_x, y, LossForm::MultiLabel)?);
            conf.push(causal::loss_conf(t, out.heads.z_c)?);
            hx.push(out.heads.h_x);
            hc.push(out.heads.h_c);
        }
        let z0 = causal::intervene(t, hx[0], hc[1], p)?;
        let z1 = causal::intervene(t, hx[1], hc[0], p)?;
        let l_sl = causal::mean_of(t, &sl)?;
        let l_conf = causal::mean_of(t, &conf)?;
        let l_bd = causal::loss_bd(t, &[z0, z1], &[&labels[0], &labels[1]], LossForm::MultiLabel)?;
        causal::total_loss_var(t, l_sl, Some(l_conf), Some(l_bd), a1, a2)
    })
}

const CATALOG: &[Maker] = &[
    mk_matmul,
    mk_transpose,
    mk_add,
    mk_sub,
    mk_mul,
    mk_add_row_bias,
    mk_add_channel_bias,
    mk_scale_channels,
    mk_affine,
    mk_scale,
    mk_relu,
    mk_sigmoid,
    mk_softplus,
    mk_softmax_rows,
    mk_log_softmax_rows,
    mk_conv2d,
    mk_global_average_pool,
    mk_reshape,
    mk_concat,
    mk_sum,
    mk_mean,
    mk_sum_rows,
    mk_bce,
    mk_fan_out,
    mk_channel_attention,
    mk_position_attention,
    mk_decode_verbatim,
    mk_decode_renormalized,
    mk_feed_forward,
    mk_heads,
    mk_loss_conf,
    mk_loss_bd,
    mk_full_model,
];

/// Names of the catalog entries, in catalog order.
pub fn catalog_names() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    CATALOG.iter().map(|m| m(&mut rng).name).collect()
}

/// `instances` randomized cases per catalog entry. Draws whose relu inputs
/// fall within [`RELU_MARGIN`] of zero are replaced by fresh draws.
pub fn op_catalog(seed: u64, instances: usize) -> Result<Vec<GradCase>> {
    let mut out = Vec::with_capacity(CATALOG.len() * instances);
    for (op, make) in CATALOG.iter().enumerate() {
        for i in 0..instances {
            let mut accepted = None;
            for attempt in 0..64u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (attempt << 40));
                rng.set_stream(((op as u64) << 32) | i as u64);
                let case = make(&mut rng);
                let (tape, _, _) = evaluate(&case, &case.inputs)?;
                if tape.min_relu_margin() >= RELU_MARGIN {
                    accepted = Some(case);
                    break;
                }
            }
            out.push(accepted.ok_or_else(|| {
                Error::Numeric(format!("catalog entry {op} instance {i}: no draw clear of relu kinks"))
            })?);
        }
    }
    Ok(out)
}
