//! Binary checkpoint of parameters and optimizer state.
//!
//! Layout (little endian): magic `CXRK`, version `u32`, header length `u32`,
//! UTF-8 header of `key=value` lines, then tensor records. Each record is
//! name length `u32`, name bytes, rank `u32`, dims as `u32`, and the values
//! as `f64`. Records appear as all parameters, then Adam first moments, then
//! Adam second moments, each group in parameter order.
//!
//! Header keys: `epoch`, `step_count`, `adam.*`, `arch.*` (keys that fix
//! parameter shapes; checked on load) and `config.*` (full run echo).

use std::collections::BTreeMap;
use std::path::Path;

use causal_cxr::model::{Model, ModelConfig};
use causal_cxr::numcore::{AdamConfig, OptimizerState, ParamStore, Tensor};
use causal_cxr::{Error, Result};

use crate::config::{architecture_pairs, RunConfig};

const MAGIC: &[u8; 4] = b"CXRK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    /// `(key, value)` pairs of the run that wrote the checkpoint.
    pub config_echo: Vec<(String, String)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("bad tensor name".into()))?;
        let rank = self.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: OptimizerState, epoch: usize, run: &RunConfig) -> Self {
        Self { model, optimizer, epoch, config_echo: run.to_pairs() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let o = &self.optimizer.config;
        let mut header = format!(
            "epoch={}\nstep_count={}\nadam.learning_rate={}\nadam.weight_decay={}\nadam.beta1={}\nadam.beta2={}\nadam.epsilon={}\nadam.warmup_steps={}\n",
            self.epoch, self.optimizer.step_count, o.learning_rate, o.weight_decay, o.beta1, o.beta2, o.epsilon, o.warmup_steps
        );
        for (k, v) in architecture_pairs(&self.model.config) {
            header.push_str(&format!("arch.{k}={v}\n"));
        }
        for (k, v) in &self.config_echo {
            header.push_str(&format!("config.{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        let names = self.model.params.names();
        for (n, t) in names.iter().zip(self.model.params.tensors()) {
            put_tensor(&mut out, n, t);
        }
        for group in [&self.optimizer.first_moment, &self.optimizer.second_moment] {
            for (n, t) in names.iter().zip(group.iter()) {
                put_tensor(&mut out, n, t);
            }
        }
        out
    }

    /// Decodes a checkpoint for a run whose architecture is `expected`.
    pub fn from_bytes(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut kv = BTreeMap::new();
        let mut config_echo = Vec::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            if let Some(c) = k.strip_prefix("config.") {
                config_echo.push((c.to_string(), v.to_string()));
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let mismatched: Vec<String> = architecture_pairs(expected)
            .into_iter()
            .filter(|(k, v)| kv.get(&format!("arch.{k}")) != Some(v))
            .map(|(k, v)| format!("{k} (checkpoint {}, run {v})", kv.get(&format!("arch.{k}")).map_or("missing", |s| s)))
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::Checkpoint(format!("architecture mismatch: {}", mismatched.join(", "))));
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("header lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad {k}"))) };
        let adam = AdamConfig {
            learning_rate: num("adam.learning_rate")?,
            weight_decay: num("adam.weight_decay")?,
            beta1: num("adam.beta1")?,
            beta2: num("adam.beta2")?,
            epsilon: num("adam.epsilon")?,
            warmup_steps: num("adam.warmup_steps")? as u64,
        };
        let template = Model::init(expected.clone(), 0)?;
        let names = template.params.names();
        let mut params = ParamStore::new();
        for (name, want) in names.iter().zip(template.params.tensors()) {
            let (n, t) = r.tensor()?;
            if &n != name || t.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n} {:?} where {name} {:?} was expected",
                    t.shape(),
                    want.shape()
                )));
            }
            params.insert(n, t)?;
        }
        let mut moments = [Vec::new(), Vec::new()];
        for group in moments.iter_mut() {
            for name in names {
                let (n, t) = r.tensor()?;
                if &n != name {
                    return Err(Error::Checkpoint(format!("optimizer entry {n} where {name} was expected")));
                }
                group.push(t);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let [first_moment, second_moment] = moments;
        Ok(Self {
            model: Model { config: expected.clone(), params },
            optimizer: OptimizerState {
                step_count: get("step_count")?.parse().map_err(|_| Error::Checkpoint("bad step_count".into()))?,
                first_moment,
                second_moment,
                config: adam,
            },
            epoch: get("epoch")?.parse().map_err(|_| Error::Checkpoint("bad epoch".into()))?,
            config_echo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, expected)
    }
}
