//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic, format version, objective tag, model config,
//! named parameter tensors in `ModelParams::params()` order, then optional
//! optimizer state and rng state. f64 payloads are written bit-for-bit, so a
//! save/load round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::NnError;
use crate::model::{BlockParams, ModelConfig, ModelParams};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STEPRLC1";

/// What a saved model was trained for. PPO refuses to initialize its critic
/// from anything but an ORM-objective checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Generator,
    Orm,
    Prm,
    Policy,
    Critic,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Generator => "generator",
            Objective::Orm => "orm",
            Objective::Prm => "prm",
            Objective::Policy => "policy",
            Objective::Critic => "critic",
        }
    }

    fn from_str(s: &str) -> Result<Self, NnError> {
        match s {
            "generator" => Ok(Objective::Generator),
            "orm" => Ok(Objective::Orm),
            "prm" => Ok(Objective::Prm),
            "policy" => Ok(Objective::Policy),
            "critic" => Ok(Objective::Critic),
            other => Err(NnError::Checkpoint(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub objective: Objective,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub rng_state: Option<[u64; 4]>,
}

impl Checkpoint {
    pub fn new(objective: Objective, params: ModelParams) -> Self {
        Self {
            objective,
            params,
            optimizer: None,
            rng_state: None,
        }
    }

    pub fn with_optimizer(mut self, opt: OptimizerState) -> Self {
        self.optimizer = Some(opt);
        self
    }

    pub fn with_rng(mut self, state: [u64; 4]) -> Self {
        self.rng_state = Some(state);
        self
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u64(&mut w, 1)?; // format version
    write_str(&mut w, ckpt.objective.as_str())?;

    let cfg = ckpt.params.cfg;
    for v in [cfg.vocab, cfg.dim, cfg.blocks, cfg.heads, cfg.context] {
        write_u64(&mut w, v as u64)?;
    }

    let named = ckpt.params.params();
    write_u64(&mut w, named.len() as u64)?;
    for (name, t) in &named {
        write_str(&mut w, name)?;
        write_tensor(&mut w, t)?;
    }

    match &ckpt.optimizer {
        None => write_u64(&mut w, 0)?,
        Some(opt) => {
            write_u64(&mut w, 1)?;
            write_u64(&mut w, opt.step as u64)?;
            for v in [
                opt.cfg.base_lr,
                opt.cfg.weight_decay,
                opt.cfg.beta1,
                opt.cfg.beta2,
                opt.cfg.eps,
            ] {
                write_f64(&mut w, v)?;
            }
            write_u64(&mut w, opt.cfg.horizon as u64)?;
            write_u64(&mut w, opt.m.len() as u64)?;
            for t in opt.m.iter().chain(opt.v.iter()) {
                write_tensor(&mut w, t)?;
            }
        }
    }

    match &ckpt.rng_state {
        None => write_u64(&mut w, 0)?,
        Some(s) => {
            write_u64(&mut w, 1)?;
            for &v in s {
                write_u64(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = read_u64(&mut r)?;
    if version != 1 {
        return Err(NnError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let objective = Objective::from_str(&read_str(&mut r)?)?;

    let cfg = ModelConfig {
        vocab: read_u64(&mut r)? as usize,
        dim: read_u64(&mut r)? as usize,
        blocks: read_u64(&mut r)? as usize,
        heads: read_u64(&mut r)? as usize,
        context: read_u64(&mut r)? as usize,
    };
    cfg.validate()?;

    let n_params = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_str(&mut r)?;
        let t = read_tensor(&mut r)?;
        tensors.push((name, t));
    }
    let params = assemble_params(cfg, tensors)?;

    let optimizer = if read_u64(&mut r)? == 1 {
        let step = read_u64(&mut r)? as usize;
        let base_lr = read_f64(&mut r)?;
        let weight_decay = read_f64(&mut r)?;
        let beta1 = read_f64(&mut r)?;
        let beta2 = read_f64(&mut r)?;
        let eps = read_f64(&mut r)?;
        let horizon = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(read_tensor(&mut r)?);
        }
        for _ in 0..n {
            v.push(read_tensor(&mut r)?);
        }
        Some(OptimizerState {
            cfg: OptimizerConfig {
                base_lr,
                weight_decay,
                horizon,
                beta1,
                beta2,
                eps,
            },
            step,
            m,
            v,
        })
    } else {
        None
    };

    let rng_state = if read_u64(&mut r)? == 1 {
        Some([
            read_u64(&mut r)?,
            read_u64(&mut r)?,
            read_u64(&mut r)?,
            read_u64(&mut r)?,
        ])
    } else {
        None
    };

    Ok(Checkpoint {
        objective,
        params,
        optimizer,
        rng_state,
    })
}

fn assemble_params(
    cfg: ModelConfig,
    tensors: Vec<(String, Tensor)>,
) -> Result<ModelParams, NnError> {
    let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |name: &str| {
        map.remove(name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor `{name}`")))
    };
    let embed = take("embed")?;
    let pos = take("pos")?;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for i in 0..cfg.blocks {
        blocks.push(BlockParams {
            wq: take(&format!("block{i}.wq"))?,
            wk: take(&format!("block{i}.wk"))?,
            wv: take(&format!("block{i}.wv"))?,
            wo: take(&format!("block{i}.wo"))?,
            w1: take(&format!("block{i}.w1"))?,
            w2: take(&format!("block{i}.w2"))?,
            ln1_gain: take(&format!("block{i}.ln1_gain"))?,
            ln1_bias: take(&format!("block{i}.ln1_bias"))?,
            ln2_gain: take(&format!("block{i}.ln2_gain"))?,
            ln2_bias: take(&format!("block{i}.ln2_bias"))?,
        });
    }
    let lm_head = take("lm_head")?;
    let value_head = take("value_head")?;
    let cls_head = take("cls_head")?;
    if !map.is_empty() {
        return Err(NnError::Checkpoint(format!(
            "unexpected extra tensors: {:?}",
            map.keys().collect::<Vec<_>>()
        )));
    }
    Ok(ModelParams {
        cfg,
        embed,
        pos,
        blocks,
        lm_head,
        value_head,
        cls_head,
    })
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    write_u64(w, t.rows as u64)?;
    write_u64(w, t.cols as u64)?;
    for &v in &t.data {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, NnError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, NnError> {
    let len = read_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(NnError::Checkpoint("string length out of range".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| NnError::Checkpoint("invalid utf-8 string".into()))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, NnError> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(NnError::Checkpoint("tensor size out of range".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok(Tensor::from_vec(rows, cols, data))
}
