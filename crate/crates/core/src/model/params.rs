use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};
use crate::rng::{keyed_rng, Domain};

const MAGIC: &[u8; 4] = b"MV2C";
const VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;
const CONFIG_KEY: &str = "meta.model_config";

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

/// Which parts of the network to allocate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    /// Encoder, projector, mask token, both decoders and output projector.
    Pretrain,
    /// Encoder and classifier head.
    Classifier,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    name.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn trunc_normal<T: Scalar>(shape: &[usize], seed: u64, name: &str) -> Tensor<T> {
    let mut rng = keyed_rng(Domain::Init, &[seed, name_hash(name)]);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(&mut rng);
            if x.abs() <= 2.0 * INIT_STD {
                break T::from_f64(x);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

struct Builder<T> {
    seed: u64,
    out: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Builder<T> {
    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        let w = format!("{prefix}.weight");
        self.out.insert(w.clone(), trunc_normal(&[din, dout], self.seed, &w));
        self.out.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.out.insert(format!("{prefix}.gain"), Tensor::full(&[d], T::one()));
        self.out.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d);
        }
    }

    fn block(&mut self, prefix: &str, d: usize, mlp: usize) {
        self.norm(&format!("{prefix}.norm1"), d);
        self.attention(&format!("{prefix}.attn"), d);
        self.norm(&format!("{prefix}.norm2"), d);
        self.linear(&format!("{prefix}.mlp.fc1"), d, mlp);
        self.linear(&format!("{prefix}.mlp.fc2"), mlp, d);
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters. Each tensor draws from its own keyed stream, so the
    /// values do not depend on which other parts are allocated.
    pub fn init(cfg: &ModelConfig, part: Part, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            seed,
            out: BTreeMap::new(),
        };
        let p = cfg.patch.patch_dim();
        b.linear("embed", p, cfg.d_enc);
        for i in 0..cfg.enc_depth {
            b.block(&format!("enc.{i}"), cfg.d_enc, cfg.enc_mlp);
        }
        match part {
            Part::Pretrain => {
                b.linear("proj", cfg.d_enc, cfg.d_dec);
                b.out
                    .insert("mask_token".into(), trunc_normal(&[cfg.d_dec], seed, "mask_token"));
                for i in 0..cfg.dec_depth {
                    b.block(&format!("self_dec.{i}"), cfg.d_dec, cfg.dec_mlp);
                    let c = format!("cross_dec.{i}");
                    b.norm(&format!("{c}.norm_q"), cfg.d_dec);
                    b.norm(&format!("{c}.norm_kv"), cfg.d_dec);
                    b.attention(&format!("{c}.xattn"), cfg.d_dec);
                    b.block(&c, cfg.d_dec, cfg.dec_mlp);
                }
                b.norm("self_dec.norm", cfg.d_dec);
                b.norm("cross_dec.norm", cfg.d_dec);
                b.linear("out", cfg.d_dec, p);
            }
            Part::Classifier => {
                if cfg.n_classes == 0 {
                    return Err(Error::config("n_classes", "classifier needs at least one class"));
                }
                b.norm("head.norm", cfg.d_enc);
                b.linear("head.fc", cfg.d_enc, cfg.n_classes);
            }
        }
        Ok(ModelParams { tensors: b.out })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint {
            name: name.to_string(),
            msg: "missing".into(),
        })
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copies every tensor of `src` that `self` also holds, checking shapes.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, src: &ModelParams<T>, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.tensors.iter_mut() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let s = src.get(name)?;
            if s.shape() != t.shape() {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    msg: format!("shape {:?} in checkpoint, {:?} expected", s.shape(), t.shape()),
                });
            }
            *t = s.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Whether AdamW skips weight decay for this parameter.
pub fn no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain") || name == "mask_token"
}

/// Depth index for layer-wise learning-rate decay: embedder 0, encoder block
/// `i` at `i + 1`, everything after the encoder at `depth + 1`.
pub fn layer_id(name: &str, enc_depth: usize) -> usize {
    if name.starts_with("embed.") {
        return 0;
    }
    if let Some(rest) = name.strip_prefix("enc.") {
        if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return i + 1;
        }
    }
    enc_depth + 1
}

/// Tensor of either precision, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

/// Ordered collection of named tensors plus the model config.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: BTreeMap<String, AnyTensor>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| fmt_err(format!("truncated: {e}")))?;
    Ok(b)
}

impl Checkpoint {
    pub fn new(config: ModelConfig) -> Self {
        Checkpoint {
            config,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_params<T: Scalar>(config: ModelConfig, params: &ModelParams<T>) -> Self {
        let mut c = Checkpoint::new(config);
        c.insert_params("", params);
        c
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let v = match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        };
        self.entries.insert(name.into(), v);
    }

    pub fn insert_params<T: Scalar>(&mut self, prefix: &str, params: &ModelParams<T>) {
        for (k, t) in &params.tensors {
            self.insert(format!("{prefix}{k}"), t);
        }
    }

    /// Entries under `prefix`, with the prefix stripped. Names containing
    /// `meta.` or `optim.` are never model parameters.
    pub fn params<T: Scalar>(&self, prefix: &str) -> ModelParams<T> {
        let tensors = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(prefix)?;
                if prefix.is_empty() && (k.starts_with("meta.") || k.starts_with("optim.")) {
                    return None;
                }
                Some((rest.to_string(), v.to()))
            })
            .collect();
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.get(name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let mut all: Vec<(&str, AnyTensor)> = Vec::with_capacity(self.entries.len() + 1);
        let meta = AnyTensor::F64(Tensor::from_f64(&[17], &self.config.to_vec()).expect("config length"));
        all.push((CONFIG_KEY, meta));
        all.extend(
            self.entries
                .iter()
                .filter(|(k, _)| k.as_str() != CONFIG_KEY)
                .map(|(k, v)| (k.as_str(), v.clone())),
        );
        all.sort_by(|a, b| a.0.cmp(b.0));
        buf.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in &all {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| fmt_err(format!("name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.push(t.dtype().code());
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut buf)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut buf)),
            }
        }
        w.write_all(&buf).map_err(|e| fmt_err(e.to_string()))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(read_exact(r)?);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| fmt_err(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|_| fmt_err("name is not UTF-8"))?;
            let rank = read_exact::<1>(r)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
            }
            let dtype =
                DType::from_code(read_exact::<1>(r)?[0]).ok_or_else(|| fmt_err(format!("unknown dtype for {name}")))?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * dtype.size()];
            r.read_exact(&mut raw).map_err(|e| fmt_err(format!("{name}: {e}")))?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(
                    &shape,
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )?),
                DType::F64 => AnyTensor::F64(Tensor::new(
                    &shape,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )?),
            };
            if entries.insert(name.clone(), t).is_some() {
                return Err(fmt_err(format!("duplicate entry {name}")));
            }
        }
        let meta = entries
            .remove(CONFIG_KEY)
            .ok_or_else(|| fmt_err("missing model config"))?;
        let config = ModelConfig::from_vec(&meta.to::<f64>().into_data())?;
        Ok(Checkpoint { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }
}

/// Uniform draw used for the drop-path coin; kept here so all keyed streams
/// of the model live in one file.
pub(crate) fn keep_branch(seed: u64, sample: u64, epoch: u64, block: u64, keep_prob: f64) -> bool {
    keyed_rng(Domain::DropPath, &[seed, sample, epoch, block]).gen::<f64>() < keep_prob
}
