use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::eval::argmax;
use super::optim::{AdamW, OptimState};
use super::pretrain::{epoch_order, open_metrics, save_checkpoint};
use super::schedule::{layerwise_lr, Schedule, DEFAULT_MIN_LR};
use super::{check_dataset, model_clip, pool, reduce_grads, Crop, OptimConfig};
use crate::error::{Error, Result};
use crate::model::{layer_id, DropPath, Forward, ModelConfig, ModelParams, Part};
use crate::numerics::{Scalar, Tensor};
use crate::objective::cross_entropy_in;
use crate::rng::{keyed_rng, Domain};
use crate::synthdata::Dataset;
use crate::tokenizer::{patchify, standardize_clip};

const ENCODER_PREFIXES: [&str; 2] = ["embed.", "enc."];

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    /// `n_classes` and `drop_path_rate` are taken from here.
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub layer_decay: f64,
    pub label_smoothing: f64,
    /// Train only the classifier on a frozen encoder.
    pub probe: bool,
    pub flip: bool,
}

impl FinetuneConfig {
    pub fn new(mut model: ModelConfig, n_classes: usize) -> Self {
        model.n_classes = n_classes;
        model.drop_path_rate = 0.1;
        FinetuneConfig {
            model,
            seed: 0,
            epochs: 50,
            batch_size: 16,
            optim: OptimConfig {
                lr: 1e-3,
                min_lr: DEFAULT_MIN_LR,
                warmup_epochs: 5,
                adamw: AdamW::finetune(),
            },
            layer_decay: 0.9,
            label_smoothing: 0.1,
            probe: false,
            flip: true,
        }
    }

    pub fn schedule(&self, n_samples: usize) -> Schedule {
        Schedule {
            base_lr: self.optim.lr,
            min_lr: self.optim.min_lr,
            warmup_epochs: self.optim.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch: n_samples.div_ceil(self.batch_size.max(1)),
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        self.model.validate()?;
        check_dataset(ds, &self.model.patch)?;
        if self.model.n_classes == 0 {
            return Err(Error::config("n_classes", "must be positive"));
        }
        if let Some(s) = ds.samples.iter().find(|s| s.label as usize >= self.model.n_classes) {
            return Err(Error::config(
                "n_classes",
                format!(
                    "sample {} has label {} >= {}",
                    s.sample_id, s.label, self.model.n_classes
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::config("layer_decay", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        self.schedule(ds.samples.len()).validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneMetrics {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    /// Training accuracy of the batch.
    pub acc: f64,
}

impl FinetuneMetrics {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.step, self.lr, self.ce, self.acc)
    }
}

pub struct FinetuneRun {
    pub params: ModelParams<f32>,
    pub metrics: Vec<FinetuneMetrics>,
}

/// Logits of one clip: all tokens encoded, mean pooled, classified.
pub(crate) fn classify<T: Scalar>(
    f: &mut Forward<'_, T>,
    clip: &crate::synthdata::ClipTensor,
    drop: Option<&DropPath>,
) -> Result<crate::numerics::Var> {
    let patch = f.cfg.patch;
    let patches: Tensor<T> = patchify(&standardize_clip(clip), &patch)?;
    let all: Vec<usize> = (0..patch.num_tokens()).collect();
    let x = f.embed(&patches, &all)?;
    let e = f.encoder(x, drop)?;
    f.classifier(e)
}

/// Supervised training of the encoder plus a fresh classifier head.
/// `pretrained` supplies the encoder weights; `None` is the random-init control.
pub fn finetune(
    ds: &Dataset,
    pretrained: Option<&ModelParams<f32>>,
    cfg: &FinetuneConfig,
    out_dir: Option<&Path>,
) -> Result<FinetuneRun> {
    cfg.validate(ds)?;
    let mut params = ModelParams::<f32>::init(&cfg.model, Part::Classifier, cfg.seed)?;
    if let Some(src) = pretrained {
        params.load_matching(src, &ENCODER_PREFIXES)?;
    }
    let sched = cfg.schedule(ds.samples.len());
    let mut optim = OptimState::new(cfg.optim.adamw);
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(open_metrics(d, false)?)
        }
        None => None,
    };
    let depth = cfg.model.enc_depth + 1;
    let scales: BTreeMap<String, f64> = params
        .tensors
        .keys()
        .map(|k| {
            (
                k.clone(),
                layerwise_lr(1.0, layer_id(k, cfg.model.enc_depth), depth, cfg.layer_decay),
            )
        })
        .collect();
    let frozen: &[&str] = if cfg.probe { &ENCODER_PREFIXES } else { &[] };
    let pool = pool()?;
    let spe = sched.steps_per_epoch;
    let mut metrics = Vec::new();
    for k in 0..sched.total_steps() {
        let epoch = (k / spe) as u64;
        let order = epoch_order(ds.samples.len(), cfg.seed ^ 0x5eed, epoch);
        let b = k % spe;
        let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
        let item = |&i: &usize| -> Result<(BTreeMap<String, Tensor<f32>>, f64, bool)> {
            let s = &ds.samples[i];
            let sid = s.sample_id as u64;
            let mut rng = keyed_rng(Domain::Views, &[cfg.seed, sid, epoch, 1]);
            let view = rng.gen_range(0..ds.n_views);
            let start = rng.gen_range(0..=ds.frames - cfg.model.patch.frames);
            let mut crop = Crop::full(ds.height, ds.width);
            crop.flip = cfg.flip && rng.gen_bool(0.5);
            let clip = model_clip(&s.clips[view], start, crop, &cfg.model.patch);
            let drop = DropPath {
                rate: cfg.model.drop_path_rate,
                seed: cfg.seed,
                sample: sid,
                epoch,
            };
            let mut f = Forward::new(cfg.model, &params).freeze(frozen);
            let logits = classify(&mut f, &clip, Some(&drop))?;
            let correct = argmax(&f.g.value(logits).to_f64_vec()) == s.label as usize;
            let loss = cross_entropy_in(&mut f.g, logits, s.label as usize, cfg.label_smoothing)?;
            let ce = f.g.value(loss).item() as f64;
            Ok((f.gradients(loss)?, ce, correct))
        };
        let results: Vec<Result<_>> = pool.install(|| batch.par_iter().map(item).collect());
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        let ce = results.iter().map(|r| r.1).sum::<f64>() / n;
        let acc = results.iter().filter(|r| r.2).count() as f64 / n;
        let grads = reduce_grads(results.into_iter().map(|r| r.0).collect(), 1.0 / n);
        let lr = sched.lr_at(k);
        optim.step(&mut params, &grads, lr, &|name| {
            scales.get(name).copied().unwrap_or(1.0)
        })?;
        let m = FinetuneMetrics {
            step: k + 1,
            lr,
            ce,
            acc,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", m.line()).map_err(|e| Error::io("metrics.tsv", e))?;
        }
        metrics.push(m);
    }
    if let Some(d) = out_dir {
        save_checkpoint(d, "checkpoint.mv2c", cfg.model, &params, &optim)?;
    }
    Ok(FinetuneRun { params, metrics })
}
