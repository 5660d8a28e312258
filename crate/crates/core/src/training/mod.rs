//! Optimizer, schedules, and the pre-training, fine-tuning and evaluation loops.

mod augment;
mod eval;
mod finetune;
mod optim;
mod pretrain;
mod schedule;

use std::collections::BTreeMap;

pub use augment::{clip_starts, eval_crops, random_resized_crop, resample, Crop, CROP_SCALE};
pub use eval::{argmax, evaluate, late_fuse, tally_accuracy, EvalConfig, EvalResult};
pub use finetune::{finetune, FinetuneConfig, FinetuneMetrics, FinetuneRun};
pub use optim::{AdamW, OptimState};
pub use pretrain::{cross_view_probe, pretrain, CrossViewProbe, PretrainConfig, PretrainRun, StepMetrics};
pub use schedule::{layerwise_lr, Schedule, DEFAULT_MIN_LR};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::synthdata::{ClipTensor, Dataset};
use crate::tokenizer::PatchConfig;

pub const THREADS_ENV: &str = "MV2MAE_THREADS";

/// Optimizer and schedule settings shared by both training loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub adamw: AdamW,
}

/// Worker threads from `MV2MAE_THREADS`, default 1. Results do not depend
/// on this value: per-sample work is reduced in a fixed order.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(
                THREADS_ENV,
                format!("expected a positive integer, got {s:?}"),
            )),
        },
    }
}

pub(crate) fn pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::invalid("thread pool", e.to_string()))
}

/// Checks that dataset clips can feed a model with this patch config.
pub fn check_dataset(ds: &Dataset, patch: &PatchConfig) -> Result<()> {
    if ds.samples.is_empty() {
        return Err(Error::config("dataset", "dataset has no samples"));
    }
    if ds.channels != patch.channels {
        return Err(Error::config(
            "channels",
            format!("dataset has {} channels, model expects {}", ds.channels, patch.channels),
        ));
    }
    if ds.frames < patch.frames {
        return Err(Error::config(
            "frames",
            format!("model needs {} frames, dataset has {}", patch.frames, ds.frames),
        ));
    }
    Ok(())
}

/// Frames `start..start+T` inside `crop`, resampled to the model's size.
pub fn model_clip(clip: &ClipTensor, start: usize, crop: Crop, patch: &PatchConfig) -> ClipTensor {
    resample(clip, start, patch.frames, crop, patch.height, patch.width)
}

/// Sum of per-item gradients, visited in item order, scaled by `scale`.
pub(crate) fn reduce_grads<T: Scalar>(
    items: Vec<BTreeMap<String, Tensor<T>>>,
    scale: f64,
) -> BTreeMap<String, Tensor<T>> {
    let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for g in items {
        for (k, t) in g {
            match acc.get_mut(&k) {
                Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(x, &y)| *x += y),
                None => {
                    acc.insert(k, t);
                }
            }
        }
    }
    let s = T::from_f64(scale);
    acc.values_mut()
        .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    acc
}
