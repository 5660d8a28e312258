use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::optim::{AdamW, OptimState};
use super::schedule::{Schedule, DEFAULT_MIN_LR};
use super::{check_dataset, model_clip, pool, random_resized_crop, reduce_grads, Crop, OptimConfig};
use crate::error::{Error, Result};
use crate::masking::{make_mask, MaskKey, MaskStrategy};
use crate::model::{Checkpoint, Forward, ModelConfig, ModelParams, Part};
use crate::numerics::Tensor;
use crate::objective::{pretrain_loss, reconstruction_loss, LossReport, ViewInput, Weighting};
use crate::rng::{keyed_rng, Domain};
use crate::synthdata::{Dataset, MultiViewSample};
use crate::tokenizer::{normalize_patch_targets, patchify, select_rows, TARGET_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub rho: f64,
    pub mask: MaskStrategy,
    pub weighting: Weighting,
    /// Multiply motion weights by N so a static clip matches the unweighted scale.
    pub rescale_weights: bool,
    pub lambda_cross: f64,
    pub n_source_views: usize,
    /// Train both directions of each pair instead of one random direction.
    pub symmetric: bool,
    /// Random-resized-crop shared by all views of a sample.
    pub augment: bool,
    /// Write a numbered checkpoint every this many steps (0: only the final one).
    pub save_every: usize,
}

impl PretrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        PretrainConfig {
            model,
            seed: 0,
            epochs: 200,
            batch_size: 16,
            optim: OptimConfig {
                lr: 1e-3,
                min_lr: DEFAULT_MIN_LR,
                warmup_epochs: 10,
                adamw: AdamW::pretrain(),
            },
            rho: 0.7,
            mask: MaskStrategy::Random,
            weighting: Weighting::Motion { temperature: 60.0 },
            rescale_weights: false,
            lambda_cross: 1.0,
            n_source_views: 1,
            symmetric: false,
            augment: true,
            save_every: 0,
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
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho", format!("must lie in (0, 1), got {}", self.rho)));
        }
        if let Weighting::Motion { temperature } = self.weighting {
            if !(temperature > 0.0) {
                return Err(Error::config(
                    "temperature",
                    format!("must be positive, got {temperature}"),
                ));
            }
        }
        if self.lambda_cross < 0.0 {
            return Err(Error::config("lambda_cross", "must be non-negative"));
        }
        if self.n_source_views == 0 || self.n_source_views + 1 > ds.n_views {
            return Err(Error::config(
                "n_source_views",
                format!(
                    "{} source views plus a target need {} views, dataset has {}",
                    self.n_source_views,
                    self.n_source_views + 1,
                    ds.n_views
                ),
            ));
        }
        if self.symmetric && self.n_source_views != 1 {
            return Err(Error::config("symmetric", "symmetric mode needs n_source_views = 1"));
        }
        self.schedule(ds.samples.len()).validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// 1-based update count.
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
}

impl StepMetrics {
    /// Tab-separated metrics line, without the newline.
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.lr, self.loss.total, self.loss.self_sv, self.loss.self_tv, self.loss.cross_tv
        )
    }
}

pub struct PretrainRun {
    pub params: ModelParams<f32>,
    pub optim: OptimState<f32>,
    pub metrics: Vec<StepMetrics>,
    /// Mean total loss of each epoch run in this call.
    pub epoch_means: Vec<f64>,
}

/// Per-sample randomness for one epoch: view roles, clip start and crop.
struct Draw {
    sources: Vec<usize>,
    target: usize,
    start: usize,
    crop: Crop,
}

fn draw(ds: &Dataset, cfg: &PretrainConfig, sample_id: u64, epoch: u64) -> Draw {
    let mut views: Vec<usize> = (0..ds.n_views).collect();
    views.shuffle(&mut keyed_rng(Domain::Views, &[cfg.seed, sample_id, epoch]));
    let span = ds.frames - cfg.model.patch.frames;
    let start = if span == 0 {
        0
    } else {
        keyed_rng(Domain::Crop, &[cfg.seed, sample_id, epoch, 0]).gen_range(0..=span)
    };
    let crop = if cfg.augment {
        random_resized_crop(ds.height, ds.width, &[cfg.seed, sample_id, epoch, 1])
    } else {
        Crop::full(ds.height, ds.width)
    };
    Draw {
        sources: views[..cfg.n_source_views].to_vec(),
        target: views[cfg.n_source_views],
        start,
        crop,
    }
}

fn view_input(s: &MultiViewSample, view: usize, d: &Draw, cfg: &PretrainConfig, epoch: u64) -> Result<ViewInput<f32>> {
    let patch = &cfg.model.patch;
    let clip = model_clip(&s.clips[view], d.start, d.crop, patch);
    let key = MaskKey {
        seed: cfg.seed,
        sample_id: s.sample_id as u64,
        epoch,
        view: view as u64,
    };
    let plan = make_mask(cfg.mask, patch.grid(), cfg.rho, key)?;
    ViewInput::new(&clip, patch, plan, cfg.weighting, cfg.rescale_weights)
}

type ItemResult = (std::collections::BTreeMap<String, Tensor<f32>>, LossReport);

fn item_gradients(
    ds: &Dataset,
    idx: usize,
    epoch: u64,
    params: &ModelParams<f32>,
    cfg: &PretrainConfig,
) -> Result<ItemResult> {
    let s = &ds.samples[idx];
    let d = draw(ds, cfg, s.sample_id as u64, epoch);
    let sources = d
        .sources
        .iter()
        .map(|&v| view_input(s, v, &d, cfg, epoch))
        .collect::<Result<Vec<_>>>()?;
    let tv = view_input(s, d.target, &d, cfg, epoch)?;
    let mut f = Forward::new(cfg.model, params);
    let (total, report) = if cfg.symmetric {
        let (a, ra) = pretrain_loss(&mut f, &sources, &tv, cfg.lambda_cross)?;
        let (b, rb) = pretrain_loss(&mut f, std::slice::from_ref(&tv), &sources[0], cfg.lambda_cross)?;
        let sum = f.g.add(a, b)?;
        let avg = |x: f64, y: f64| 0.5 * (x + y);
        let report = LossReport {
            total: avg(ra.total, rb.total),
            self_sv: avg(ra.self_sv, rb.self_sv),
            self_tv: avg(ra.self_tv, rb.self_tv),
            cross_tv: avg(ra.cross_tv, rb.cross_tv),
            ce: 0.0,
            masked_counts: ra.masked_counts,
        };
        (f.g.scale(sum, 0.5), report)
    } else {
        pretrain_loss(&mut f, &sources, &tv, cfg.lambda_cross)?
    };
    Ok((f.gradients(total)?, report))
}

fn mean_report(items: &[LossReport]) -> LossReport {
    let n = items.len() as f64;
    let mean = |f: fn(&LossReport) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossReport {
        total: mean(|r| r.total),
        self_sv: mean(|r| r.self_sv),
        self_tv: mean(|r| r.self_tv),
        cross_tv: mean(|r| r.cross_tv),
        ce: 0.0,
        masked_counts: items.first().map(|r| r.masked_counts.clone()).unwrap_or_default(),
    }
}

pub(crate) fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(Domain::Shuffle, &[seed, epoch]));
    order
}

pub(crate) fn open_metrics(dir: &Path, append: bool) -> Result<std::fs::File> {
    let path = dir.join("metrics.tsv");
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn save_checkpoint(
    dir: &Path,
    name: &str,
    cfg: ModelConfig,
    params: &ModelParams<f32>,
    optim: &OptimState<f32>,
) -> Result<()> {
    let mut c = Checkpoint::from_params(cfg, params);
    optim.save_into(&mut c);
    c.save(&dir.join(name))
}

/// Masked pre-training over ordered view pairs. With `out_dir`, writes
/// `metrics.tsv`, optional `step_NNNNNN.mv2c` snapshots and a final
/// `checkpoint.mv2c`. `resume` continues from a saved checkpoint.
pub fn pretrain(
    ds: &Dataset,
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<PretrainRun> {
    cfg.validate(ds)?;
    let sched = cfg.schedule(ds.samples.len());
    let (mut params, mut optim) = match resume {
        Some(path) => {
            let c = Checkpoint::load(path)?;
            if c.config != cfg.model {
                return Err(Error::config(
                    "resume",
                    "checkpoint model config differs from the run config",
                ));
            }
            (c.params::<f32>(""), OptimState::load_from(&c, cfg.optim.adamw)?)
        }
        None => (
            ModelParams::init(&cfg.model, Part::Pretrain, cfg.seed)?,
            OptimState::new(cfg.optim.adamw),
        ),
    };
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(open_metrics(d, resume.is_some())?)
        }
        None => None,
    };
    let pool = pool()?;
    let spe = sched.steps_per_epoch;
    let start = optim.step as usize;
    let mut metrics = Vec::new();
    let mut epoch_means = Vec::new();
    let mut epoch_acc = (0.0, 0usize);
    for k in start..sched.total_steps() {
        let epoch = (k / spe) as u64;
        let order = epoch_order(ds.samples.len(), cfg.seed, epoch);
        let b = k % spe;
        let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
        let results: Vec<Result<ItemResult>> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| item_gradients(ds, i, epoch, &params, cfg))
                .collect()
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let (grads, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let grads = reduce_grads(grads, 1.0 / batch.len() as f64);
        let lr = sched.lr_at(k);
        optim.step(&mut params, &grads, lr, &|_| 1.0)?;
        let m = StepMetrics {
            step: k + 1,
            lr,
            loss: mean_report(&reports),
        };
        epoch_acc.0 += reports.iter().map(|r| r.total).sum::<f64>();
        epoch_acc.1 += reports.len();
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", m.line()).map_err(|e| Error::io("metrics.tsv", e))?;
        }
        metrics.push(m);
        if b + 1 == spe {
            epoch_means.push(epoch_acc.0 / epoch_acc.1 as f64);
            epoch_acc = (0.0, 0);
        }
        if let Some(d) = out_dir {
            if cfg.save_every > 0 && (k + 1) % cfg.save_every == 0 {
                save_checkpoint(d, &format!("step_{:06}.mv2c", k + 1), cfg.model, &params, &optim)?;
            }
        }
    }
    if let Some(d) = out_dir {
        save_checkpoint(d, "checkpoint.mv2c", cfg.model, &params, &optim)?;
    }
    Ok(PretrainRun {
        params,
        optim,
        metrics,
        epoch_means,
    })
}

/// Cross-view reconstruction error on view 1 from view 0, next to the
/// baseline that copies the co-located view-0 patch. Both are unweighted
/// masked MSEs on normalized targets, averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossViewProbe {
    pub cross_mse: f64,
    pub copy_mse: f64,
    pub self_mse: f64,
}

pub fn cross_view_probe(ds: &Dataset, params: &ModelParams<f32>, cfg: &PretrainConfig) -> Result<CrossViewProbe> {
    check_dataset(ds, &cfg.model.patch)?;
    if ds.n_views < 2 {
        return Err(Error::config("views", "cross-view probe needs two views"));
    }
    let patch = cfg.model.patch;
    let probe_epoch = u64::MAX;
    let per_sample = |s: &MultiViewSample| -> Result<(f64, f64, f64)> {
        let d = Draw {
            sources: vec![0],
            target: 1,
            start: (ds.frames - patch.frames) / 2,
            crop: Crop::full(ds.height, ds.width),
        };
        let sv = view_input(s, 0, &d, cfg, probe_epoch)?;
        let tv = view_input(s, 1, &d, cfg, probe_epoch)?;
        let mut f = Forward::new(cfg.model, params);
        let xs = f.embed(&sv.visible_patches, &sv.plan.visible)?;
        let es = f.encoder(xs, None)?;
        let src = f.project_source(es, &sv.plan.visible)?;
        let xt = f.embed(&tv.visible_patches, &tv.plan.visible)?;
        let et = f.encoder(xt, None)?;
        let full = f.assemble_decoder_input(et, &tv.plan)?;
        let pc = f.cross_view_decoder(full, &[src], Some(&tv.plan.masked))?;
        let ps = f.self_view_decoder(full, Some(&tv.plan.masked))?;
        let lc = reconstruction_loss(&mut f.g, pc, &tv.masked_targets, None)?;
        let ls = reconstruction_loss(&mut f.g, ps, &tv.masked_targets, None)?;
        let raw = patchify::<f32>(&model_clip(&s.clips[0], d.start, d.crop, &patch), &patch)?;
        let copy = select_rows(&normalize_patch_targets(&raw, TARGET_EPS), &tv.plan.masked);
        let pcopy = f.g.constant(copy);
        let lcopy = reconstruction_loss(&mut f.g, pcopy, &tv.masked_targets, None)?;
        let v = |x| f.g.value(x).item() as f64;
        Ok((v(lc), v(lcopy), v(ls)))
    };
    let rows: Vec<Result<(f64, f64, f64)>> = pool()?.install(|| ds.samples.par_iter().map(per_sample).collect());
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(CrossViewProbe {
        cross_mse: rows.iter().map(|r| r.0).sum::<f64>() / n,
        copy_mse: rows.iter().map(|r| r.1).sum::<f64>() / n,
        self_mse: rows.iter().map(|r| r.2).sum::<f64>() / n,
    })
}
