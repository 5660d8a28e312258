use rayon::prelude::*;

use super::finetune::classify;
use super::{check_dataset, clip_starts, eval_crops, model_clip, pool};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelConfig, ModelParams};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_clips: usize,
    pub n_crops: usize,
    /// Views to classify; more than one are late-fused.
    pub views: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_clips: 1,
            n_crops: 1,
            views: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub labels: Vec<u32>,
    /// `[sample][view][class]`, each averaged over clips and crops.
    pub per_view: Vec<Vec<Vec<f64>>>,
    /// `[sample][class]`, mean over views.
    pub fused: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    /// Accuracy of the fused predictions.
    pub accuracy: f64,
    /// Accuracy of each view on its own.
    pub view_accuracy: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean of per-view logits, then argmax. Input is `[sample][view][class]`.
pub fn late_fuse(per_view: &[Vec<Vec<f64>>]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let views = per_view.first().map_or(0, |s| s.len());
    let mut fused = Vec::with_capacity(per_view.len());
    for (i, s) in per_view.iter().enumerate() {
        if s.is_empty() || s.len() != views {
            return Err(Error::invalid(
                "late_fuse",
                format!("sample {i} has {} views, expected {views} (at least 1)", s.len()),
            ));
        }
        let k = s[0].len();
        if s.iter().any(|v| v.len() != k) {
            return Err(Error::invalid("late_fuse", format!("sample {i} mixes class counts")));
        }
        fused.push(
            (0..k)
                .map(|c| s.iter().map(|v| v[c]).sum::<f64>() / views as f64)
                .collect::<Vec<f64>>(),
        );
    }
    let preds = fused.iter().map(|l| argmax(l)).collect();
    Ok((fused, preds))
}

/// Share of argmax predictions equal to the label.
pub fn tally_accuracy(logits: &[Vec<f64>], labels: &[u32]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| argmax(l) == y as usize)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Multi-clip, multi-crop classification of every sample, fused over views.
pub fn evaluate(ds: &Dataset, params: &ModelParams<f32>, model: &ModelConfig, cfg: &EvalConfig) -> Result<EvalResult> {
    check_dataset(ds, &model.patch)?;
    if cfg.views.is_empty() {
        return Err(Error::config("views", "need at least one view"));
    }
    if let Some(&v) = cfg.views.iter().find(|&&v| v >= ds.n_views) {
        return Err(Error::config(
            "views",
            format!("view {v} out of range for {} views", ds.n_views),
        ));
    }
    let starts = clip_starts(ds.frames, model.patch.frames, cfg.n_clips)?;
    let crops = eval_crops(ds.height, ds.width, cfg.n_crops)?;
    let per_sample = |s: &crate::synthdata::MultiViewSample| -> Result<Vec<Vec<f64>>> {
        cfg.views
            .iter()
            .map(|&v| {
                let mut acc = vec![0.0; model.n_classes];
                for &t0 in &starts {
                    for &crop in &crops {
                        let clip = model_clip(&s.clips[v], t0, crop, &model.patch);
                        let mut f = Forward::new(*model, params);
                        let l = classify(&mut f, &clip, None)?;
                        acc.iter_mut()
                            .zip(f.g.value(l).data())
                            .for_each(|(a, &x)| *a += x as f64);
                    }
                }
                let n = (starts.len() * crops.len()) as f64;
                Ok(acc.into_iter().map(|x| x / n).collect())
            })
            .collect()
    };
    let rows: Vec<Result<Vec<Vec<f64>>>> = pool()?.install(|| ds.samples.par_iter().map(per_sample).collect());
    let per_view = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let labels: Vec<u32> = ds.samples.iter().map(|s| s.label).collect();
    let (fused, predictions) = late_fuse(&per_view)?;
    let view_accuracy = (0..cfg.views.len())
        .map(|j| {
            let l: Vec<Vec<f64>> = per_view.iter().map(|s| s[j].clone()).collect();
            tally_accuracy(&l, &labels)
        })
        .collect();
    let accuracy = tally_accuracy(&fused, &labels);
    Ok(EvalResult {
        labels,
        per_view,
        fused,
        predictions,
        accuracy,
        view_accuracy,
    })
}
