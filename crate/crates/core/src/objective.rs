//! Reconstruction and classification losses.

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::Forward;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::synthdata::ClipTensor;
use crate::tokenizer::{normalize_patch_targets, patchify, select_rows, standardize_clip, PatchConfig, TARGET_EPS};

/// One weight per token, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionWeights {
    pub weights: Vec<f64>,
    /// `None` for uniform weights.
    pub temperature: Option<f64>,
}

impl MotionWeights {
    pub fn uniform(n: usize) -> Self {
        MotionWeights {
            weights: vec![1.0 / n as f64; n],
            temperature: None,
        }
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }
}

/// L2 norm per token of the absolute frame differences, with the first
/// difference repeated for frame 0.
pub fn motion_norms(clip: &ClipTensor, cfg: &PatchConfig) -> Result<Vec<f64>> {
    let [c, t, h, w] = clip.dims();
    if t < 2 {
        return Err(Error::invalid(
            "motion_weights",
            format!("need at least 2 frames, got {t}"),
        ));
    }
    let plane = h * w;
    let mut diff = clip.clone();
    for ch in 0..c {
        for f in 0..t {
            let (a, b) = if f == 0 { (1, 0) } else { (f, f - 1) };
            for p in 0..plane {
                let cur = clip.data[(ch * t + a) * plane + p];
                let prev = clip.data[(ch * t + b) * plane + p];
                diff.data[(ch * t + f) * plane + p] = (cur - prev).abs();
            }
        }
    }
    let patches: Tensor<f64> = patchify(&diff, cfg)?;
    let d = cfg.patch_dim();
    Ok(patches
        .data()
        .chunks_exact(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Softmax over tokens of `norm / temperature`.
pub fn weights_from_norms(norms: &[f64], temperature: f64) -> Result<MotionWeights> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(
            "temperature",
            format!("must be positive and finite, got {temperature}"),
        ));
    }
    let max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = norms.iter().map(|n| ((n - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(MotionWeights {
        weights: e.iter().map(|v| v / z).collect(),
        temperature: Some(temperature),
    })
}

pub fn motion_weights(clip: &ClipTensor, cfg: &PatchConfig, temperature: f64) -> Result<MotionWeights> {
    if !(temperature > 0.0) {
        return Err(Error::config(
            "temperature",
            format!("must be positive, got {temperature}"),
        ));
    }
    weights_from_norms(&motion_norms(clip, cfg)?, temperature)
}

/// `(1/|rows|) Σ_rows w_r · mean((target_r − pred_r)²)` on a graph, with
/// `pred` and `targets` already restricted to the masked rows.
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &Tensor<T>,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let rows = targets.shape()[0];
    if rows == 0 {
        return Err(Error::invalid("reconstruction loss", "no masked tokens"));
    }
    if g.shape(pred) != targets.shape() {
        return Err(Error::shape("reconstruction loss", g.shape(pred), targets.shape()));
    }
    let t = g.constant(targets.clone());
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    let per_row = g.mean_axis(sq, 1)?;
    let per_row = match weights {
        Some(w) => {
            if w.len() != rows {
                return Err(Error::shape("reconstruction loss", &[w.len()], &[rows]));
            }
            let wt = g.constant(Tensor::new(&[rows], w.iter().map(|&v| T::from_f64(v)).collect())?);
            g.mul(per_row, wt)?
        }
        None => per_row,
    };
    let s = g.sum(per_row);
    Ok(g.scale(s, T::from_f64(1.0 / rows as f64)))
}

fn check_pair<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>, plan: &MaskPlan) -> Result<()> {
    if targets.shape() != preds.shape() || targets.rank() != 2 || targets.shape()[0] != plan.n_tokens {
        return Err(Error::shape("masked_mse", targets.shape(), preds.shape()));
    }
    if plan.masked.is_empty() {
        return Err(Error::invalid("masked_mse", "no masked tokens"));
    }
    Ok(())
}

fn eval_loss<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>, plan: &MaskPlan, w: Option<Vec<f64>>) -> Result<f64> {
    check_pair(targets, preds, plan)?;
    let mut g = Graph::new();
    let p = g.constant(select_rows(preds, &plan.masked));
    let l = reconstruction_loss(&mut g, p, &select_rows(targets, &plan.masked), w.as_deref())?;
    Ok(g.value(l).item().as_f64())
}

/// Mean over masked tokens of the per-patch mean squared error.
pub fn masked_mse<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>, plan: &MaskPlan) -> Result<f64> {
    eval_loss(targets, preds, plan, None)
}

/// As [`masked_mse`], each masked token scaled by its raw motion weight.
pub fn motion_weighted_mse<T: Scalar>(
    targets: &Tensor<T>,
    preds: &Tensor<T>,
    plan: &MaskPlan,
    weights: &MotionWeights,
) -> Result<f64> {
    if weights.weights.len() != plan.n_tokens {
        return Err(Error::shape(
            "motion_weighted_mse",
            &[weights.weights.len()],
            &[plan.n_tokens],
        ));
    }
    let w = plan.masked.iter().map(|&i| weights.weights[i]).collect();
    eval_loss(targets, preds, plan, Some(w))
}

/// How reconstruction terms weight their tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Motion { temperature: f64 },
    Uniform,
}

/// Everything the loss needs from one view, restricted to the rows used.
#[derive(Debug, Clone)]
pub struct ViewInput<T> {
    pub plan: MaskPlan,
    /// Standardized patch rows at `plan.visible`.
    pub visible_patches: Tensor<T>,
    /// Normalized target rows at `plan.masked`.
    pub masked_targets: Tensor<T>,
    /// Token weights at `plan.masked`.
    pub masked_weights: Vec<f64>,
}

impl<T: Scalar> ViewInput<T> {
    /// `clip` holds raw [0, 1] pixels. Motion weights come from the
    /// standardized frames the encoder sees.
    pub fn new(
        clip: &ClipTensor,
        cfg: &PatchConfig,
        plan: MaskPlan,
        weighting: Weighting,
        rescale_by_n: bool,
    ) -> Result<Self> {
        plan.check()?;
        let n = cfg.num_tokens();
        if plan.n_tokens != n {
            return Err(Error::shape("view input", &[plan.n_tokens], &[n]));
        }
        let std = standardize_clip(clip);
        let inputs: Tensor<T> = patchify(&std, cfg)?;
        let raw: Tensor<T> = patchify(clip, cfg)?;
        let targets = normalize_patch_targets(&raw, TARGET_EPS);
        let weights = match weighting {
            Weighting::Motion { temperature } => motion_weights(&std, cfg, temperature)?,
            Weighting::Uniform => MotionWeights::uniform(n),
        };
        let scale = if rescale_by_n { n as f64 } else { 1.0 };
        Ok(ViewInput {
            visible_patches: select_rows(&inputs, &plan.visible),
            masked_targets: select_rows(&targets, &plan.masked),
            masked_weights: plan.masked.iter().map(|&i| weights.weights[i] * scale).collect(),
            plan,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub self_sv: f64,
    pub self_tv: f64,
    pub cross_tv: f64,
    pub ce: f64,
    /// |Ω| of the source view(s) followed by the target view.
    pub masked_counts: Vec<usize>,
}

/// `self_sv + self_tv + λ·cross_tv` recorded on the forward's graph. The
/// first source view gets a self-view term; any further source views only
/// contribute keys and values to the cross-view decoder.
pub fn pretrain_loss<T: Scalar>(
    f: &mut Forward<'_, T>,
    sources: &[ViewInput<T>],
    tv: &ViewInput<T>,
    lambda_cross: f64,
) -> Result<(Var, LossReport)> {
    let sv = sources
        .first()
        .ok_or_else(|| Error::invalid("pretrain_loss", "no source view"))?;
    let mut encoded = Vec::with_capacity(sources.len());
    for s in sources {
        let x = f.embed(&s.visible_patches, &s.plan.visible)?;
        encoded.push(f.encoder(x, None)?);
    }
    let full_sv = f.assemble_decoder_input(encoded[0], &sv.plan)?;
    let pred_sv = f.self_view_decoder(full_sv, Some(&sv.plan.masked))?;
    let l_sv = reconstruction_loss(&mut f.g, pred_sv, &sv.masked_targets, Some(&sv.masked_weights))?;

    let x_tv = f.embed(&tv.visible_patches, &tv.plan.visible)?;
    let enc_tv = f.encoder(x_tv, None)?;
    let full_tv = f.assemble_decoder_input(enc_tv, &tv.plan)?;
    let pred_tv = f.self_view_decoder(full_tv, Some(&tv.plan.masked))?;
    let l_tv = reconstruction_loss(&mut f.g, pred_tv, &tv.masked_targets, Some(&tv.masked_weights))?;

    let mut total = f.g.add(l_sv, l_tv)?;
    let mut cross = 0.0;
    if lambda_cross != 0.0 {
        let mut src = Vec::with_capacity(sources.len());
        for (s, &e) in sources.iter().zip(&encoded) {
            src.push(f.project_source(e, &s.plan.visible)?);
        }
        let pred = f.cross_view_decoder(full_tv, &src, Some(&tv.plan.masked))?;
        let l_x = reconstruction_loss(&mut f.g, pred, &tv.masked_targets, Some(&tv.masked_weights))?;
        cross = f.g.value(l_x).item().as_f64();
        let scaled = f.g.scale(l_x, T::from_f64(lambda_cross));
        total = f.g.add(total, scaled)?;
    }
    let report = LossReport {
        total: f.g.value(total).item().as_f64(),
        self_sv: f.g.value(l_sv).item().as_f64(),
        self_tv: f.g.value(l_tv).item().as_f64(),
        cross_tv: cross,
        ce: 0.0,
        masked_counts: sources
            .iter()
            .map(|s| s.plan.masked.len())
            .chain(std::iter::once(tv.plan.masked.len()))
            .collect(),
    };
    Ok((total, report))
}

/// Label-smoothed cross-entropy on a `[K]` logit vector: target mass
/// `1 − s`, every other class `s / (K − 1)`.
pub fn cross_entropy_in<T: Scalar>(g: &mut Graph<T>, logits: Var, label: usize, smoothing: f64) -> Result<Var> {
    let k = g.shape(logits)[0];
    if g.shape(logits).len() != 1 || label >= k {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {label} out of range for {k} classes"),
        ));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::config(
            "label_smoothing",
            format!("must lie in [0, 1), got {smoothing}"),
        ));
    }
    let off = if k > 1 { smoothing / (k - 1) as f64 } else { 0.0 };
    let q: Vec<T> = (0..k)
        .map(|i| T::from_f64(if i == label { 1.0 - smoothing } else { off }))
        .collect();
    let lp = g.log_softmax(logits, 0)?;
    let q = g.constant(Tensor::new(&[k], q)?);
    let prod = g.mul(lp, q)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -T::one()))
}

pub fn cross_entropy_smoothed(logits: &[f64], label: usize, smoothing: f64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::new(&[logits.len()], logits.to_vec())?);
    let out = cross_entropy_in(&mut g, l, label, smoothing)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{random_mask, MaskKey};

    fn plan(n: usize, masked: &[usize]) -> MaskPlan {
        let mut p = random_mask(n, 0.5, MaskKey::default()).unwrap();
        p.masked = masked.to_vec();
        p.visible = (0..n).filter(|i| !masked.contains(i)).collect();
        p
    }

    #[test]
    fn softmax_of_norms() {
        let w = weights_from_norms(&[0.0, 60.0], 60.0).unwrap();
        let e = std::f64::consts::E;
        assert!((w.weights[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((w.weights[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!(weights_from_norms(&[1.0], 0.0).is_err());
        assert!(weights_from_norms(&[1.0], -3.0).is_err());
    }

    #[test]
    fn static_clip_is_uniform() {
        let cfg = PatchConfig::new((2, 4, 4), 3, (4, 8, 8)).unwrap();
        let mut clip = ClipTensor::zeros(3, 4, 8, 8);
        clip.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i % 17) as f32 / 17.0);
        // Same image in every frame.
        let plane = 64;
        for c in 0..3 {
            for t in 1..4 {
                for p in 0..plane {
                    clip.data[(c * 4 + t) * plane + p] = clip.data[(c * 4) * plane + p];
                }
            }
        }
        let w = motion_weights(&clip, &cfg, 60.0).unwrap();
        assert!(w.weights.iter().all(|&v| (v - 1.0 / 8.0).abs() < 1e-12));
    }

    #[test]
    fn frame_zero_repeats_first_difference() {
        let cfg = PatchConfig::new((1, 2, 2), 1, (3, 2, 2)).unwrap();
        let mut clip = ClipTensor::zeros(1, 3, 2, 2);
        // Frame 1 differs from frame 0 by 1 everywhere, frame 2 equals frame 1.
        clip.data[4..12].iter_mut().for_each(|v| *v = 1.0);
        let n = motion_norms(&clip, &cfg).unwrap();
        assert_eq!(n, vec![2.0, 2.0, 0.0]);
    }

    #[test]
    fn masked_mse_examples() {
        let t = Tensor::<f64>::zeros(&[3, 4]);
        let mut p = Tensor::<f64>::zeros(&[3, 4]);
        let pl = plan(3, &[1]);
        assert_eq!(masked_mse(&t, &p, &pl).unwrap(), 0.0);
        p.data_mut()[4..8].iter_mut().for_each(|v| *v = 2.0);
        assert!((masked_mse(&t, &p, &pl).unwrap() - 4.0).abs() < 1e-12);
        // Visible rows do not matter.
        p.data_mut()[0..4].iter_mut().for_each(|v| *v = 9.0);
        assert!((masked_mse(&t, &p, &pl).unwrap() - 4.0).abs() < 1e-12);
        assert!(masked_mse(&t, &p, &plan(3, &[])).is_err());
    }

    #[test]
    fn weighted_mse_examples() {
        let t = Tensor::<f64>::zeros(&[2, 1]);
        let p = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let w = MotionWeights {
            weights: vec![0.25, 0.75],
            temperature: Some(1.0),
        };
        let l = motion_weighted_mse(&t, &p, &plan(2, &[0, 1]), &w).unwrap();
        assert!((l - 1.625).abs() < 1e-12);

        let t = Tensor::<f64>::zeros(&[4, 3]);
        let p = Tensor::<f64>::full(&[4, 3], 0.5);
        let pl = plan(4, &[2]);
        let u = motion_weighted_mse(&t, &p, &pl, &MotionWeights::uniform(4)).unwrap();
        assert!((u - masked_mse(&t, &p, &pl).unwrap() / 4.0).abs() < 1e-15);
        let mut w = MotionWeights::uniform(4);
        w.weights[2] *= 2.0;
        assert!((motion_weighted_mse(&t, &p, &pl, &w).unwrap() - 2.0 * u).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let ln8 = 8f64.ln();
        for s in [0.0, 0.1, 0.5] {
            assert!((cross_entropy_smoothed(&[0.3; 8], 2, s).unwrap() - ln8).abs() < 1e-12);
        }
        let mut confident = [0.0; 8];
        confident[3] = 60.0;
        assert!(cross_entropy_smoothed(&confident, 3, 0.0).unwrap() < 1e-20);

        let logits = [0.5, -1.0, 2.0, 0.0, 0.3, -0.2, 1.1, 0.7];
        let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let direct: f64 = (0..8)
            .map(|i| {
                let q = if i == 2 { 0.9 } else { 0.1 / 7.0 };
                -q * (logits[i] - lse)
            })
            .sum();
        assert!((cross_entropy_smoothed(&logits, 2, 0.1).unwrap() - direct).abs() < 1e-12);
        assert!(cross_entropy_smoothed(&logits, 8, 0.1).is_err());
    }
}
