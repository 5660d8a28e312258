//! Finite-difference verification of every primitive and of the full
//! pre-training loss on a tiny model.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::{random_mask, MaskKey};
use crate::model::{Forward, ModelConfig, ModelParams, Part};
use crate::numerics::{check_all_primitives, finite_diff_grad, Primitive, PrimitiveReport, Scalar};
use crate::objective::{pretrain_loss, ViewInput, Weighting};
use crate::rng::{keyed_rng, Domain};
use crate::synthdata::{generate_dataset, GenConfig, MultiViewSample};
use crate::tokenizer::PatchConfig;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL_F64: f64 = 1e-4;
pub const MODEL_TOL_F32: f64 = 1e-2;
const STEP: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// Tiny model: N = 32 tokens, two encoder blocks, one decoder block.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        patch: PatchConfig::new((2, 4, 4), 3, (4, 16, 16)).expect("valid patch config"),
        d_enc: 16,
        enc_depth: 2,
        enc_heads: 2,
        enc_mlp: 32,
        d_dec: 8,
        dec_depth: 1,
        dec_heads: 2,
        dec_mlp: 16,
        n_classes: 0,
        drop_path_rate: 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub primitives: Vec<PrimitiveReport>,
    /// Worst relative error per parameter group, e.g. `enc.1` or `mask_token`.
    pub groups: Vec<(String, f64)>,
    pub model_tol: f64,
}

impl GradcheckReport {
    pub fn failed_primitives(&self) -> Vec<Primitive> {
        self.primitives
            .iter()
            .filter(|r| !(r.rel_error < PRIMITIVE_TOL))
            .map(|r| r.primitive)
            .collect()
    }

    pub fn failed_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|(_, e)| !(*e < self.model_tol))
            .map(|(g, _)| g.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failed_primitives().is_empty() && self.failed_groups().is_empty()
    }
}

fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or(name);
    match parts.next() {
        Some(second) if second.parse::<usize>().is_ok() => format!("{first}.{second}"),
        _ => first.to_string(),
    }
}

fn sample() -> Result<MultiViewSample> {
    let cfg = gradcheck_config();
    let p = cfg.patch;
    let ds = generate_dataset(&GenConfig::uniform(11, 1, 2, 8, p.frames, p.height))?;
    ds.samples
        .into_iter()
        .next()
        .ok_or_else(|| Error::Generation("empty dataset".into()))
}

fn inputs<T: Scalar>(s: &MultiViewSample) -> Result<(ViewInput<T>, ViewInput<T>)> {
    let cfg = gradcheck_config();
    let n = cfg.patch.num_tokens();
    let view = |v: usize| -> Result<ViewInput<T>> {
        let key = MaskKey {
            seed: 5,
            view: v as u64,
            ..Default::default()
        };
        ViewInput::new(
            &s.clips[v],
            &cfg.patch,
            random_mask(n, 0.7, key)?,
            Weighting::Motion { temperature: 60.0 },
            false,
        )
    };
    Ok((view(0)?, view(1)?))
}

/// Parameters with values of order one, so no gradient is vanishingly small.
fn test_params(seed: u64) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::<f64>::init(&gradcheck_config(), Part::Pretrain, seed)?;
    for (name, t) in p.tensors.iter_mut() {
        let mut rng = keyed_rng(Domain::Gradcheck, &[seed, name.len() as u64, t.numel() as u64]);
        let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = base + rng.gen_range(-0.5..0.5));
    }
    Ok(p)
}

fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    sv: &ViewInput<T>,
    tv: &ViewInput<T>,
    fault: Option<Primitive>,
) -> Result<(f64, BTreeMap<String, crate::numerics::Tensor<T>>)> {
    let mut f = Forward::new(gradcheck_config(), params);
    if let Some(p) = fault {
        f.g.inject_fault(p);
    }
    let (total, report) = pretrain_loss(&mut f, std::slice::from_ref(sv), tv, 1.0)?;
    Ok((report.total, f.gradients(total)?))
}

/// Per-primitive checks over `seeds` draws, then (with `model`) every
/// parameter of the tiny model against central differences of the total
/// pre-training loss.
pub fn run_gradcheck(
    precision: Precision,
    seeds: u64,
    fault: Option<Primitive>,
    model: bool,
) -> Result<GradcheckReport> {
    let primitives = check_all_primitives(seeds, STEP, fault)?;
    let model_tol = match precision {
        Precision::F64 => MODEL_TOL_F64,
        Precision::F32 => MODEL_TOL_F32,
    };
    if !model {
        return Ok(GradcheckReport {
            primitives,
            groups: Vec::new(),
            model_tol,
        });
    }
    let s = sample()?;
    let (sv, tv) = inputs::<f64>(&s)?;
    let mut params = test_params(3)?;
    let analytic: BTreeMap<String, Vec<f64>> = match precision {
        Precision::F64 => loss_and_grads(&params, &sv, &tv, fault)?
            .1
            .into_iter()
            .map(|(k, t)| (k, t.to_f64_vec()))
            .collect(),
        Precision::F32 => {
            let p32 = ModelParams {
                tensors: params
                    .tensors
                    .iter()
                    .map(|(k, t)| (k.clone(), t.cast::<f32>()))
                    .collect(),
            };
            let (sv32, tv32) = inputs::<f32>(&s)?;
            loss_and_grads(&p32, &sv32, &tv32, fault)?
                .1
                .into_iter()
                .map(|(k, t)| (k, t.to_f64_vec()))
                .collect()
        }
    };
    let mut numeric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    for name in names {
        let theta = params.tensors[&name].data().to_vec();
        let fd = finite_diff_grad(
            |x| {
                params
                    .tensors
                    .get_mut(&name)
                    .expect("known name")
                    .data_mut()
                    .copy_from_slice(x);
                loss_and_grads(&params, &sv, &tv, None).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &theta,
            STEP,
        );
        params
            .tensors
            .get_mut(&name)
            .expect("known name")
            .data_mut()
            .copy_from_slice(&theta);
        numeric.insert(name, fd);
    }
    // Some gradients vanish exactly (a key bias shifts every score of a query
    // equally), so norms are floored relative to the whole gradient.
    let global = numeric.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let floor = NORM_FLOOR * global;
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for (name, n) in &numeric {
        let a = analytic.get(name).cloned().unwrap_or_else(|| vec![0.0; n.len()]);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let err = diff / norm(&a).max(norm(n)).max(floor);
        let e = groups.entry(group_of(name)).or_insert(0.0);
        *e = if err.is_nan() { f64::NAN } else { e.max(err) };
    }
    Ok(GradcheckReport {
        primitives,
        groups: groups.into_iter().collect(),
        model_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups() {
        assert_eq!(group_of("enc.1.attn.q.weight"), "enc.1");
        assert_eq!(group_of("mask_token"), "mask_token");
        assert_eq!(group_of("self_dec.norm.gain"), "self_dec");
    }

    #[test]
    fn tiny_model_has_32_tokens() {
        assert_eq!(gradcheck_config().patch.num_tokens(), 32);
    }
}
