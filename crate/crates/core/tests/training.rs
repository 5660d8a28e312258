use std::collections::BTreeMap;

use mv2mae::masking::{random_mask, MaskKey};
use mv2mae::model::{Forward, ModelConfig, ModelParams, Part};
use mv2mae::numerics::Tensor;
use mv2mae::objective::{cross_entropy_in, pretrain_loss, ViewInput, Weighting};
use mv2mae::synthdata::{generate_dataset, Dataset, GenConfig};
use mv2mae::tokenizer::{patchify, standardize_clip, PatchConfig};
use mv2mae::training::{finetune, pretrain, FinetuneConfig, PretrainConfig};

fn small_model() -> ModelConfig {
    let patch = PatchConfig::new((2, 4, 4), 3, (4, 16, 16)).unwrap();
    ModelConfig {
        patch,
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

fn data(n: usize) -> Dataset {
    generate_dataset(&GenConfig::uniform(3, n, 3, 8, 6, 16)).unwrap()
}

fn pretrain_cfg() -> PretrainConfig {
    let mut c = PretrainConfig::new(small_model());
    c.epochs = 2;
    c.batch_size = 3;
    c.optim.warmup_epochs = 1;
    c.seed = 9;
    c
}

fn read(p: &std::path::Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn identical_runs_are_byte_identical() {
    let ds = data(6);
    let cfg = pretrain_cfg();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pretrain(&ds, &cfg, Some(a.path()), None).unwrap();
    pretrain(&ds, &cfg, Some(b.path()), None).unwrap();
    for f in ["checkpoint.mv2c", "metrics.tsv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let lines = String::from_utf8(read(&a.path().join("metrics.tsv"))).unwrap();
    assert_eq!(lines.lines().count(), 4);
    assert!(lines.lines().all(|l| l.split('\t').count() == 6));
}

#[test]
fn resume_reproduces_the_next_steps() {
    let ds = data(6);
    let mut cfg = pretrain_cfg();
    cfg.save_every = 1;
    let full = tempfile::tempdir().unwrap();
    let run = pretrain(&ds, &cfg, Some(full.path()), None).unwrap();
    assert_eq!(run.metrics.len(), 4);
    for s in [1, 2, 3] {
        let resumed = tempfile::tempdir().unwrap();
        let ckpt = full.path().join(format!("step_{s:06}.mv2c"));
        let r = pretrain(&ds, &cfg, Some(resumed.path()), Some(&ckpt)).unwrap();
        assert_eq!(r.metrics[0], run.metrics[s], "step {}", s + 1);
        assert_eq!(r.metrics.last(), run.metrics.last());
        assert_eq!(
            read(&resumed.path().join("checkpoint.mv2c")),
            read(&full.path().join("checkpoint.mv2c"))
        );
    }
}

fn view(ds: &Dataset, v: usize, cfg: &ModelConfig) -> ViewInput<f32> {
    let clip = mv2mae::training::model_clip(
        &ds.samples[0].clips[v],
        0,
        mv2mae::training::Crop::full(ds.height, ds.width),
        &cfg.patch,
    );
    let plan = random_mask(
        cfg.patch.num_tokens(),
        0.7,
        MaskKey {
            view: v as u64,
            ..Default::default()
        },
    )
    .unwrap();
    ViewInput::new(&clip, &cfg.patch, plan, Weighting::Motion { temperature: 60.0 }, false).unwrap()
}

fn nonzero(t: &Tensor<f32>) -> bool {
    t.data().iter().any(|&v| v != 0.0)
}

#[test]
fn every_pretrain_parameter_gets_gradient() {
    let ds = data(2);
    let cfg = small_model();
    let params = ModelParams::<f32>::init(&cfg, Part::Pretrain, 4).unwrap();
    let (sv, tv) = (view(&ds, 0, &cfg), view(&ds, 1, &cfg));
    let mut f = Forward::new(cfg, &params);
    let (loss, report) = pretrain_loss(&mut f, &[sv], &tv, 1.0).unwrap();
    assert!(report.total > 0.0 && report.total.is_finite());
    let g = f.gradients(loss).unwrap();
    for name in params.tensors.keys() {
        assert!(g.get(name).is_some_and(nonzero), "{name} has no gradient");
    }
}

#[test]
fn zero_lambda_leaves_cross_decoder_untouched() {
    let ds = data(2);
    let cfg = small_model();
    let params = ModelParams::<f32>::init(&cfg, Part::Pretrain, 4).unwrap();
    let (sv, tv) = (view(&ds, 0, &cfg), view(&ds, 1, &cfg));
    let mut f = Forward::new(cfg, &params);
    let (loss, report) = pretrain_loss(&mut f, &[sv], &tv, 0.0).unwrap();
    assert_eq!(report.cross_tv, 0.0);
    assert!((report.total - (report.self_sv + report.self_tv)).abs() < 1e-6);
    let g = f.gradients(loss).unwrap();
    assert!(g.keys().all(|k| !k.starts_with("cross_dec.")));
    assert!(params.tensors.keys().any(|k| k.starts_with("cross_dec.")));
}

#[test]
fn every_classifier_parameter_gets_gradient() {
    let ds = data(2);
    let mut cfg = small_model();
    cfg.n_classes = 8;
    let params = ModelParams::<f32>::init(&cfg, Part::Classifier, 4).unwrap();
    let clip = standardize_clip(&ds.samples[0].clips[0]);
    let clip = mv2mae::training::model_clip(&clip, 0, mv2mae::training::Crop::full(16, 16), &cfg.patch);
    let x: Tensor<f32> = patchify(&clip, &cfg.patch).unwrap();
    let mut f = Forward::new(cfg, &params);
    let all: Vec<usize> = (0..cfg.patch.num_tokens()).collect();
    let e = f.embed(&x, &all).unwrap();
    let e = f.encoder(e, None).unwrap();
    let logits = f.classifier(e).unwrap();
    let loss = cross_entropy_in(&mut f.g, logits, 3, 0.1).unwrap();
    let g: BTreeMap<String, Tensor<f32>> = f.gradients(loss).unwrap();
    for name in params.tensors.keys() {
        assert!(g.get(name).is_some_and(nonzero), "{name} has no gradient");
    }
}

#[test]
fn probe_mode_only_moves_the_head() {
    let ds = data(6);
    let pre = pretrain(&ds, &pretrain_cfg(), None, None).unwrap();
    let mut cfg = FinetuneConfig::new(small_model(), 8);
    cfg.epochs = 2;
    cfg.batch_size = 3;
    cfg.optim.warmup_epochs = 1;
    cfg.probe = true;
    let run = finetune(&ds, Some(&pre.params), &cfg, None).unwrap();
    let mut head = 0;
    for (name, t) in &run.params.tensors {
        if name.starts_with("head.") {
            head += 1;
            let init = ModelParams::<f32>::init(&cfg.model, Part::Classifier, cfg.seed).unwrap();
            assert_ne!(t, init.get(name).unwrap(), "{name} did not move");
        } else {
            assert_eq!(t, pre.params.get(name).unwrap(), "{name} moved in probe mode");
        }
    }
    assert!(head > 0);
}

#[test]
fn finetune_loads_pretrained_encoder_and_trains_all() {
    let ds = data(6);
    let pre = pretrain(&ds, &pretrain_cfg(), None, None).unwrap();
    let mut cfg = FinetuneConfig::new(small_model(), 8);
    cfg.epochs = 1;
    cfg.batch_size = 6;
    cfg.optim.warmup_epochs = 0;
    let run = finetune(&ds, Some(&pre.params), &cfg, None).unwrap();
    assert_eq!(run.metrics.len(), 1);
    assert!(run.metrics[0].ce > 0.0);
    for (name, t) in &run.params.tensors {
        if let Some(p) = pre.params.tensors.get(name) {
            assert_ne!(t, p, "{name} frozen outside probe mode");
        }
    }
    assert!(run
        .params
        .tensors
        .keys()
        .all(|k| !k.starts_with("self_dec.") && !k.starts_with("cross_dec.")));
}
