//! End-to-end acceptance criteria A1-A7. Each test prints one PASS/FAIL line.
//! The tests share a lock so timed runs do not compete for cores.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use mv2mae::masking::{random_mask, tube_mask, MaskKey};
use mv2mae::model::{ModelConfig, ModelParams};
use mv2mae::numerics::{Graph, Tensor};
use mv2mae::objective::{motion_weights, Weighting};
use mv2mae::synthdata::{generate_dataset, Dataset, GenConfig};
use mv2mae::tokenizer::{patchify, standardize_clip, unpatchify, PatchConfig};
use mv2mae::training::{
    cross_view_probe, evaluate, finetune, model_clip, pretrain, tally_accuracy, Crop, CrossViewProbe, EvalConfig,
    FinetuneConfig, PretrainConfig,
};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

// Written to the real stdout so the line shows even when output is captured.
fn verdict(id: &str, pass: bool, detail: &str) {
    let line = format!("\n{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes()).and_then(|_| out.flush());
    assert!(pass, "{id} failed: {detail}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mv2mae"))
}

const CLIP: (usize, usize) = (8, 32);
const A3_EPOCHS: usize = 200;
const A3_BATCH: usize = 16;
const A3_LR: f64 = 1e-3;
const A4_EPOCHS: usize = 30;

fn tiny() -> ModelConfig {
    ModelConfig::tiny(PatchConfig::new((2, 8, 8), 3, (CLIP.0, CLIP.1, CLIP.1)).unwrap())
}

#[test]
fn a1_gradient_check() {
    let _g = serial();
    let t = Instant::now();
    let o = bin().arg("gradcheck").output().unwrap();
    let elapsed = t.elapsed();
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    let mut worst_prim = 0.0f64;
    let mut worst_group = 0.0f64;
    let (mut prims, mut groups) = (0, 0);
    for line in out.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            continue;
        }
        let err: f64 = cols[2].parse().unwrap();
        match cols[0] {
            "primitive" => {
                prims += 1;
                worst_prim = worst_prim.max(err);
            }
            "group" => {
                groups += 1;
                worst_group = worst_group.max(err);
            }
            _ => {}
        }
    }
    let pass = o.status.success()
        && out.lines().last() == Some("PASS")
        && prims > 0
        && groups > 0
        && worst_prim < 1e-6
        && worst_group < 1e-4
        && elapsed < Duration::from_secs(300);
    verdict(
        "A1",
        pass,
        &format!(
            "primitives={prims} max_err={worst_prim:.2e} model_groups={groups} max_err={worst_group:.2e} time={:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn a2_structural_laws() {
    let _g = serial();
    let mut fails = Vec::new();
    let configs = [
        ((2, 16, 16), (16, 128, 128), 512),
        ((2, 16, 16), (16, 224, 224), 1568),
        ((2, 8, 8), (8, 32, 32), 64),
        ((2, 4, 4), (4, 16, 16), 32),
        ((1, 8, 8), (8, 32, 32), 128),
        ((4, 8, 8), (16, 64, 64), 256),
        ((2, 16, 16), (16, 64, 64), 128),
        ((2, 8, 8), (16, 64, 64), 512),
        ((1, 1, 1), (2, 3, 5), 30),
        ((3, 2, 4), (9, 6, 8), 18),
        ((2, 4, 8), (8, 16, 32), 64),
        ((8, 16, 16), (16, 128, 128), 128),
    ];
    for ((pt, ph, pw), (t, h, w), n) in configs {
        let cfg = PatchConfig::new((pt, ph, pw), 3, (t, h, w)).unwrap();
        if cfg.num_tokens() != (t / pt) * (h / ph) * (w / pw) || cfg.num_tokens() != n {
            fails.push(format!("token count {:?}", (pt, ph, pw, t, h, w)));
        }
    }

    let p = random_mask(512, 0.7, MaskKey::default()).unwrap();
    let mut all: Vec<usize> = p.masked.iter().chain(&p.visible).copied().collect();
    all.sort_unstable();
    if (p.masked.len(), p.visible.len()) != (358, 154) || all != (0..512).collect::<Vec<_>>() {
        fails.push("mask partition".into());
    }

    let tube = tube_mask((8, 8, 8), 0.7, MaskKey::default()).unwrap();
    let spatial: Vec<bool> = (0..64).map(|c| tube.masked.contains(&c)).collect();
    if !(0..512).all(|i| tube.masked.contains(&i) == spatial[i % 64]) {
        fails.push("tube constancy".into());
    }

    let ds = generate_dataset(&GenConfig::uniform(2, 16, 2, 8, CLIP.0, CLIP.1)).unwrap();
    let patch = tiny().patch;
    let mut max_wsum: f64 = 0.0;
    for s in &ds.samples {
        let clip = model_clip(&s.clips[0], 0, Crop::full(CLIP.1, CLIP.1), &patch);
        let p: Tensor<f32> = patchify(&clip, &patch).unwrap();
        if unpatchify(&p, &patch).unwrap().data != clip.data {
            fails.push(format!("patchify bijection sample {}", s.sample_id));
        }
        let std = standardize_clip(&clip);
        let mut last = f64::NEG_INFINITY;
        for tau in [1.0, 10.0, 60.0, 240.0, 1e4] {
            let w = motion_weights(&std, &patch, tau).unwrap();
            max_wsum = max_wsum.max((w.weights.iter().sum::<f64>() - 1.0).abs());
            let h = w.entropy();
            if h < last - 1e-12 {
                fails.push(format!("entropy fell at temperature {tau}, sample {}", s.sample_id));
            }
            last = h;
        }
    }
    if max_wsum > 1e-6 {
        fails.push(format!("motion weight sum off by {max_wsum:e}"));
    }

    let mut g = Graph::<f64>::new();
    let logits: Vec<f64> = (0..60).map(|i| ((i * 37 % 23) as f64 - 11.0) * 3.7).collect();
    let x = g.constant(Tensor::new(&[6, 10], logits).unwrap());
    let s = g.softmax(x, 1).unwrap();
    let worst = g
        .value(s)
        .data()
        .chunks(10)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    if worst > 1e-6 {
        fails.push(format!("softmax rows off by {worst:e}"));
    }

    let cfg = tiny();
    let params = ModelParams::<f64>::init(&cfg, mv2mae::model::Part::Pretrain, 0).unwrap();
    let clip = standardize_clip(&model_clip(
        &ds.samples[0].clips[0],
        0,
        Crop::full(CLIP.1, CLIP.1),
        &patch,
    ));
    let x: Tensor<f64> = patchify(&clip, &patch).unwrap();
    let mut f = mv2mae::model::Forward::new(cfg, &params).record_attention();
    let all: Vec<usize> = (0..patch.num_tokens()).collect();
    let e = f.embed(&x, &all).unwrap();
    f.encoder(e, None).unwrap();
    let mut worst = 0.0f64;
    for m in &f.attention {
        for row in m.weights.chunks(m.keys) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if f.attention.is_empty() || worst > 1e-6 {
        fails.push(format!("attention rows off by {worst:e}"));
    }

    verdict("A2", fails.is_empty(), &format!("configs=12 violations={fails:?}"));
}

struct A3Run {
    ds: Dataset,
    cfg: PretrainConfig,
    epoch_means: Vec<f64>,
    params: ModelParams<f32>,
    probe: CrossViewProbe,
    elapsed: Duration,
}

fn a3_config() -> PretrainConfig {
    let mut cfg = PretrainConfig::new(tiny());
    cfg.epochs = A3_EPOCHS;
    cfg.batch_size = A3_BATCH;
    cfg.optim.lr = A3_LR;
    cfg.optim.warmup_epochs = 5;
    cfg.augment = false;
    cfg
}

fn a3_run() -> &'static A3Run {
    static RUN: OnceLock<A3Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let ds = generate_dataset(&GenConfig::uniform(1, 200, 2, 8, CLIP.0, CLIP.1)).unwrap();
        let cfg = a3_config();
        let t = Instant::now();
        let run = pretrain(&ds, &cfg, None, None).unwrap();
        let elapsed = t.elapsed();
        let probe = cross_view_probe(&ds, &run.params, &cfg).unwrap();
        A3Run {
            ds,
            cfg,
            epoch_means: run.epoch_means,
            params: run.params,
            probe,
            elapsed,
        }
    })
}

#[test]
fn a3_overfit_sanity() {
    let _g = serial();
    let r = a3_run();
    assert_eq!(r.cfg.model.d_enc, 64);
    assert_eq!(r.cfg.model.enc_depth, 4);
    assert_eq!(
        (r.ds.samples.len(), r.ds.n_views, r.ds.frames, r.ds.height),
        (200, 2, 8, 32)
    );
    let first = r.epoch_means[0];
    let last = *r.epoch_means.last().unwrap();
    let ratio = last / first;
    let gain = 1.0 - r.probe.cross_mse / r.probe.copy_mse;
    let pass = ratio < 0.1 && gain >= 0.2 && r.elapsed < Duration::from_secs(1800);
    verdict(
        "A3",
        pass,
        &format!(
            "epoch1={first:.5} final={last:.5} ratio={ratio:.3} (need <0.1) cross_mse={:.4} copy_mse={:.4} gain={gain:.3} (need >=0.2) time={:.0}s",
            r.probe.cross_mse,
            r.probe.copy_mse,
            r.elapsed.as_secs_f64()
        ),
    );
}

fn finetune_and_score(
    train: &Dataset,
    test: &Dataset,
    pre: Option<&ModelParams<f32>>,
    model: ModelConfig,
    epochs: usize,
    seed: u64,
) -> f64 {
    let mut cfg = FinetuneConfig::new(model, 8);
    cfg.epochs = epochs;
    cfg.optim.warmup_epochs = 1;
    cfg.seed = seed;
    let run = finetune(train, pre, &cfg, None).unwrap();
    evaluate(test, &run.params, &cfg.model, &EvalConfig::default())
        .unwrap()
        .accuracy
}

#[test]
fn a4_downstream_trend() {
    let _g = serial();
    let pre = a3_run();
    let train = generate_dataset(&GenConfig::uniform(11, 800, 2, 8, CLIP.0, CLIP.1)).unwrap();
    let test = generate_dataset(&GenConfig::uniform(12, 200, 2, 8, CLIP.0, CLIP.1)).unwrap();
    let t = Instant::now();
    let acc = finetune_and_score(&train, &test, Some(&pre.params), pre.cfg.model, A4_EPOCHS, 0);
    let elapsed = t.elapsed();
    let control = finetune_and_score(&train, &test, None, pre.cfg.model, A4_EPOCHS, 0);
    let pass = acc >= 0.9 && acc >= control && elapsed < Duration::from_secs(1800);
    verdict(
        "A4",
        pass,
        &format!(
            "pretrained_acc={acc:.3} random_init_acc={control:.3} epochs={A4_EPOCHS} time={:.0}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn a5_model() -> ModelConfig {
    let patch = PatchConfig::new((2, 4, 4), 3, (8, 16, 16)).unwrap();
    ModelConfig {
        patch,
        d_enc: 32,
        enc_depth: 2,
        enc_heads: 2,
        enc_mlp: 128,
        d_dec: 16,
        dec_depth: 1,
        dec_heads: 2,
        dec_mlp: 64,
        n_classes: 0,
        drop_path_rate: 0.0,
    }
}

#[test]
fn a5_motion_weighting_ablation() {
    let _g = serial();
    let pre_ds = generate_dataset(&GenConfig::uniform(21, 200, 2, 8, 8, 16)).unwrap();
    let train = generate_dataset(&GenConfig::uniform(22, 800, 2, 8, 8, 16)).unwrap();
    let test = generate_dataset(&GenConfig::uniform(23, 200, 2, 8, 8, 16)).unwrap();
    let mut acc = [Vec::new(), Vec::new()];
    for seed in 0..3u64 {
        for (i, weighting) in [Weighting::Motion { temperature: 60.0 }, Weighting::Uniform]
            .into_iter()
            .enumerate()
        {
            let mut cfg = PretrainConfig::new(a5_model());
            cfg.epochs = 40;
            cfg.optim.warmup_epochs = 4;
            cfg.seed = seed;
            cfg.weighting = weighting;
            let run = pretrain(&pre_ds, &cfg, None, None).unwrap();
            acc[i].push(finetune_and_score(
                &train,
                &test,
                Some(&run.params),
                a5_model(),
                60,
                seed,
            ));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m, u) = (mean(&acc[0]), mean(&acc[1]));
    verdict(
        "A5",
        m >= u,
        &format!("motion_t60={:?} mean={m:.3} uniform={:?} mean={u:.3}", acc[0], acc[1]),
    );
}

const SMALL: &[&str] = &[
    "--set",
    "patch_t=2",
    "--set",
    "patch_h=4",
    "--set",
    "patch_w=4",
    "--set",
    "d_enc=16",
    "--set",
    "enc_depth=2",
    "--set",
    "enc_heads=2",
    "--set",
    "enc_mlp=32",
    "--set",
    "d_dec=8",
    "--set",
    "dec_depth=1",
    "--set",
    "dec_heads=2",
    "--set",
    "dec_mlp=16",
    "--set",
    "batch_size=4",
    "--set",
    "warmup_epochs=1",
];

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, seed: &str, samples: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = bin()
        .args([
            "gen-data",
            "--seed",
            seed,
            "--samples",
            samples,
            "--size",
            "16",
            "--frames",
            "4",
            "--out",
            s(&out),
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    out
}

fn run_ok(args: &[&str]) -> String {
    let o = bin().args(args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn a6_determinism() {
    let _g = serial();
    let d = tempfile::tempdir().unwrap();
    let data = gen(d.path(), "d.mv2d", "4", "24");
    let mut same = Vec::new();
    let outs = [d.path().join("r1"), d.path().join("r2")];
    for out in &outs {
        let mut a = vec![
            "pretrain",
            "--dataset",
            s(&data),
            "--out-dir",
            s(out),
            "--epochs",
            "3",
            "--seed",
            "5",
        ];
        a.push("--deterministic");
        a.extend(SMALL);
        run_ok(&a);
    }
    for f in ["checkpoint.mv2c", "metrics.tsv"] {
        let (x, y) = (
            std::fs::read(outs[0].join(f)).unwrap(),
            std::fs::read(outs[1].join(f)).unwrap(),
        );
        same.push((f, !x.is_empty() && x == y));
    }
    verdict("A6", same.iter().all(|s| s.1), &format!("{same:?}"));
}

#[test]
fn a7_late_fusion() {
    let _g = serial();
    let d = tempfile::tempdir().unwrap();
    let train = gen(d.path(), "train.mv2d", "5", "32");
    let test = gen(d.path(), "test.mv2d", "6", "24");
    let ft = d.path().join("ft");
    let mut a = vec!["finetune", "--dataset", s(&train), "--out-dir", s(&ft), "--epochs", "3"];
    a.extend(SMALL);
    run_ok(&a);
    let ev = d.path().join("ev");
    let ckpt = ft.join("checkpoint.mv2c");
    let out = run_ok(&[
        "eval",
        "--dataset",
        s(&test),
        "--checkpoint",
        s(&ckpt),
        "--out-dir",
        s(&ev),
        "--set",
        "views=0,1",
    ]);
    let reported: f64 = out
        .lines()
        .last()
        .unwrap()
        .strip_prefix("accuracy=")
        .unwrap()
        .parse()
        .unwrap();

    let tsv = std::fs::read_to_string(ev.join("logits.tsv")).unwrap();
    let (mut fused, mut labels, mut views) = (Vec::new(), Vec::new(), Vec::<Vec<Vec<f64>>>::new());
    for line in tsv.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let logits: Vec<f64> = cols[3].split(',').map(|v| v.parse().unwrap()).collect();
        match cols[2] {
            "fused" => {
                fused.push(logits);
                labels.push(cols[1].parse::<u32>().unwrap());
            }
            "0" => views.push(vec![logits]),
            _ => views.last_mut().unwrap().push(logits),
        }
    }
    let exact_mean = fused.len() == 24
        && fused
            .iter()
            .zip(&views)
            .all(|(f, v)| v.len() == 2 && (0..f.len()).all(|k| f[k] == (v[0][k] + v[1][k]) / 2.0));
    let correct = fused
        .iter()
        .zip(&labels)
        .filter(|(f, &y)| {
            let best = (0..f.len()).fold(0, |b, k| if f[k] > f[b] { k } else { b });
            best as u32 == y
        })
        .count();
    let tally = correct as f64 / labels.len() as f64;
    let pass = exact_mean && tally == reported && tally_accuracy(&fused, &labels) == reported;
    verdict(
        "A7",
        pass,
        &format!(
            "samples={} fused_is_mean={exact_mean} reported={reported} tally={tally}",
            fused.len()
        ),
    );
}
