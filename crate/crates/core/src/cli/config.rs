//! Flat `key = value` run configuration. Later sources override earlier
//! ones: defaults, then a config file, then command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::model::ModelConfig;
use crate::objective::Weighting;
use crate::synthdata::Dataset;
use crate::tokenizer::PatchConfig;
use crate::training::{AdamW, EvalConfig, FinetuneConfig, OptimConfig, PretrainConfig, DEFAULT_MIN_LR};

/// Which defaults apply; pre-training and fine-tuning differ in optimizer
/// settings, epochs and drop path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Motion,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub resume: bool,

    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub save_every: usize,

    /// Model input clip; 0 takes the dataset's size.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub d_enc: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub enc_mlp: usize,
    pub d_dec: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub dec_mlp: usize,
    pub drop_path: f64,
    /// 0 takes the number of classes present in the dataset.
    pub n_classes: usize,

    pub rho: f64,
    pub mask: MaskStrategy,
    pub weighting: WeightKind,
    pub temperature: f64,
    pub rescale_weights: bool,
    pub lambda_cross: f64,
    pub n_source_views: usize,
    pub symmetric: bool,
    pub augment: bool,

    pub layer_decay: f64,
    pub label_smoothing: f64,
    pub probe: bool,
    pub flip: bool,

    pub n_clips: usize,
    pub n_crops: usize,
    pub views: Vec<usize>,
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("{e} in {s:?}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, bool);

impl Value for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(format!("{s:?} is not finite")),
            Err(e) => Err(format!("{e} in {s:?}")),
        }
    }
    fn show(&self) -> String {
        // Shortest representation that parses back to the same value.
        format!("{self:?}")
    }
}

impl Value for Option<PathBuf> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(if s.is_empty() { None } else { Some(PathBuf::from(s)) })
    }
    fn show(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl Value for MaskStrategy {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        MaskStrategy::parse(s).ok_or_else(|| format!("expected random or tube, got {s:?}"))
    }
    fn show(&self) -> String {
        self.name().to_string()
    }
}

impl Value for WeightKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "motion" => Ok(WeightKind::Motion),
            "uniform" => Ok(WeightKind::Uniform),
            _ => Err(format!("expected motion or uniform, got {s:?}")),
        }
    }
    fn show(&self) -> String {
        match self {
            WeightKind::Motion => "motion",
            WeightKind::Uniform => "uniform",
        }
        .to_string()
    }
}

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e} in {s:?}")))
            .collect()
    }
    fn show(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! keys {
    ($($field:ident),* $(,)?) => {
        /// Every accepted key, in dump order.
        pub const KEYS: &[&str] = &[$(stringify!($field)),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($field) => {
                        self.$field = Value::parse_value(value).map_err(|m| Error::config(key, m))?;
                    })*
                    _ => return Err(Error::config(key, "unknown key")),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.show())),*]
            }
        }
    };
}

keys!(
    dataset,
    eval_dataset,
    checkpoint,
    out_dir,
    resume,
    seed,
    epochs,
    batch_size,
    lr,
    min_lr,
    warmup_epochs,
    weight_decay,
    beta1,
    beta2,
    adam_eps,
    save_every,
    frames,
    height,
    width,
    patch_t,
    patch_h,
    patch_w,
    d_enc,
    enc_depth,
    enc_heads,
    enc_mlp,
    d_dec,
    dec_depth,
    dec_heads,
    dec_mlp,
    drop_path,
    n_classes,
    rho,
    mask,
    weighting,
    temperature,
    rescale_weights,
    lambda_cross,
    n_source_views,
    symmetric,
    augment,
    layer_decay,
    label_smoothing,
    probe,
    flip,
    n_clips,
    n_crops,
    views,
);

impl RunConfig {
    pub fn defaults(stage: Stage) -> Self {
        let tiny = ModelConfig::tiny(PatchConfig::new((2, 8, 8), 3, (8, 32, 32)).expect("valid patch config"));
        let (epochs, warmup, adamw, drop_path) = match stage {
            Stage::Pretrain => (200, 10, AdamW::pretrain(), 0.0),
            Stage::Finetune => (50, 5, AdamW::finetune(), 0.1),
        };
        RunConfig {
            dataset: None,
            eval_dataset: None,
            checkpoint: None,
            out_dir: None,
            resume: false,
            seed: 0,
            epochs,
            batch_size: 16,
            lr: 1e-3,
            min_lr: DEFAULT_MIN_LR,
            warmup_epochs: warmup,
            weight_decay: adamw.weight_decay,
            beta1: adamw.beta1,
            beta2: adamw.beta2,
            adam_eps: adamw.eps,
            save_every: 0,
            frames: 0,
            height: 0,
            width: 0,
            patch_t: 2,
            patch_h: 8,
            patch_w: 8,
            d_enc: tiny.d_enc,
            enc_depth: tiny.enc_depth,
            enc_heads: tiny.enc_heads,
            enc_mlp: tiny.enc_mlp,
            d_dec: tiny.d_dec,
            dec_depth: tiny.dec_depth,
            dec_heads: tiny.dec_heads,
            dec_mlp: tiny.dec_mlp,
            drop_path,
            n_classes: 0,
            rho: 0.7,
            mask: MaskStrategy::Random,
            weighting: WeightKind::Motion,
            temperature: 60.0,
            rescale_weights: false,
            lambda_cross: 1.0,
            n_source_views: 1,
            symmetric: false,
            augment: true,
            layer_decay: 0.9,
            label_smoothing: 0.1,
            probe: false,
            flip: true,
            n_clips: 1,
            n_crops: 1,
            views: vec![0],
        }
    }

    /// Applies a config file body: one `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", no + 1),
                    format!("expected key = value, got {line:?}"),
                )
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "expected key=value"))?;
        self.set(k.trim(), v)
    }

    /// Text that [`RunConfig::apply_text`] parses back to this config.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Path under `key`, which must be set and exist.
    pub fn existing_path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "dataset" => &self.dataset,
            "eval_dataset" => &self.eval_dataset,
            "checkpoint" => &self.checkpoint,
            "out_dir" => &self.out_dir,
            _ => return Err(Error::config(key, "not a path key")),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| Error::config(key, "required path is not set"))?;
        if !p.exists() {
            return Err(Error::config(key, format!("{} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::config("out_dir", "required path is not set"))
    }

    pub fn model_config(&self, ds: &Dataset) -> Result<ModelConfig> {
        let or = |v: usize, d: usize| if v == 0 { d } else { v };
        let frames = or(self.frames, ds.frames);
        let patch = PatchConfig::new(
            (self.patch_t, self.patch_h, self.patch_w),
            ds.channels,
            (frames, or(self.height, ds.height), or(self.width, ds.width)),
        )?;
        let n_classes = if self.n_classes == 0 {
            ds.samples.iter().map(|s| s.label as usize + 1).max().unwrap_or(0)
        } else {
            self.n_classes
        };
        let cfg = ModelConfig {
            patch,
            d_enc: self.d_enc,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            enc_mlp: self.enc_mlp,
            d_dec: self.d_dec,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
            dec_mlp: self.dec_mlp,
            n_classes,
            drop_path_rate: self.drop_path,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            adamw: AdamW {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
        }
    }

    pub fn pretrain_config(&self, ds: &Dataset) -> Result<PretrainConfig> {
        let mut model = self.model_config(ds)?;
        model.n_classes = 0;
        let mut cfg = PretrainConfig::new(model);
        cfg.seed = self.seed;
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.optim = self.optim();
        cfg.rho = self.rho;
        cfg.mask = self.mask;
        cfg.weighting = match self.weighting {
            WeightKind::Motion => Weighting::Motion {
                temperature: self.temperature,
            },
            WeightKind::Uniform => Weighting::Uniform,
        };
        cfg.rescale_weights = self.rescale_weights;
        cfg.lambda_cross = self.lambda_cross;
        cfg.n_source_views = self.n_source_views;
        cfg.symmetric = self.symmetric;
        cfg.augment = self.augment;
        cfg.save_every = self.save_every;
        cfg.validate(ds)?;
        Ok(cfg)
    }

    pub fn finetune_config(&self, ds: &Dataset) -> Result<FinetuneConfig> {
        let model = self.model_config(ds)?;
        let mut cfg = FinetuneConfig::new(model, model.n_classes);
        cfg.model.drop_path_rate = self.drop_path;
        cfg.seed = self.seed;
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.optim = self.optim();
        cfg.layer_decay = self.layer_decay;
        cfg.label_smoothing = self.label_smoothing;
        cfg.probe = self.probe;
        cfg.flip = self.flip;
        cfg.validate(ds)?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_clips: self.n_clips,
            n_crops: self.n_crops,
            views: self.views.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip() {
        for stage in [Stage::Pretrain, Stage::Finetune] {
            let mut c = RunConfig::defaults(stage);
            c.apply_text("lr = 0.00015\nviews = 0,1\ndataset = /tmp/x.mv2d\nmask = tube\nweighting=uniform")
                .unwrap();
            let mut back = RunConfig::defaults(Stage::Pretrain);
            back.apply_text(&c.dump()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = RunConfig::defaults(Stage::Pretrain);
        c.apply_text("# header\n\n  epochs = 3  # trailing\nrho=0.5\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.rho, 0.5);
    }

    #[test]
    fn unknown_and_malformed_keys_name_the_key() {
        let mut c = RunConfig::defaults(Stage::Pretrain);
        match c.apply_text("learning_rate = 1").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "learning_rate"),
            e => panic!("{e}"),
        }
        match c.apply_assignment("epochs=many").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "epochs"),
            e => panic!("{e}"),
        }
        assert!(c.set("lr", "nan").is_err());
        assert!(c.apply_text("no equals sign").is_err());
    }

    #[test]
    fn later_sources_win() {
        let mut c = RunConfig::defaults(Stage::Pretrain);
        c.apply_text("seed = 4\nepochs = 9").unwrap();
        c.apply_assignment("seed=5").unwrap();
        assert_eq!((c.seed, c.epochs), (5, 9));
    }

    #[test]
    fn missing_path_is_a_config_error() {
        let c = RunConfig::defaults(Stage::Pretrain);
        match c.existing_path("dataset").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "dataset"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn stage_defaults_differ() {
        let p = RunConfig::defaults(Stage::Pretrain);
        let f = RunConfig::defaults(Stage::Finetune);
        assert_eq!((p.beta2, p.weight_decay, p.epochs), (0.95, 0.05, 200));
        assert_eq!((f.beta2, f.weight_decay, f.epochs, f.drop_path), (0.999, 0.1, 50, 0.1));
        assert_eq!(KEYS.len(), p.entries().len());
    }
}
