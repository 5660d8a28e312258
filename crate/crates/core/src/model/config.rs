use crate::error::{Error, Result};
use crate::tokenizer::PatchConfig;

/// Shapes of the encoder, decoders and classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub d_enc: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub enc_mlp: usize,
    pub d_dec: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub dec_mlp: usize,
    /// 0 when no classifier head is attached.
    pub n_classes: usize,
    pub drop_path_rate: f64,
}

impl ModelConfig {
    /// ViT-S encoder with the 192-wide, 4-block decoders.
    pub fn vit_small(patch: PatchConfig) -> Self {
        ModelConfig {
            patch,
            d_enc: 384,
            enc_depth: 12,
            enc_heads: 6,
            enc_mlp: 1536,
            d_dec: 192,
            dec_depth: 4,
            dec_heads: 3,
            dec_mlp: 768,
            n_classes: 0,
            drop_path_rate: 0.0,
        }
    }

    /// Desk-scale model used by the overfit and downstream runs.
    pub fn tiny(patch: PatchConfig) -> Self {
        ModelConfig {
            patch,
            d_enc: 64,
            enc_depth: 4,
            enc_heads: 4,
            enc_mlp: 256,
            d_dec: 32,
            dec_depth: 2,
            dec_heads: 2,
            dec_mlp: 128,
            n_classes: 0,
            drop_path_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        let dims = [
            ("d_enc", self.d_enc, "enc_heads", self.enc_heads),
            ("d_dec", self.d_dec, "dec_heads", self.dec_heads),
        ];
        for (dk, d, hk, h) in dims {
            if d == 0 || d % 2 != 0 {
                return Err(Error::config(dk, format!("must be a positive even number, got {d}")));
            }
            if h == 0 || d % h != 0 {
                return Err(Error::config(hk, format!("{h} heads do not divide {dk}={d}")));
            }
        }
        if self.enc_mlp == 0 {
            return Err(Error::config("enc_mlp", "must be positive"));
        }
        if self.dec_mlp == 0 {
            return Err(Error::config("dec_mlp", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(
                "drop_path",
                format!("must lie in [0, 1), got {}", self.drop_path_rate),
            ));
        }
        Ok(())
    }

    /// Flat numeric encoding stored in checkpoints.
    pub fn to_vec(&self) -> Vec<f64> {
        let p = &self.patch;
        [
            p.t_patch,
            p.h_patch,
            p.w_patch,
            p.channels,
            p.frames,
            p.height,
            p.width,
            self.d_enc,
            self.enc_depth,
            self.enc_heads,
            self.enc_mlp,
            self.d_dec,
            self.dec_depth,
            self.dec_heads,
            self.dec_mlp,
            self.n_classes,
        ]
        .iter()
        .map(|&v| v as f64)
        .chain(std::iter::once(self.drop_path_rate))
        .collect()
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != 17 || v[..16].iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(Error::Format {
                what: "model config",
                msg: format!("expected 16 counts and a rate, got {v:?}"),
            });
        }
        let u = |i: usize| v[i] as usize;
        let patch = PatchConfig::new((u(0), u(1), u(2)), u(3), (u(4), u(5), u(6)))?;
        let cfg = ModelConfig {
            patch,
            d_enc: u(7),
            enc_depth: u(8),
            enc_heads: u(9),
            enc_mlp: u(10),
            d_dec: u(11),
            dec_depth: u(12),
            dec_heads: u(13),
            dec_mlp: u(14),
            n_classes: u(15),
            drop_path_rate: v[16],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Encoder-side tensors must agree for a checkpoint to be reused.
    pub fn same_encoder(&self, other: &ModelConfig) -> bool {
        self.patch == other.patch
            && self.d_enc == other.d_enc
            && self.enc_depth == other.enc_depth
            && self.enc_heads == other.enc_heads
            && self.enc_mlp == other.enc_mlp
    }
}
