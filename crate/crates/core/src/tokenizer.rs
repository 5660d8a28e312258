//! Clip ↔ patch conversion, token embedding and positional encodings.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::synthdata::ClipTensor;

pub const TARGET_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub t_patch: usize,
    pub h_patch: usize,
    pub w_patch: usize,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchConfig {
    pub fn new(
        (t_patch, h_patch, w_patch): (usize, usize, usize),
        channels: usize,
        (frames, height, width): (usize, usize, usize),
    ) -> Result<Self> {
        let cfg = PatchConfig {
            t_patch,
            h_patch,
            w_patch,
            channels,
            frames,
            height,
            width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("t_patch", self.t_patch, self.frames),
            ("h_patch", self.h_patch, self.height),
            ("w_patch", self.w_patch, self.width),
        ];
        for (key, p, total) in dims {
            if p == 0 || total == 0 || total % p != 0 {
                return Err(Error::config(key, format!("patch size {p} must divide {total}")));
            }
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        Ok(())
    }

    /// Token grid (T/t, H/h, W/w).
    pub fn grid(&self) -> (usize, usize, usize) {
        (
            self.frames / self.t_patch,
            self.height / self.h_patch,
            self.width / self.w_patch,
        )
    }

    pub fn num_tokens(&self) -> usize {
        let (a, b, c) = self.grid();
        a * b * c
    }

    pub fn patch_dim(&self) -> usize {
        self.t_patch * self.h_patch * self.w_patch * self.channels
    }

    fn check_clip(&self, clip: &ClipTensor) -> Result<()> {
        let want = [self.channels, self.frames, self.height, self.width];
        if clip.dims() != want {
            return Err(Error::shape("patchify", &clip.dims(), &want));
        }
        Ok(())
    }

    /// For each patch row element, the flat clip index it reads.
    fn for_each_element(&self, mut f: impl FnMut(usize, usize)) {
        let (gt, gh, gw) = self.grid();
        let (pt, ph, pw, c) = (self.t_patch, self.h_patch, self.w_patch, self.channels);
        let (h, w) = (self.height, self.width);
        let mut out = 0;
        for it in 0..gt {
            for ih in 0..gh {
                for iw in 0..gw {
                    for dt in 0..pt {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                for ch in 0..c {
                                    let t = it * pt + dt;
                                    let y = ih * ph + dy;
                                    let x = iw * pw + dx;
                                    f(out, ((ch * self.frames + t) * h + y) * w + x);
                                    out += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits a clip into N rows of `t·h·w·C` values. Patches are ordered
/// time-major, then height, then width; inside a row the order is
/// (dt, dy, dx, channel).
pub fn patchify<T: Scalar>(clip: &ClipTensor, cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.check_clip(clip)?;
    let mut data = vec![T::zero(); clip.data.len()];
    cfg.for_each_element(|o, i| data[o] = T::from_f64(clip.data[i] as f64));
    Tensor::new(&[cfg.num_tokens(), cfg.patch_dim()], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, cfg: &PatchConfig) -> Result<ClipTensor> {
    let want = [cfg.num_tokens(), cfg.patch_dim()];
    if patches.shape() != want {
        return Err(Error::shape("unpatchify", patches.shape(), &want));
    }
    let mut clip = ClipTensor::zeros(cfg.channels, cfg.frames, cfg.height, cfg.width);
    let src = patches.data();
    cfg.for_each_element(|o, i| clip.data[i] = src[o].as_f64() as f32);
    Ok(clip)
}

/// Pixel standardization applied before embedding: `(x - 0.5) / 0.5`.
pub fn standardize_clip(clip: &ClipTensor) -> ClipTensor {
    let data = clip.data.iter().map(|&v| (v - 0.5) / 0.5).collect();
    clip.with_data(clip.frames, clip.height, clip.width, data)
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(...)` over the
/// flattened spatio-temporal index `p`.
pub fn sinusoidal_pos_embed<T: Scalar>(n: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) {
        return Err(Error::invalid(
            "sinusoidal_pos_embed",
            format!("dimension {d} must be even"),
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for p in 0..n {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Tensor::new(&[n, d], data)
}

/// Per-row mean and population standard deviation.
pub fn patch_stats<T: Scalar>(patches: &Tensor<T>) -> Vec<(f64, f64)> {
    let cols = patches.shape()[1];
    patches
        .data()
        .chunks(cols)
        .map(|row| {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            (mean, var.sqrt())
        })
        .collect()
}

/// Reconstruction targets: each row minus its mean, divided by (std + eps).
pub fn normalize_patch_targets<T: Scalar>(patches: &Tensor<T>, eps: f64) -> Tensor<T> {
    let cols = patches.shape()[1];
    let stats = patch_stats(patches);
    let data = patches
        .data()
        .chunks(cols)
        .zip(&stats)
        .flat_map(|(row, &(mean, std))| row.iter().map(move |v| T::from_f64((v.as_f64() - mean) / (std + eps))))
        .collect();
    Tensor::new(patches.shape(), data).expect("same shape")
}

/// Undoes [`normalize_patch_targets`] with the given row statistics.
pub fn denormalize_patches<T: Scalar>(patches: &Tensor<T>, stats: &[(f64, f64)], eps: f64) -> Tensor<T> {
    let cols = patches.shape()[1];
    let data = patches
        .data()
        .chunks(cols)
        .zip(stats)
        .flat_map(|(row, &(mean, std))| row.iter().map(move |v| T::from_f64(v.as_f64() * (std + eps) + mean)))
        .collect();
    Tensor::new(patches.shape(), data).expect("same shape")
}

/// Token embeddings of one clip (or a subset of its patches).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    /// [n, d]
    pub tokens: Tensor<T>,
    /// Original flattened patch index of each row.
    pub token_index: Vec<usize>,
    pub view_id: u32,
    pub is_encoded: bool,
}

/// `patches · W + b + pos[token_index]` recorded on a graph.
pub fn embed_in<T: Scalar>(g: &mut Graph<T>, patches: Var, weight: Var, bias: Var, pos_rows: Tensor<T>) -> Result<Var> {
    let lin = g.matmul(patches, weight)?;
    let lin = g.add(lin, bias)?;
    let pos = g.constant(pos_rows);
    g.add(lin, pos)
}

/// Rows of `pos_embed` selected by `token_index`.
pub fn select_rows<T: Scalar>(table: &Tensor<T>, index: &[usize]) -> Tensor<T> {
    let d = table.shape()[1];
    let data = index.iter().flat_map(|&i| table.row(i).iter().copied()).collect();
    Tensor::new(&[index.len(), d], data).expect("row selection")
}

/// Embeds the patch rows whose original indices are `token_index`.
pub fn embed_tokens<T: Scalar>(
    patches: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pos_embed: &Tensor<T>,
    token_index: &[usize],
    view_id: u32,
) -> Result<TokenBatch<T>> {
    if patches.shape()[0] != token_index.len() {
        return Err(Error::shape("embed_tokens", patches.shape(), &[token_index.len()]));
    }
    if let Some(&bad) = token_index.iter().find(|&&i| i >= pos_embed.shape()[0]) {
        return Err(Error::invalid(
            "embed_tokens",
            format!("token index {bad} out of range"),
        ));
    }
    let mut g = Graph::new();
    let p = g.constant(patches.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let out = embed_in(&mut g, p, w, b, select_rows(pos_embed, token_index))?;
    Ok(TokenBatch {
        tokens: g.value(out).clone(),
        token_index: token_index.to_vec(),
        view_id,
        is_encoded: false,
    })
}
