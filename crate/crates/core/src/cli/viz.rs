//! Binary PPM figures: motion-weight overlays, masked reconstructions and
//! cross-attention heat maps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::masking::{make_mask, MaskKey, MaskStrategy};
use crate::model::{attention_map_extract, AttentionKind, Checkpoint, Forward, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::objective::{motion_weights, ViewInput, Weighting};
use crate::synthdata::{ClipTensor, Dataset, MultiViewSample};
use crate::tokenizer::{
    denormalize_patches, patch_stats, patchify, standardize_clip, unpatchify, PatchConfig, TARGET_EPS,
};
use crate::training::{check_dataset, model_clip, Crop};

/// Mask epoch used for figures, outside any training epoch.
pub const FIGURE_EPOCH: u64 = u64::MAX - 1;
const MASKED_GRAY: f32 = 0.5;

/// RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    /// Copies `panel` with its top-left corner at (`x0`, `y0`).
    pub fn blit(&mut self, panel: &Canvas, x0: usize, y0: usize) {
        for y in 0..panel.height.min(self.height.saturating_sub(y0)) {
            for x in 0..panel.width.min(self.width.saturating_sub(x0)) {
                self.pixels[(y0 + y) * self.width + x0 + x] = panel.pixels[y * panel.width + x];
            }
        }
    }

    /// Panels laid out in a grid of rows.
    pub fn grid(rows: &[Vec<Canvas>]) -> Canvas {
        let cell_w = rows.iter().flatten().map(|c| c.width).max().unwrap_or(0);
        let cell_h = rows.iter().flatten().map(|c| c.height).max().unwrap_or(0);
        let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut out = Canvas::new(cols * cell_w, rows.len() * cell_h);
        for (r, row) in rows.iter().enumerate() {
            for (c, panel) in row.iter().enumerate() {
                out.blit(panel, c * cell_w, r * cell_h);
            }
        }
        out
    }

    /// P6 encoding with 8-bit channels.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            for &v in p {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Blue to red through cyan, green and yellow for `x` in [0, 1].
pub fn colormap(x: f64) -> [f64; 3] {
    let x = x.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * x - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Frame `t` of a clip as RGB; single-channel clips are shown in gray.
pub fn frame_canvas(clip: &ClipTensor, t: usize) -> Canvas {
    let [c, _, h, w] = clip.dims();
    let mut out = Canvas::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| clip.at(ch.min(c - 1), t, y, x) as f64;
            out.pixels[y * w + x] = [px(0), px(1), px(2)];
        }
    }
    out
}

/// `0.5·frame + 0.5·colormap(heat)` with one heat value per pixel.
pub fn overlay(frame: &Canvas, heat: &[f64]) -> Canvas {
    let pixels = frame
        .pixels
        .iter()
        .zip(heat)
        .map(|(p, &h)| {
            let c = colormap(h);
            [
                0.5 * p[0] + 0.5 * c[0],
                0.5 * p[1] + 0.5 * c[1],
                0.5 * p[2] + 0.5 * c[2],
            ]
        })
        .collect();
    Canvas {
        pixels,
        ..frame.clone()
    }
}

/// Token index of every pixel of frame `t`.
pub fn pixel_tokens(cfg: &PatchConfig, t: usize) -> Vec<usize> {
    let (_, gh, gw) = cfg.grid();
    let mut out = Vec::with_capacity(cfg.height * cfg.width);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            out.push(((t / cfg.t_patch) * gh + y / cfg.h_patch) * gw + x / cfg.w_patch);
        }
    }
    out
}

/// Per-token values spread over frame `t`, divided by the largest value.
fn heat(values: &[f64], cfg: &PatchConfig, t: usize) -> Vec<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    pixel_tokens(cfg, t).into_iter().map(|i| values[i] * scale).collect()
}

fn sample(ds: &Dataset, id: usize) -> Result<&MultiViewSample> {
    ds.samples
        .get(id)
        .ok_or_else(|| Error::config("sample", format!("{id} out of range for {} samples", ds.samples.len())))
}

fn view_clip(ds: &Dataset, s: &MultiViewSample, view: usize, patch: &PatchConfig) -> Result<ClipTensor> {
    let clip = s
        .clips
        .get(view)
        .ok_or_else(|| Error::config("view", format!("{view} out of range for {} views", ds.n_views)))?;
    Ok(model_clip(clip, 0, Crop::full(ds.height, ds.width), patch))
}

/// Writes `motion_weights_t<T>.ppm` per temperature and `motion_weights.tsv`
/// with one row per token. Returns the weights per temperature.
pub fn motion_weights_figure(
    ds: &Dataset,
    patch: &PatchConfig,
    sample_id: usize,
    view: usize,
    temperatures: &[f64],
    out_dir: &Path,
) -> Result<Vec<Vec<f64>>> {
    check_dataset(ds, patch)?;
    let s = sample(ds, sample_id)?;
    let clip = view_clip(ds, s, view, patch)?;
    let std = standardize_clip(&clip);
    let mut all = Vec::with_capacity(temperatures.len());
    for &tau in temperatures {
        let w = motion_weights(&std, patch, tau)?.weights;
        let panels: Vec<Canvas> = (0..patch.frames)
            .map(|t| overlay(&frame_canvas(&clip, t), &heat(&w, patch, t)))
            .collect();
        Canvas::grid(&[panels]).save(&out_dir.join(format!("motion_weights_t{tau}.ppm")))?;
        all.push(w);
    }
    let mut tsv = String::from("token");
    for tau in temperatures {
        let _ = write!(tsv, "\tt{tau}");
    }
    tsv.push('\n');
    for i in 0..patch.num_tokens() {
        let _ = write!(tsv, "{i}");
        for w in &all {
            let _ = write!(tsv, "\t{:?}", w[i]);
        }
        tsv.push('\n');
    }
    let path = out_dir.join("motion_weights.tsv");
    std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
    Ok(all)
}

/// Which views and which mask a cross-view figure uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSpec {
    pub sample: usize,
    pub source_view: usize,
    pub target_view: usize,
    pub rho: f64,
    pub mask: MaskStrategy,
    pub seed: u64,
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let c = Checkpoint::load(path)?;
    let params = c.params::<f32>("");
    Ok((c.config, params))
}

struct Pair {
    sv: ViewInput<f32>,
    tv: ViewInput<f32>,
    sv_clip: ClipTensor,
    tv_clip: ClipTensor,
}

fn pair(ds: &Dataset, cfg: &ModelConfig, spec: &PairSpec) -> Result<Pair> {
    check_dataset(ds, &cfg.patch)?;
    if spec.source_view == spec.target_view {
        return Err(Error::config("target_view", "must differ from the source view"));
    }
    let s = sample(ds, spec.sample)?;
    let patch = &cfg.patch;
    let input = |v: usize| -> Result<(ClipTensor, ViewInput<f32>)> {
        let clip = view_clip(ds, s, v, patch)?;
        let key = MaskKey {
            seed: spec.seed,
            sample_id: s.sample_id as u64,
            epoch: FIGURE_EPOCH,
            view: v as u64,
        };
        let plan = make_mask(spec.mask, patch.grid(), spec.rho, key)?;
        let vi = ViewInput::new(&clip, patch, plan, Weighting::Uniform, false)?;
        Ok((clip, vi))
    };
    let (sv_clip, sv) = input(spec.source_view)?;
    let (tv_clip, tv) = input(spec.target_view)?;
    Ok(Pair {
        sv,
        tv,
        sv_clip,
        tv_clip,
    })
}

/// Target-view reconstruction by the cross-view decoder. Rows of
/// `recon.ppm`: source input, target input, masked target, reconstruction.
/// Returns the reconstructed clip.
pub fn recon_figure(
    ds: &Dataset,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    spec: &PairSpec,
    out_dir: &Path,
) -> Result<ClipTensor> {
    let p = pair(ds, cfg, spec)?;
    let mut f = Forward::new(*cfg, params);
    let xs = f.embed(&p.sv.visible_patches, &p.sv.plan.visible)?;
    let es = f.encoder(xs, None)?;
    let src = f.project_source(es, &p.sv.plan.visible)?;
    let xt = f.embed(&p.tv.visible_patches, &p.tv.plan.visible)?;
    let et = f.encoder(xt, None)?;
    let full = f.assemble_decoder_input(et, &p.tv.plan)?;
    let pred = f.cross_view_decoder(full, &[src], Some(&p.tv.plan.masked))?;
    let pred: Tensor<f64> = f.g.value(pred).cast();

    let patch = &cfg.patch;
    let raw: Tensor<f64> = patchify(&p.tv_clip, patch)?;
    let stats = patch_stats(&raw);
    let masked_stats: Vec<(f64, f64)> = p.tv.plan.masked.iter().map(|&i| stats[i]).collect();
    let pixels = denormalize_patches(&pred, &masked_stats, TARGET_EPS);
    let dim = patch.patch_dim();
    let mut recon = raw.clone();
    let mut hidden = raw;
    for (r, &i) in p.tv.plan.masked.iter().enumerate() {
        recon.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(&pixels.data()[r * dim..(r + 1) * dim]);
        hidden.data_mut()[i * dim..(i + 1) * dim].fill(MASKED_GRAY as f64);
    }
    let recon = unpatchify(&recon, patch)?;
    let hidden = unpatchify(&hidden, patch)?;
    let row = |c: &ClipTensor| (0..patch.frames).map(|t| frame_canvas(c, t)).collect::<Vec<_>>();
    Canvas::grid(&[row(&p.sv_clip), row(&p.tv_clip), row(&hidden), row(&recon)]).save(&out_dir.join("recon.ppm"))?;
    Ok(recon)
}

/// Which attention row [`xattn_figure`] shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuerySpec {
    pub layer: usize,
    pub head: usize,
    /// Target-view token; `None` picks the first masked one.
    pub query: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XattnRow {
    pub query: usize,
    /// Source token index of each key.
    pub key_tokens: Vec<usize>,
    /// The extracted attention row, one weight per key.
    pub weights: Vec<f64>,
}

/// One query's cross-attention row over the visible source tokens, written
/// to `xattn.tsv` and overlaid on the source frames in `xattn.ppm`.
pub fn xattn_figure(
    ds: &Dataset,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    spec: &PairSpec,
    q: &QuerySpec,
    out_dir: &Path,
) -> Result<XattnRow> {
    let p = pair(ds, cfg, spec)?;
    let n = cfg.patch.num_tokens();
    let query = q.query.unwrap_or(p.tv.plan.masked[0]);
    if query >= n {
        return Err(Error::config("query", format!("{query} out of range for {n} tokens")));
    }
    let mut f = Forward::new(*cfg, params).record_attention();
    let xs = f.embed(&p.sv.visible_patches, &p.sv.plan.visible)?;
    let es = f.encoder(xs, None)?;
    let src = f.project_source(es, &p.sv.plan.visible)?;
    let xt = f.embed(&p.tv.visible_patches, &p.tv.plan.visible)?;
    let et = f.encoder(xt, None)?;
    let full = f.assemble_decoder_input(et, &p.tv.plan)?;
    f.cross_view_decoder(full, &[src], None)?;
    let weights = attention_map_extract(&f.attention, AttentionKind::CrossDecoder, q.layer, q.head, query)?;
    let key_tokens = p.sv.plan.visible.clone();

    let mut tsv = String::from("key\tsource_token\tweight\n");
    for (k, (&tok, w)) in key_tokens.iter().zip(&weights).enumerate() {
        let _ = writeln!(tsv, "{k}\t{tok}\t{w:?}");
    }
    let path = out_dir.join("xattn.tsv");
    std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;

    let mut per_token = vec![0.0; n];
    for (&tok, &w) in key_tokens.iter().zip(&weights) {
        per_token[tok] = w;
    }
    let patch = &cfg.patch;
    let panels: Vec<Canvas> = (0..patch.frames)
        .map(|t| overlay(&frame_canvas(&p.sv_clip, t), &heat(&per_token, patch, t)))
        .collect();
    Canvas::grid(&[panels]).save(&out_dir.join("xattn.ppm"))?;
    Ok(XattnRow {
        query,
        key_tokens,
        weights,
    })
}

/// Files a figure kind writes into its output directory.
pub fn figure_files(kind: &str, temperatures: &[f64]) -> Vec<PathBuf> {
    match kind {
        "motion-weights" => temperatures
            .iter()
            .map(|t| PathBuf::from(format!("motion_weights_t{t}.ppm")))
            .chain(std::iter::once(PathBuf::from("motion_weights.tsv")))
            .collect(),
        "recon" => vec![PathBuf::from("recon.ppm")],
        "xattn" => vec![PathBuf::from("xattn.ppm"), PathBuf::from("xattn.tsv")],
        _ => Vec::new(),
    }
}
