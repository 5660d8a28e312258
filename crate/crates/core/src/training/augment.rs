use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Domain};
use crate::synthdata::ClipTensor;

/// Source window in pixel units plus an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub y0: f64,
    pub x0: f64,
    pub h: f64,
    pub w: f64,
    pub flip: bool,
}

impl Crop {
    pub fn full(height: usize, width: usize) -> Self {
        Crop {
            y0: 0.0,
            x0: 0.0,
            h: height as f64,
            w: width as f64,
            flip: false,
        }
    }

    pub fn flipped(self) -> Self {
        Crop {
            flip: !self.flip,
            ..self
        }
    }
}

pub const CROP_SCALE: (f64, f64) = (0.5, 1.0);
const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Random-resized-crop window covering a `CROP_SCALE` share of the area.
pub fn random_resized_crop(height: usize, width: usize, key: &[u64]) -> Crop {
    let mut rng = keyed_rng(Domain::Crop, key);
    let area = (height * width) as f64;
    for _ in 0..10 {
        let s = rng.gen_range(CROP_SCALE.0..=CROP_SCALE.1);
        let r = rng.gen_range(CROP_RATIO.0.ln()..=CROP_RATIO.1.ln()).exp();
        let w = (s * area * r).sqrt();
        let h = (s * area / r).sqrt();
        if w <= width as f64 && h <= height as f64 {
            return Crop {
                y0: rng.gen_range(0.0..=height as f64 - h),
                x0: rng.gen_range(0.0..=width as f64 - w),
                h,
                w,
                flip: false,
            };
        }
    }
    Crop::full(height, width)
}

/// Evaluation views: full frame (1), plus its flip (2), or center and four
/// corner crops at 7/8 side, each with its flip (10).
pub fn eval_crops(height: usize, width: usize, n_crops: usize) -> Result<Vec<Crop>> {
    let full = Crop::full(height, width);
    match n_crops {
        1 => Ok(vec![full]),
        2 => Ok(vec![full, full.flipped()]),
        10 => {
            let (h, w) = (height as f64 * 0.875, width as f64 * 0.875);
            let (dy, dx) = (height as f64 - h, width as f64 - w);
            let base = [(dy / 2.0, dx / 2.0), (0.0, 0.0), (0.0, dx), (dy, 0.0), (dy, dx)];
            Ok(base
                .iter()
                .flat_map(|&(y0, x0)| {
                    let c = Crop {
                        y0,
                        x0,
                        h,
                        w,
                        flip: false,
                    };
                    [c, c.flipped()]
                })
                .collect())
        }
        n => Err(Error::config("n_crops", format!("must be 1, 2 or 10, got {n}"))),
    }
}

/// Evenly spaced clip starts covering the available frames.
pub fn clip_starts(available: usize, frames: usize, n_clips: usize) -> Result<Vec<usize>> {
    if n_clips == 0 {
        return Err(Error::config("n_clips", "must be at least 1"));
    }
    if frames > available {
        return Err(Error::config(
            "frames",
            format!("model needs {frames} frames, dataset has {available}"),
        ));
    }
    let span = available - frames;
    if n_clips == 1 {
        return Ok(vec![span / 2]);
    }
    Ok((0..n_clips)
        .map(|i| ((i * span) as f64 / (n_clips - 1) as f64).round() as usize)
        .collect())
}

/// Bilinear resample of frames `t0..t0+frames` inside `crop` to
/// `out_h × out_w`. The full window at equal size is an exact copy.
pub fn resample(clip: &ClipTensor, t0: usize, frames: usize, crop: Crop, out_h: usize, out_w: usize) -> ClipTensor {
    let [c, t, h, w] = clip.dims();
    debug_assert!(t0 + frames <= t);
    let sy = crop.h / out_h as f64;
    let sx = crop.w / out_w as f64;
    let taps = |o: usize, start: f64, scale: f64, n: usize| {
        let s = (start + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| taps(o, crop.y0, sy, h)).collect();
    let xs: Vec<_> = (0..out_w)
        .map(|o| taps(if crop.flip { out_w - 1 - o } else { o }, crop.x0, sx, w))
        .collect();
    let mut data = Vec::with_capacity(c * frames * out_h * out_w);
    for ch in 0..c {
        for f in t0..t0 + frames {
            let base = (ch * t + f) * h * w;
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let p = |y: usize, x: usize| clip.data[base + y * w + x];
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    data.push(if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy });
                }
            }
        }
    }
    clip.with_data(frames, out_h, out_w, data)
}
