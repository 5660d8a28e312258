use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::camera::{project_point, CameraSpec};
use super::render::{render_clip, ClipTensor};
use super::scene::{MotionKind, SceneSpec, NUM_MOTION_KINDS};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Domain};

pub const DATASET_MAGIC: &[u8; 4] = b"MV2D";
pub const DATASET_VERSION: u32 = 1;

const RING_RADIUS: f64 = 6.0;
const RING_HEIGHT: f64 = 1.0;
const RING_STEP_DEG: f64 = 30.0;
const MAX_ATTEMPTS: u64 = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub n_views: usize,
    /// Relative class frequencies; its length is the number of classes.
    pub class_mix: Vec<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl GenConfig {
    pub fn uniform(seed: u64, n_samples: usize, n_views: usize, n_classes: usize, frames: usize, size: usize) -> Self {
        GenConfig {
            seed,
            n_samples,
            n_views,
            class_mix: vec![1.0; n_classes],
            frames,
            height: size,
            width: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::config(
                "views",
                "cross-view reconstruction needs at least 2 views",
            ));
        }
        if self.n_views > (360.0 / RING_STEP_DEG) as usize {
            return Err(Error::config("views", "at most 12 ring cameras"));
        }
        if self.class_mix.is_empty() || self.class_mix.len() > NUM_MOTION_KINDS {
            return Err(Error::config(
                "classes",
                format!("between 1 and {NUM_MOTION_KINDS} classes"),
            ));
        }
        if self.class_mix.iter().any(|&w| !(w >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(
                "class_mix",
                "weights must be nonnegative with a positive sum",
            ));
        }
        if self.frames < 2 {
            return Err(Error::config("frames", "need at least 2 frames"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("size", "image too small"));
        }
        Ok(())
    }
}

/// Ring of cameras at azimuths 0°, 30°, 60°, ... around the origin.
pub fn camera_ring(n_views: usize, height: usize, width: usize) -> Vec<CameraSpec> {
    (0..n_views)
        .map(|v| CameraSpec::on_ring(RING_STEP_DEG * v as f64, RING_RADIUS, RING_HEIGHT, (height, width)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    pub sample_id: u32,
    pub label: u32,
    pub seed: u64,
    pub clips: Vec<ClipTensor>,
    /// One T·H·W mask per view.
    pub motion_masks: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_views: usize,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<MultiViewSample>,
}

/// Stratified label assignment: exact per-class counts by largest remainder,
/// then a seeded shuffle.
pub fn stratified_labels(seed: u64, n: usize, mix: &[f64]) -> Vec<u32> {
    let total: f64 = mix.iter().sum();
    let quotas: Vec<f64> = mix.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    let mut labels: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k as u32, c))
        .collect();
    labels.shuffle(&mut keyed_rng(Domain::Labels, &[seed]));
    labels
}

/// Renders one sample from its scene seed. Fails if the actor center is not
/// visible in every frame of every view.
pub fn render_sample(
    sample_id: u32,
    label: u32,
    scene_seed: u64,
    cams: &[CameraSpec],
    frames: usize,
) -> Result<MultiViewSample> {
    let kind = MotionKind::from_label(label).ok_or_else(|| Error::Generation(format!("unknown label {label}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let scene = SceneSpec::random(kind, &mut rng);
    let dt = 1.0 / (frames - 1) as f64;
    let mut clips = Vec::with_capacity(cams.len());
    let mut masks = Vec::with_capacity(cams.len());
    for (v, cam) in cams.iter().enumerate() {
        let r = render_clip(&scene, cam, frames, dt)?;
        let (h, w) = cam.image_size;
        for t in 0..frames {
            let p = project_point(cam, scene.actor_pose(t as f64 * dt).0)?;
            let (x, y) = (p.u.floor(), p.v.floor());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return Err(Error::Generation(format!("actor leaves view {v} at frame {t}")));
            }
            if r.actor_mask[(t * h + y as usize) * w + x as usize] == 0 {
                return Err(Error::Generation(format!("actor occluded in view {v} at frame {t}")));
            }
        }
        let mut clip = r.clip;
        clip.view_id = v as u32;
        clip.sample_id = sample_id;
        clip.label = label;
        clips.push(clip);
        masks.push(r.motion_mask);
    }
    Ok(MultiViewSample {
        sample_id,
        label,
        seed: scene_seed,
        clips,
        motion_masks: masks,
    })
}

/// Generates `n_samples` synchronized multi-view samples. Output depends only
/// on the configuration.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let labels = stratified_labels(cfg.seed, cfg.n_samples, &cfg.class_mix);
    let cams = camera_ring(cfg.n_views, cfg.height, cfg.width);
    let samples = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut last = None;
            for attempt in 0..MAX_ATTEMPTS {
                let scene_seed: u64 = keyed_rng(Domain::Scene, &[cfg.seed, i as u64, attempt]).gen();
                match render_sample(i as u32, label, scene_seed, &cams, cfg.frames) {
                    Ok(s) => return Ok(s),
                    Err(e @ Error::Generation(_)) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last.unwrap_or_else(|| Error::Generation("no attempts".into())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        n_views: cfg.n_views,
        channels: 3,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        samples,
    })
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Dataset {
    pub fn n_classes_present(&self) -> usize {
        self.samples.iter().map(|s| s.label as usize + 1).max().unwrap_or(0)
    }

    pub fn clip_len(&self) -> usize {
        self.channels * self.frames * self.height * self.width
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [
            self.samples.len(),
            self.n_views,
            self.frames,
            self.height,
            self.width,
            self.channels,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.clip_len() * 4);
        for s in &self.samples {
            w.write_all(&s.label.to_le_bytes())?;
            w.write_all(&s.seed.to_le_bytes())?;
            for c in &s.clips {
                buf.clear();
                for v in &c.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            for m in &s.motion_masks {
                w.write_all(m)?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<u64> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))?;
        let len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        Ok(len)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            what: "dataset file",
            msg,
        };
        let io = |e: std::io::Error| bad(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != DATASET_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(io)?;
        if version != DATASET_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut hdr = [0usize; 6];
        for h in hdr.iter_mut() {
            *h = read_u32(r).map_err(io)? as usize;
        }
        let [n_samples, n_views, frames, height, width, channels] = hdr;
        let clip_len = channels * frames * height * width;
        let mask_len = frames * height * width;
        let mut samples = Vec::with_capacity(n_samples);
        let mut buf = vec![0u8; clip_len * 4];
        for i in 0..n_samples {
            let label = read_u32(r).map_err(io)?;
            let seed = read_u64(r).map_err(io)?;
            let mut clips = Vec::with_capacity(n_views);
            for v in 0..n_views {
                r.read_exact(&mut buf).map_err(io)?;
                let data = buf
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                clips.push(ClipTensor {
                    channels,
                    frames,
                    height,
                    width,
                    data,
                    view_id: v as u32,
                    sample_id: i as u32,
                    label,
                });
            }
            let mut masks = Vec::with_capacity(n_views);
            for _ in 0..n_views {
                let mut m = vec![0u8; mask_len];
                r.read_exact(&mut m).map_err(io)?;
                masks.push(m);
            }
            samples.push(MultiViewSample {
                sample_id: i as u32,
                label,
                seed,
                clips,
                motion_masks: masks,
            });
        }
        Ok(Dataset {
            n_views,
            channels,
            frames,
            height,
            width,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}
