use super::camera::CameraSpec;
use super::scene::SceneSpec;
use crate::error::{Error, Result};

/// A C×T×H×W clip with values in [0, 1], channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub view_id: u32,
    pub sample_id: u32,
    pub label: u32,
}

impl ClipTensor {
    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        ClipTensor {
            channels,
            frames,
            height,
            width,
            data: vec![0.0; channels * frames * height * width],
            view_id: 0,
            sample_id: 0,
            label: 0,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn index(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + t) * self.height + y) * self.width + x
    }

    pub fn at(&self, c: usize, t: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, t, y, x)]
    }

    /// Copy with identical metadata and new pixel data of the given size.
    pub fn with_data(&self, frames: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.channels * frames * height * width);
        ClipTensor {
            channels: self.channels,
            frames,
            height,
            width,
            data,
            view_id: self.view_id,
            sample_id: self.sample_id,
            label: self.label,
        }
    }
}

/// Rendered view: pixels plus per-frame motion mask (T·H·W, 1 where the actor
/// covers the pixel in this frame or the previous one).
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub clip: ClipTensor,
    pub motion_mask: Vec<u8>,
    /// Per-frame actor coverage (T·H·W), before the previous-frame union.
    pub actor_mask: Vec<u8>,
}

/// Z-buffered rasterization of every solid, one ray test per pixel center.
/// Frame `t` shows the actor at clip time `t * dt`.
pub fn render_clip(scene: &SceneSpec, cam: &CameraSpec, frames: usize, dt: f64) -> Result<RenderedView> {
    if frames < 2 {
        return Err(Error::invalid(
            "render_clip",
            format!("need at least 2 frames, got {frames}"),
        ));
    }
    let (h, w) = cam.image_size;
    let mut clip = ClipTensor::zeros(3, frames, h, w);
    let mut actor_mask = vec![0u8; frames * h * w];
    for t in 0..frames {
        let (pos, scale) = scene.actor_pose(t as f64 * dt);
        let actor = &scene.solids[scene.actor_index];
        let actor_off = [
            pos[0] - actor.center[0],
            pos[1] - actor.center[1],
            pos[2] - actor.center[2],
        ];
        let mut covered = 0usize;
        for y in 0..h {
            for x in 0..w {
                let dir = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                let mut best = f64::INFINITY;
                let mut rgb = scene.background;
                let mut is_actor = false;
                for (i, s) in scene.solids.iter().enumerate() {
                    let hit = if i == scene.actor_index {
                        s.intersect(cam.position, dir, actor_off, scale)
                    } else {
                        s.intersect(cam.position, dir, [0.0; 3], 1.0)
                    };
                    if let Some(d) = hit {
                        if d < best {
                            best = d;
                            rgb = s.color;
                            is_actor = i == scene.actor_index;
                        }
                    }
                }
                for (c, &v) in rgb.iter().enumerate() {
                    let idx = clip.index(c, t, y, x);
                    clip.data[idx] = v;
                }
                if is_actor {
                    actor_mask[(t * h + y) * w + x] = 1;
                    covered += 1;
                }
            }
        }
        if covered == 0 {
            return Err(Error::Generation(format!("actor not visible in frame {t}")));
        }
    }
    let plane = h * w;
    let motion_mask = (0..frames * plane)
        .map(|i| {
            let prev = if i >= plane { actor_mask[i - plane] } else { 0 };
            actor_mask[i] | prev
        })
        .collect();
    Ok(RenderedView {
        clip,
        motion_mask,
        actor_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::camera::project_point;
    use crate::synthdata::scene::{MotionKind, Solid, SolidKind, Trajectory};

    fn single_actor(kind: MotionKind) -> SceneSpec {
        SceneSpec {
            solids: vec![Solid {
                kind: SolidKind::Sphere { radius: 0.6 },
                center: [0.0; 3],
                color: [0.9, 0.5, 0.2],
            }],
            actor_index: 0,
            trajectory: Trajectory {
                kind,
                amplitude: 1.2,
                period: 1.0,
                phase: 0.0,
                direction: 1.0,
            },
            background: [0.1, 0.1, 0.1],
        }
    }

    fn mask_centroid_u(mask: &[u8], t: usize, h: usize, w: usize) -> f64 {
        let (mut s, mut n) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if mask[(t * h + y) * w + x] == 1 {
                    s += x as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        s / n
    }

    #[test]
    fn still_frames_are_identical() {
        let cam = CameraSpec::on_ring(30.0, 6.0, 1.0, (32, 32));
        let r = render_clip(&single_actor(MotionKind::Still), &cam, 8, 1.0 / 7.0).unwrap();
        let plane = 32 * 32;
        for c in 0..3 {
            for t in 1..8 {
                let a = &r.clip.data[(c * 8 + t) * plane..(c * 8 + t + 1) * plane];
                let b = &r.clip.data[(c * 8 + t - 1) * plane..(c * 8 + t) * plane];
                assert_eq!(a, b);
            }
        }
        assert_eq!(&r.motion_mask[plane..2 * plane], &r.actor_mask[..plane]);
    }

    #[test]
    fn translation_moves_silhouette_monotonically() {
        let cam = CameraSpec::on_ring(0.0, 6.0, 1.0, (32, 32));
        let scene = single_actor(MotionKind::TranslateX);
        let r = render_clip(&scene, &cam, 8, 1.0 / 7.0).unwrap();
        let us: Vec<f64> = (0..8).map(|t| mask_centroid_u(&r.actor_mask, t, 32, 32)).collect();
        // Projected trajectory sets the expected direction.
        let p0 = project_point(&cam, scene.actor_pose(0.0).0).unwrap().u;
        let p1 = project_point(&cam, scene.actor_pose(1.0).0).unwrap().u;
        let sign = (p1 - p0).signum();
        assert!(sign != 0.0);
        for t in 1..8 {
            assert!((us[t] - us[t - 1]) * sign > 0.0, "{us:?}");
        }
    }

    #[test]
    fn mirrored_views_see_opposite_motion() {
        let scene = single_actor(MotionKind::TranslateX);
        let a = CameraSpec::on_ring(30.0, 6.0, 1.0, (32, 32));
        let b = CameraSpec::on_ring(150.0, 6.0, 1.0, (32, 32));
        let ra = render_clip(&scene, &a, 8, 1.0 / 7.0).unwrap();
        let rb = render_clip(&scene, &b, 8, 1.0 / 7.0).unwrap();
        let da = mask_centroid_u(&ra.actor_mask, 7, 32, 32) - mask_centroid_u(&ra.actor_mask, 0, 32, 32);
        let db = mask_centroid_u(&rb.actor_mask, 7, 32, 32) - mask_centroid_u(&rb.actor_mask, 0, 32, 32);
        assert!(da * db < 0.0, "{da} {db}");
        // Same sign as the projected velocity.
        let va = a.rotate([1.0, 0.0, 0.0])[0];
        assert_eq!(da.signum(), va.signum());
    }

    #[test]
    fn invisible_actor_is_a_generation_error() {
        let mut scene = single_actor(MotionKind::Still);
        scene.solids[0].center = [0.0, 40.0, 0.0];
        let cam = CameraSpec::on_ring(0.0, 6.0, 1.0, (16, 16));
        assert!(matches!(render_clip(&scene, &cam, 4, 0.25), Err(Error::Generation(_))));
        assert!(render_clip(&single_actor(MotionKind::Still), &cam, 1, 0.25).is_err());
    }
}
