use std::f64::consts::PI;

use rand::Rng;

use super::camera::Vec3;

/// Motion pattern of the actor. The discriminant is the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionKind {
    TranslateX = 0,
    TranslateY = 1,
    TranslateZ = 2,
    CircleXy = 3,
    OscillateX = 4,
    Still = 5,
    Zigzag = 6,
    ScalePulse = 7,
}

pub const NUM_MOTION_KINDS: usize = 8;

impl MotionKind {
    pub const ALL: [MotionKind; NUM_MOTION_KINDS] = [
        MotionKind::TranslateX,
        MotionKind::TranslateY,
        MotionKind::TranslateZ,
        MotionKind::CircleXy,
        MotionKind::OscillateX,
        MotionKind::Still,
        MotionKind::Zigzag,
        MotionKind::ScalePulse,
    ];

    pub fn from_label(label: u32) -> Option<Self> {
        Self::ALL.get(label as usize).copied()
    }

    pub fn label(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::TranslateX => "translate_x",
            MotionKind::TranslateY => "translate_y",
            MotionKind::TranslateZ => "translate_z",
            MotionKind::CircleXy => "circle_xy",
            MotionKind::OscillateX => "oscillate_x",
            MotionKind::Still => "still",
            MotionKind::Zigzag => "zigzag",
            MotionKind::ScalePulse => "scale_pulse",
        }
    }
}

/// Actor trajectory over normalized clip time `u ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub kind: MotionKind,
    pub amplitude: f64,
    /// Cycle length in normalized time (periodic kinds only).
    pub period: f64,
    pub phase: f64,
    /// +1 or -1, direction of the linear kinds.
    pub direction: f64,
}

fn triangle(s: f64) -> f64 {
    1.0 - 4.0 * (s - s.floor() - 0.5).abs()
}

impl Trajectory {
    pub fn still() -> Self {
        Trajectory {
            kind: MotionKind::Still,
            amplitude: 0.0,
            period: 1.0,
            phase: 0.0,
            direction: 1.0,
        }
    }

    pub fn sample(kind: MotionKind, rng: &mut impl Rng) -> Self {
        let period = match kind {
            MotionKind::CircleXy => 1.0,
            MotionKind::OscillateX | MotionKind::Zigzag | MotionKind::ScalePulse => 0.5,
            _ => 1.0,
        };
        Trajectory {
            kind,
            amplitude: rng.gen_range(0.9..1.3),
            period,
            phase: rng.gen_range(0.0..2.0 * PI),
            direction: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        }
    }

    /// Offset from the actor's base position and size multiplier at time `u`.
    pub fn pose_at(&self, u: f64) -> (Vec3, f64) {
        let a = self.amplitude;
        let lin = self.direction * a * (2.0 * u - 1.0);
        let ang = 2.0 * PI * u / self.period + self.phase;
        match self.kind {
            MotionKind::TranslateX => ([lin, 0.0, 0.0], 1.0),
            MotionKind::TranslateY => ([0.0, lin, 0.0], 1.0),
            MotionKind::TranslateZ => ([0.0, 0.0, lin], 1.0),
            MotionKind::CircleXy => ([a * ang.cos(), a * ang.sin(), 0.0], 1.0),
            MotionKind::OscillateX => ([a * ang.sin(), 0.0, 0.0], 1.0),
            MotionKind::Still => ([0.0; 3], 1.0),
            MotionKind::Zigzag => (
                [lin, 0.6 * a * triangle(u / self.period + self.phase / (2.0 * PI)), 0.0],
                1.0,
            ),
            MotionKind::ScalePulse => ([0.0; 3], 1.0 + 0.45 * ang.sin()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolidKind {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        half_extents: Vec3,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solid {
    pub kind: SolidKind,
    pub center: Vec3,
    pub color: [f32; 3],
}

impl Solid {
    /// Depth along `dir` (scaled so camera-frame z is 1) of the first hit.
    pub fn intersect(&self, origin: Vec3, dir: Vec3, offset: Vec3, scale: f64) -> Option<f64> {
        let c = [
            self.center[0] + offset[0],
            self.center[1] + offset[1],
            self.center[2] + offset[2],
        ];
        let o = [origin[0] - c[0], origin[1] - c[1], origin[2] - c[2]];
        match self.kind {
            SolidKind::Sphere { radius } => {
                let r = radius * scale;
                let a = dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2];
                let b = o[0] * dir[0] + o[1] * dir[1] + o[2] * dir[2];
                let cc = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - r * r;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > 0.0).then_some(t)
            }
            SolidKind::Cuboid { half_extents } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for k in 0..3 {
                    let h = half_extents[k] * scale;
                    if dir[k] == 0.0 {
                        if o[k].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let ta = (-h - o[k]) / dir[k];
                    let tb = (h - o[k]) / dir[k];
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
        }
    }

    /// Radius of a sphere enclosing the solid at unit scale.
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            SolidKind::Sphere { radius } => radius,
            SolidKind::Cuboid { half_extents: h } => (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt(),
        }
    }
}

/// A static scene with exactly one moving primitive (the actor).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub solids: Vec<Solid>,
    pub actor_index: usize,
    pub trajectory: Trajectory,
    pub background: [f32; 3],
}

fn color(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl SceneSpec {
    /// Random scene: one actor near the origin plus two static distractors
    /// further out.
    pub fn random(kind: MotionKind, rng: &mut impl Rng) -> Self {
        let background = color(rng, 0.05, 0.3);
        let actor_kind = if rng.gen_bool(0.5) {
            SolidKind::Sphere {
                radius: rng.gen_range(0.6..0.8),
            }
        } else {
            SolidKind::Cuboid {
                half_extents: [
                    rng.gen_range(0.45..0.65),
                    rng.gen_range(0.45..0.65),
                    rng.gen_range(0.45..0.65),
                ],
            }
        };
        let actor = Solid {
            kind: actor_kind,
            center: [
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ],
            color: color(rng, 0.45, 1.0),
        };
        let mut solids = vec![actor];
        for _ in 0..2 {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let dist = rng.gen_range(2.4..3.0);
            let size = rng.gen_range(0.3..0.5);
            let kind = if rng.gen_bool(0.5) {
                SolidKind::Sphere { radius: size }
            } else {
                SolidKind::Cuboid {
                    half_extents: [size, size, size],
                }
            };
            solids.push(Solid {
                kind,
                center: [dist * angle.cos(), rng.gen_range(-1.2..1.2), dist * angle.sin()],
                color: color(rng, 0.3, 0.9),
            });
        }
        SceneSpec {
            solids,
            actor_index: 0,
            trajectory: Trajectory::sample(kind, rng),
            background,
        }
    }

    pub fn actor_pose(&self, u: f64) -> (Vec3, f64) {
        let (off, scale) = self.trajectory.pose_at(u);
        let c = self.solids[self.actor_index].center;
        ([c[0] + off[0], c[1] + off[1], c[2] + off[2]], scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed_rng, Domain};

    #[test]
    fn still_has_no_displacement() {
        let mut rng = keyed_rng(Domain::Scene, &[0]);
        let t = Trajectory::sample(MotionKind::Still, &mut rng);
        for i in 0..=10 {
            assert_eq!(t.pose_at(i as f64 / 10.0), ([0.0; 3], 1.0));
        }
    }

    #[test]
    fn periodic_kinds_return_to_start() {
        let mut rng = keyed_rng(Domain::Scene, &[1]);
        for kind in [MotionKind::CircleXy, MotionKind::OscillateX, MotionKind::ScalePulse] {
            let t = Trajectory::sample(kind, &mut rng);
            let (a, sa) = t.pose_at(0.0);
            let (b, sb) = t.pose_at(1.0);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9, "{kind:?}");
            }
            assert!((sa - sb).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_and_box_hits() {
        let s = Solid {
            kind: SolidKind::Sphere { radius: 1.0 },
            center: [0., 0., 5.],
            color: [1.; 3],
        };
        assert_eq!(s.intersect([0.; 3], [0., 0., 1.], [0.; 3], 1.0), Some(4.0));
        assert_eq!(s.intersect([0.; 3], [0., 0., 1.], [0.; 3], 2.0), Some(3.0));
        assert_eq!(s.intersect([0.; 3], [0.5, 0., 1.], [0.; 3], 1.0), None);
        let b = Solid {
            kind: SolidKind::Cuboid {
                half_extents: [1., 1., 1.],
            },
            center: [0., 0., 5.],
            color: [1.; 3],
        };
        assert_eq!(b.intersect([0.; 3], [0., 0., 1.], [0.; 3], 1.0), Some(4.0));
        assert_eq!(b.intersect([0.; 3], [0., 0., 1.], [3., 0., 0.], 1.0), None);
    }
}
