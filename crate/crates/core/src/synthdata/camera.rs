use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera. The camera frame has x to the image right, y to the image
/// bottom and z along the viewing direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    rotation: [Vec3; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraSpec {
    pub fn new(
        position: Vec3,
        look_at: Vec3,
        up: Vec3,
        focal: f64,
        principal_point: [f64; 2],
        image_size: (usize, usize),
    ) -> Result<Self> {
        if !(focal > 0.0) {
            return Err(Error::invalid("camera", format!("focal must be positive, got {focal}")));
        }
        let forward = sub(look_at, position);
        if dot(forward, forward) == 0.0 {
            return Err(Error::invalid("camera", "look_at equals position"));
        }
        let z = normalize(forward);
        let side = cross(z, up);
        if dot(side, side) < 1e-12 * dot(up, up).max(1e-300) {
            return Err(Error::invalid("camera", "up is parallel to the viewing direction"));
        }
        let x = normalize(side);
        let y = cross(z, x);
        Ok(CameraSpec {
            position,
            look_at,
            up,
            focal,
            principal_point,
            image_size,
            rotation: [x, y, z],
        })
    }

    /// Camera on a horizontal ring around the origin, looking at the origin
    /// with world +y up. Azimuth 0 sits on the -z axis.
    pub fn on_ring(azimuth_deg: f64, radius: f64, height: f64, image_size: (usize, usize)) -> Self {
        let a = azimuth_deg.to_radians();
        let (h, w) = image_size;
        Self::new(
            [radius * a.sin(), height, -radius * a.cos()],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            1.2 * w as f64,
            [w as f64 / 2.0, h as f64 / 2.0],
            image_size,
        )
        .expect("ring camera is well formed")
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.position);
        [
            dot(self.rotation[0], d),
            dot(self.rotation[1], d),
            dot(self.rotation[2], d),
        ]
    }

    /// Ray through pixel coordinates (u, v), scaled so that its camera-frame
    /// z component is 1. Intersection parameters along it are depths.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let xc = (u - self.principal_point[0]) / self.focal;
        let yc = (v - self.principal_point[1]) / self.focal;
        let [rx, ry, rz] = self.rotation;
        [
            rx[0] * xc + ry[0] * yc + rz[0],
            rx[1] * xc + ry[1] * yc + rz[1],
            rx[2] * xc + ry[2] * yc + rz[2],
        ]
    }

    /// Camera-frame direction of a world displacement.
    pub fn rotate(&self, d: Vec3) -> Vec3 {
        [
            dot(self.rotation[0], d),
            dot(self.rotation[1], d),
            dot(self.rotation[2], d),
        ]
    }
}

/// Pinhole projection `u = f x / z + cx`, `v = f y / z + cy`.
pub fn project_point(cam: &CameraSpec, p: Vec3) -> Result<Projection> {
    let [x, y, z] = cam.to_camera(p);
    if z <= 0.0 {
        return Err(Error::BehindCamera { depth: z });
    }
    Ok(Projection {
        u: cam.focal * x / z + cam.principal_point[0],
        v: cam.focal * y / z + cam.principal_point[1],
        depth: z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin_cam() -> CameraSpec {
        // With up = -y the camera x axis is world +x.
        CameraSpec::new([0.; 3], [0., 0., 1.], [0., -1., 0.], 100.0, [64., 64.], (128, 128)).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project_point(&origin_cam(), [0., 0., 5.]).unwrap();
        assert_eq!((p.u, p.v, p.depth), (64.0, 64.0, 5.0));
    }

    #[test]
    fn hand_projection() {
        let p = project_point(&origin_cam(), [1., 0., 2.]).unwrap();
        assert_eq!((p.u, p.v), (114.0, 64.0));
    }

    #[test]
    fn behind_camera_is_an_error() {
        assert!(matches!(
            project_point(&origin_cam(), [0., 0., -1.]),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project_point(&origin_cam(), [1., 1., 0.]).is_err());
    }

    #[test]
    fn rejects_degenerate_cameras() {
        assert!(CameraSpec::new([0.; 3], [0., 0., 1.], [0., 0., 2.], 10.0, [0., 0.], (8, 8)).is_err());
        assert!(CameraSpec::new([0.; 3], [0., 0., 1.], [0., 1., 0.], 0.0, [0., 0.], (8, 8)).is_err());
    }

    #[test]
    fn ray_reprojects_to_its_pixel() {
        let cam = CameraSpec::on_ring(30.0, 6.0, 1.0, (32, 32));
        let d = cam.ray(7.5, 20.25);
        let p = [
            cam.position[0] + 3.0 * d[0],
            cam.position[1] + 3.0 * d[1],
            cam.position[2] + 3.0 * d[2],
        ];
        let q = project_point(&cam, p).unwrap();
        assert!((q.u - 7.5).abs() < 1e-9 && (q.v - 20.25).abs() < 1e-9);
        assert!((q.depth - 3.0).abs() < 1e-9);
    }

    #[test]
    fn world_up_projects_upward() {
        let cam = CameraSpec::on_ring(0.0, 6.0, 0.0, (32, 32));
        let hi = project_point(&cam, [0., 1., 0.]).unwrap();
        assert!(hi.v < 16.0);
    }
}
