use crate::error::{Error, Result};

/// Near-depth floor applied to every ray, in meters.
pub const MIN_NEAR: f64 = 0.05;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Axis-aligned cube that bounds the modeled volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds {
    pub center: Vec3,
    pub half_extent: f64,
}

impl Default for SceneBounds {
    /// A 0.5 m cube at the origin.
    fn default() -> Self {
        SceneBounds {
            center: [0.0; 3],
            half_extent: 0.25,
        }
    }
}

impl SceneBounds {
    /// World point to grid coordinates in `[-1, 1]³`.
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        let h = self.half_extent;
        [
            (p[0] - self.center[0]) / h,
            (p[1] - self.center[1]) / h,
            (p[2] - self.center[2]) / h,
        ]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= self.half_extent)
    }

    /// Slab intersection: the parameter interval `[t0, t1]` where the line
    /// `o + t·r` is inside the box, or `None` when it misses.
    pub fn intersect(&self, o: Vec3, r: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            let lo = self.center[k] - self.half_extent;
            let hi = self.center[k] + self.half_extent;
            if r[k] == 0.0 {
                if o[k] < lo || o[k] > hi {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo - o[k]) / r[k], (hi - o[k]) / r[k]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// A ray with its marching interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    pub d_min: f64,
    pub d_max: f64,
}

impl Ray {
    pub fn at(&self, d: f64) -> Vec3 {
        [
            self.origin[0] + d * self.dir[0],
            self.origin[1] + d * self.dir[1],
            self.origin[2] + d * self.dir[2],
        ]
    }
}

/// Pinhole camera. Camera axes follow the OpenCV convention: x right,
/// y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: [[f64; 3]; 3],
    /// World-from-camera `[R | t]`; `t` is the camera center.
    pub pose: [[f64; 4]; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: [[f64; 3]; 3], pose: [[f64; 4]; 3], width: usize, height: usize) -> Result<Camera> {
        let cam = Camera {
            intrinsics,
            pose,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `center` looking at `target`. `up` is orthogonalized
    /// against the viewing axis; image y points along `−up`.
    pub fn look_at(center: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Camera> {
        let z = normalize([target[0] - center[0], target[1] - center[1], target[2] - center[2]]);
        let along = dot(up, z);
        let up = [up[0] - along * z[0], up[1] - along * z[1], up[2] - along * z[2]];
        if norm(up) < 1e-9 {
            return Err(Error::invalid("look_at", "up vector is parallel to the viewing axis"));
        }
        let y = normalize([-up[0], -up[1], -up[2]]);
        let x = cross(y, z);
        let pose = [
            [x[0], y[0], z[0], center[0]],
            [x[1], y[1], z[1], center[1]],
            [x[2], y[2], z[2], center[2]],
        ];
        let k = [
            [focal, 0.0, width as f64 / 2.0],
            [0.0, focal, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        Camera::new(k, pose, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::invalid("camera", format!("focal lengths must be positive, got {} {}", k[0][0], k[1][1])));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "image size must be positive"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|r| self.pose[r][i] * self.pose[r][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-9 {
                    return Err(Error::invalid("camera", "rotation is not orthonormal"));
                }
            }
        }
        if self.pose.iter().flatten().chain(k.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera", "non-finite entry"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Optical axis in world coordinates.
    pub fn axis(&self) -> Vec3 {
        [self.pose[0][2], self.pose[1][2], self.pose[2][2]]
    }

    /// Unit vector from the scene center to the camera center.
    pub fn view_vector(&self, bounds: &SceneBounds) -> Vec3 {
        let c = self.center();
        normalize([c[0] - bounds.center[0], c[1] - bounds.center[1], c[2] - bounds.center[2]])
    }

    /// World direction (unit) through continuous image coordinates `(x, y)`.
    pub fn direction(&self, x: f64, y: f64) -> Vec3 {
        let k = &self.intrinsics;
        let yc = (y - k[1][2]) / k[1][1];
        let xc = (x - k[0][2] - k[0][1] * yc) / k[0][0];
        let d = [xc, yc, 1.0];
        let r = &self.pose;
        normalize([
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ])
    }

    /// Pixel coordinates `(x, y)` of a world point, or `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = self.center();
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let r = &self.pose;
        let cam: Vec<f64> = (0..3).map(|j| (0..3).map(|i| r[i][j] * d[i]).sum()).collect();
        if cam[2] <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let (xn, yn) = (cam[0] / cam[2], cam[1] / cam[2]);
        Some((k[0][0] * xn + k[0][1] * yn + k[0][2], k[1][1] * yn + k[1][2]))
    }

    /// Ray through the center of pixel `(u, v)`, clipped to `bounds`.
    /// `Ok(None)` means the ray misses the volume and sees only background.
    pub fn generate_ray(&self, u: usize, v: usize, bounds: &SceneBounds) -> Result<Option<Ray>> {
        if u >= self.width || v >= self.height {
            return Err(Error::invalid(
                "generate_ray",
                format!("pixel ({u}, {v}) outside {}x{}", self.width, self.height),
            ));
        }
        Ok(self.ray_through(u as f64 + 0.5, v as f64 + 0.5, bounds))
    }

    pub fn ray_through(&self, x: f64, y: f64, bounds: &SceneBounds) -> Option<Ray> {
        let origin = self.center();
        let dir = self.direction(x, y);
        let (t0, t1) = bounds.intersect(origin, dir)?;
        let d_min = t0.max(MIN_NEAR);
        (t1 > d_min).then_some(Ray {
            origin,
            dir,
            d_min,
            d_max: t1,
        })
    }
}
