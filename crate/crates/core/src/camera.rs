//! Camera pose algebra, ray casting and the ray parameterizations fed to the
//! aggregation transformers.
//!
//! Conventions, fixed once here: right-handed world, `rotation` maps world to
//! camera coordinates (`x_cam = R x_world + t`), the camera looks down +z,
//! and pixels are indexed (row, col) with the origin at the top-left corner.
//! A pixel's center is at (row + 0.5, col + 0.5) in these float coordinates.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Extrinsics and intrinsics of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Translation in the camera frame: `x_cam = R x_world + t`.
    pub translation: Vector3<f64>,
    /// (fx, fy) in pixels.
    pub focal: (f64, f64),
    /// (cx, cy) in pixels.
    pub principal_point: (f64, f64),
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
}

impl CameraPose {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal: (f64, f64),
        principal_point: (f64, f64),
        image_size: (usize, usize),
    ) -> Result<Self> {
        let pose = Self { rotation, translation, focal, principal_point, image_size };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .chain([&self.focal.0, &self.focal.1, &self.principal_point.0, &self.principal_point.1]);
        for v in all {
            if !v.is_finite() {
                return Err(Error::InvalidPose("non-finite entries".into()));
            }
        }
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (RᵀR deviates from I by {dev:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant {det:.6} != +1")));
        }
        if self.focal.0 <= 0.0 || self.focal.1 <= 0.0 {
            return Err(Error::InvalidPose(format!("focal {:?} not positive", self.focal)));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidPose("zero image size".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates (`-Rᵀ t`).
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    /// Project a world point to float pixel (row, col) and its camera-frame
    /// depth. Points at or behind the camera plane return `None`.
    pub fn project(&self, p_world: &Vector3<f64>) -> Option<((f64, f64), f64)> {
        let c = self.to_camera(p_world);
        if c.z <= 0.0 {
            return None;
        }
        let col = self.focal.0 * c.x / c.z + self.principal_point.0;
        let row = self.focal.1 * c.y / c.z + self.principal_point.1;
        Some(((row, col), c.z))
    }

    /// Homogeneous 4x4 world-to-camera matrix.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Same camera with intrinsics rescaled to a new resolution, so rays cast
    /// at feature-map resolution stay aligned with the full image.
    pub fn rescaled(&self, new_size: (usize, usize)) -> Self {
        let sy = new_size.0 as f64 / self.image_size.0 as f64;
        let sx = new_size.1 as f64 / self.image_size.1 as f64;
        Self {
            rotation: self.rotation,
            translation: self.translation,
            focal: (self.focal.0 * sx, self.focal.1 * sy),
            principal_point: (self.principal_point.0 * sx, self.principal_point.1 * sy),
            image_size: new_size,
        }
    }
}

/// A ray in world space, tagged with the float pixel it was cast through.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length (enforced on construction).
    pub direction: Vector3<f64>,
    /// (row, col) the ray passes through in the casting camera.
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, pixel: (f64, f64)) -> Result<Self> {
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ray direction {direction:?} cannot be normalized"
            )));
        }
        Ok(Self { origin, direction: direction / norm, pixel })
    }

    pub fn point_at(&self, depth: f64) -> Vector3<f64> {
        self.origin + self.direction * depth
    }
}

/// Uniformly spaced depth samples along one ray.
#[derive(Debug, Clone)]
pub struct RaySampleSet {
    pub points: Vec<Vector3<f64>>,
    /// Strictly increasing, within [near, far].
    pub depths: Vec<f64>,
    pub ray: Ray,
}

/// A line as (direction, origin x direction): identical for every point
/// chosen as origin on the same line.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerCoords {
    pub direction: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl PluckerCoords {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.direction.x,
            self.direction.y,
            self.direction.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        ]
    }
}

/// Cast rays from `target` through the given float pixels (row, col). Each
/// ray originates at the camera center; directions are unit world vectors.
pub fn cast_rays(target: &CameraPose, pixels: &[(f64, f64)]) -> Result<Vec<Ray>> {
    target.validate()?;
    let (h, w) = target.image_size;
    let center = target.center();
    let r_t = target.rotation.transpose();
    pixels
        .iter()
        .map(|&(row, col)| {
            if !(0.0..h as f64).contains(&row) || !(0.0..w as f64).contains(&col) {
                return Err(Error::PixelOutOfBounds { row, col, height: h, width: w });
            }
            let d_cam = Vector3::new(
                (col - target.principal_point.0) / target.focal.0,
                (row - target.principal_point.1) / target.focal.1,
                1.0,
            );
            Ray::new(center, r_t * d_cam, (row, col))
        })
        .collect()
}

/// `n` uniformly spaced samples: depths `near + k (far-near)/(n-1)`.
pub fn sample_points(ray: &Ray, near: f64, far: f64, n: usize) -> Result<RaySampleSet> {
    if !(near > 0.0 && near < far) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < near < far, got near={near}, far={far}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let depths: Vec<f64> = (0..n)
        .map(|k| near + k as f64 * (far - near) / (n - 1) as f64)
        .collect();
    let points = depths.iter().map(|&d| ray.point_at(d)).collect();
    Ok(RaySampleSet { points, depths, ray: ray.clone() })
}

/// Pose of `context` expressed in the target camera's frame: the returned
/// pose maps target-camera coordinates to context-camera coordinates, so
/// composing it with `target` reproduces `context`.
pub fn relative_pose(context: &CameraPose, target: &CameraPose) -> Result<CameraPose> {
    context.validate()?;
    target.validate()?;
    let rotation = context.rotation * target.rotation.transpose();
    let translation = context.translation - rotation * target.translation;
    Ok(CameraPose {
        rotation,
        translation,
        focal: context.focal,
        principal_point: context.principal_point,
        image_size: context.image_size,
    })
}

/// Composition `outer ∘ inner`: applies `inner` first. Used to verify
/// `relative_pose` against plain homogeneous-matrix products.
pub fn compose(outer: &CameraPose, inner: &CameraPose) -> CameraPose {
    CameraPose {
        rotation: outer.rotation * inner.rotation,
        translation: outer.rotation * inner.translation + outer.translation,
        focal: outer.focal,
        principal_point: outer.principal_point,
        image_size: outer.image_size,
    }
}

/// Plücker coordinates of the ray's line.
pub fn plucker(ray: &Ray) -> PluckerCoords {
    PluckerCoords {
        direction: ray.direction,
        moment: ray.origin.cross(&ray.direction),
    }
}

/// `[sin(2^0 pi d), cos(2^0 pi d), ..., sin(2^{L-1} pi d), cos(2^{L-1} pi d)]`.
pub fn positional_encode(depth: f64, num_frequencies: usize) -> Vec<f64> {
    assert!(num_frequencies >= 1, "need at least one frequency");
    let mut out = Vec::with_capacity(2 * num_frequencies);
    for k in 0..num_frequencies {
        let arg = (1u64 << k) as f64 * std::f64::consts::PI * depth;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Near/far defaults from the bounding sphere of the context camera centers:
/// near = 0.1 r, far = 4 r around their centroid. Scenes that know their true
/// bounds should carry them instead.
pub fn depth_bounds_from_cameras(poses: &[CameraPose]) -> Result<(f64, f64)> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("no cameras for depth bounds".into()));
    }
    let centers: Vec<Vector3<f64>> = poses.iter().map(|p| p.center()).collect();
    let centroid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers
        .iter()
        .map(|c| (c - centroid).norm())
        .fold(0.0f64, f64::max)
        .max(1e-3);
    Ok((0.1 * radius, 4.0 * radius))
}
