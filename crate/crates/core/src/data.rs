//! Dataset ingestion and the synthetic fixture renderer.
//!
//! On disk a dataset is a directory of scene directories, each holding
//! `frames.json` (a list of `{file, R, t, fx, fy, cx, cy}` records, `R`
//! row-major world-to-camera) and an `images/` folder of PNGs. An optional
//! `scene.json` sidecar carries the class name, split tag and exact depth
//! bounds; absent fields fall back to the directory name / "train" /
//! camera-derived bounds.
//!
//! The synthetic renderer is a flat-shaded ray tracer over spheres and
//! axis-aligned boxes: no lighting, so every rendered pixel is exactly a
//! primitive albedo or the background color, which is what makes it usable
//! as an analytic oracle.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::camera::{cast_rays, depth_bounds_from_cameras, CameraPose};
use crate::error::{Error, Result};

/// H x W x 3 image, values in [0, 1].
pub type Image = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub image_path: PathBuf,
    pub pose: CameraPose,
}

#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub scene_id: String,
    pub class_name: String,
    pub frames: Vec<Frame>,
    pub split: Split,
    /// Exact (near, far) when the scene was generated with known geometry.
    pub depth_bounds: Option<(f64, f64)>,
}

impl SceneRecord {
    /// Scene depth bounds: exact ones if present, else derived from cameras.
    pub fn bounds(&self) -> Result<(f64, f64)> {
        match self.depth_bounds {
            Some(b) => Ok(b),
            None => {
                let poses: Vec<CameraPose> = self.frames.iter().map(|f| f.pose.clone()).collect();
                depth_bounds_from_cameras(&poses)
            }
        }
    }
}

/// One row of `frames.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRec {
    pub file: String,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl FrameRec {
    pub fn to_pose(&self, image_size: (usize, usize)) -> Result<CameraPose> {
        let r = self.rotation;
        CameraPose::new(
            Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            Vector3::new(self.t[0], self.t[1], self.t[2]),
            (self.fx, self.fy),
            (self.cx, self.cy),
            image_size,
        )
    }

    pub fn from_pose(file: String, pose: &CameraPose) -> Self {
        let r = &pose.rotation;
        FrameRec {
            file,
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            t: [pose.translation.x, pose.translation.y, pose.translation.z],
            fx: pose.focal.0,
            fy: pose.focal.1,
            cx: pose.principal_point.0,
            cy: pose.principal_point.1,
        }
    }
}

/// Optional per-scene metadata sidecar (`scene.json`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    #[serde(default)]
    pub class_name: Option<String>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub near: Option<f64>,
    #[serde(default)]
    pub far: Option<f64>,
}

/// Parse `frames.json` bytes. Split out from [`ingest`] so malformed input
/// can be exercised directly (and fuzzed).
pub fn parse_frames_manifest(bytes: &[u8], path: &Path) -> Result<Vec<FrameRec>> {
    serde_json::from_slice::<Vec<FrameRec>>(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Parse `scene.json` bytes.
pub fn parse_scene_meta(bytes: &[u8], path: &Path) -> Result<SceneMeta> {
    serde_json::from_slice::<SceneMeta>(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Parse a synthetic scene specification and validate its geometry.
pub fn parse_scene_spec(bytes: &[u8], path: &Path) -> Result<SyntheticSceneSpec> {
    let spec: SyntheticSceneSpec =
        serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
    spec.validate()?;
    Ok(spec)
}

/// Scan `root` for scene directories. Frames with invalid poses or missing /
/// mismatched images are dropped with a warning; scenes left with fewer than
/// 2 frames are rejected with a warning. A malformed manifest is an error.
pub fn ingest(root: &Path) -> Result<Vec<SceneRecord>> {
    let mut scenes = Vec::new();
    if !root.exists() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("frames.json").is_file())
        .collect();
    dirs.sort();

    for dir in dirs {
        let scene_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into());
        let manifest_path = dir.join("frames.json");
        let bytes = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let recs = parse_frames_manifest(&bytes, &manifest_path)?;

        let meta = {
            let meta_path = dir.join("scene.json");
            if meta_path.is_file() {
                let bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
                parse_scene_meta(&bytes, &meta_path)?
            } else {
                SceneMeta::default()
            }
        };

        let mut frames = Vec::new();
        let mut scene_dims: Option<(usize, usize)> = None;
        for (i, rec) in recs.iter().enumerate() {
            let image_path = dir.join("images").join(&rec.file);
            let dims = match image::image_dimensions(&image_path) {
                Ok((w, h)) => (h as usize, w as usize),
                Err(e) => {
                    log::warn!("{}: frame {i} image unreadable ({e}); dropped", dir.display());
                    continue;
                }
            };
            if let Some(expected) = scene_dims {
                if dims != expected {
                    log::warn!(
                        "{}: frame {i} resolution {dims:?} != scene resolution {expected:?}; dropped",
                        dir.display()
                    );
                    continue;
                }
            }
            match rec.to_pose(dims) {
                Ok(pose) => {
                    scene_dims.get_or_insert(dims);
                    frames.push(Frame { image_path, pose });
                }
                Err(e) => {
                    log::warn!("{}: frame {i} has an invalid pose ({e}); dropped", dir.display());
                }
            }
        }
        if frames.len() < 2 {
            log::warn!(
                "{}: only {} usable frame(s), need at least 2; scene rejected",
                dir.display(),
                frames.len()
            );
            continue;
        }
        let depth_bounds = match (meta.near, meta.far) {
            (Some(n), Some(f)) if n > 0.0 && n < f => Some((n, f)),
            (None, None) => None,
            other => {
                log::warn!("{}: ignoring inconsistent depth bounds {other:?}", dir.display());
                None
            }
        };
        scenes.push(SceneRecord {
            class_name: meta.class_name.unwrap_or_else(|| scene_id.clone()),
            scene_id,
            frames,
            split: meta.split.unwrap_or(Split::Train),
            depth_bounds,
        });
    }
    Ok(scenes)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            context: "save_image",
            expected: "(h, w, 3)".into(),
            found: format!("{:?}", image.dim()),
        });
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ci| {
                (image[(y, x, ci)].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

// --- Synthetic scenes -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveShape {
    Sphere,
    Box,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub center: [f64; 3],
    /// Sphere radius, or box half-extent per axis.
    pub size: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    /// Degrees above the horizontal plane.
    #[serde(default)]
    pub elevation_deg: f64,
    #[serde(default = "default_image_size")]
    pub image_size: (usize, usize),
    /// Focal length in pixels; defaults to the image width.
    #[serde(default)]
    pub focal: Option<f64>,
}

fn default_image_size() -> (usize, usize) {
    (64, 64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    #[serde(default = "default_class_name")]
    pub class_name: String,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub camera_ring: CameraRing,
}

fn default_class_name() -> String {
    "object".into()
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.size > 0.0 && p.size.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "primitive {i} has non-positive size {}",
                    p.size
                )));
            }
        }
        if self.camera_ring.count < 2 {
            return Err(Error::InvalidArgument(format!(
                "camera ring needs at least 2 cameras, got {}",
                self.camera_ring.count
            )));
        }
        if !(self.camera_ring.radius.is_finite() && self.camera_ring.radius > 0.0) {
            return Err(Error::InvalidArgument("camera ring radius must be positive".into()));
        }
        Ok(())
    }

    /// Exact depth bounds: the ring radius minus/plus the scene's bounding
    /// radius around the origin (clamped away from zero).
    pub fn exact_bounds(&self) -> (f64, f64) {
        let scene_radius = self
            .primitives
            .iter()
            .map(|p| {
                let c = Vector3::from(p.center).norm();
                let extent = match p.shape {
                    PrimitiveShape::Sphere => p.size,
                    PrimitiveShape::Box => p.size * 3f64.sqrt(),
                };
                c + extent
            })
            .fold(0.0f64, f64::max)
            .max(1e-3);
        let near = (self.camera_ring.radius - scene_radius).max(0.05 * self.camera_ring.radius);
        let far = self.camera_ring.radius + scene_radius;
        (near, far)
    }

    /// Poses on the ring, evenly spaced in azimuth, all looking at the origin.
    pub fn camera_poses(&self) -> Result<Vec<CameraPose>> {
        self.validate()?;
        let ring = &self.camera_ring;
        let (h, w) = ring.image_size;
        let focal = ring.focal.unwrap_or(w as f64);
        let elev = ring.elevation_deg.to_radians();
        (0..ring.count)
            .map(|k| {
                let az = 2.0 * std::f64::consts::PI * k as f64 / ring.count as f64;
                let eye = Vector3::new(
                    ring.radius * elev.cos() * az.sin(),
                    ring.radius * elev.sin(),
                    -ring.radius * elev.cos() * az.cos(),
                );
                look_at(eye, Vector3::zeros(), (focal, focal), (h, w))
            })
            .collect()
    }
}

/// World-to-camera pose for a camera at `eye` looking at `target`, image up
/// aligned with world +y (camera y points down in the image, CV-style).
pub fn look_at(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    focal: (f64, f64),
    image_size: (usize, usize),
) -> Result<CameraPose> {
    let forward = (target - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidArgument("look_at: eye equals target".into()))?;
    let up = Vector3::new(0.0, 1.0, 0.0);
    let right = forward
        .cross(&(-up))
        .try_normalize(1e-12)
        .map(|x| -x)
        .or_else(|| {
            // Looking straight up/down: fall back to world x as "right".
            Some(Vector3::new(1.0, 0.0, 0.0))
        })
        .expect("fallback is unit");
    let down = forward.cross(&right); // y_cam: completes the RH frame x = y x z
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -rotation * eye;
    let (hh, ww) = image_size;
    CameraPose::new(
        rotation,
        translation,
        focal,
        (ww as f64 / 2.0, hh as f64 / 2.0),
        image_size,
    )
}

/// Nearest intersection of a ray with the scene: `(depth, primitive index)`.
pub fn trace_ray(spec: &SyntheticSceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in spec.primitives.iter().enumerate() {
        let hit = match p.shape {
            PrimitiveShape::Sphere => ray_sphere(origin, dir, &Vector3::from(p.center), p.size),
            PrimitiveShape::Box => ray_box(origin, dir, &Vector3::from(p.center), p.size),
        };
        if let Some(t) = hit {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best
}

fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(d);
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    let eps = 1e-9;
    if t0 > eps {
        Some(t0)
    } else if t1 > eps {
        Some(t1)
    } else {
        None
    }
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, half: f64) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for axis in 0..3 {
        let lo = c[axis] - half;
        let hi = c[axis] + half;
        if d[axis].abs() < 1e-15 {
            if o[axis] < lo || o[axis] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[axis];
        let (t0, t1) = {
            let a = (lo - o[axis]) * inv;
            let b = (hi - o[axis]) * inv;
            if a < b { (a, b) } else { (b, a) }
        };
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    let eps = 1e-9;
    if tmin > eps {
        Some(tmin)
    } else if tmax > eps {
        Some(tmax)
    } else {
        None
    }
}

/// Flat-shaded render: nearest hit's albedo, else background. Rays go through
/// pixel centers.
pub fn render_synthetic(
    spec: &SyntheticSceneSpec,
    pose: &CameraPose,
    resolution: (usize, usize),
) -> Result<Image> {
    spec.validate()?;
    let cam = pose.rescaled(resolution);
    let (h, w) = resolution;
    let pixels: Vec<(f64, f64)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r as f64 + 0.5, c as f64 + 0.5)))
        .collect();
    let rays = cast_rays(&cam, &pixels)?;
    let mut img = Array3::zeros((h, w, 3));
    for (idx, ray) in rays.iter().enumerate() {
        let (r, c) = (idx / w, idx % w);
        let color = match trace_ray(spec, &ray.origin, &ray.direction) {
            Some((_, pi)) => spec.primitives[pi].albedo,
            None => spec.background,
        };
        for ch in 0..3 {
            img[(r, c, ch)] = color[ch];
        }
    }
    Ok(img)
}

/// Write a complete one-scene dataset (images, `frames.json`, `scene.json`
/// with exact bounds) under `out/<scene_id>`.
pub fn write_synthetic_dataset(
    spec: &SyntheticSceneSpec,
    out_root: &Path,
    scene_id: &str,
) -> Result<PathBuf> {
    spec.validate()?;
    let scene_dir = out_root.join(scene_id);
    let images_dir = scene_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let poses = spec.camera_poses()?;
    let mut recs = Vec::with_capacity(poses.len());
    for (k, pose) in poses.iter().enumerate() {
        let file = format!("frame{k:03}.png");
        let img = render_synthetic(spec, pose, pose.image_size)?;
        save_image(&images_dir.join(&file), &img)?;
        recs.push(FrameRec::from_pose(file, pose));
    }
    let manifest = serde_json::to_string_pretty(&recs).expect("serializable");
    let manifest_path = scene_dir.join("frames.json");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let (near, far) = spec.exact_bounds();
    let meta = SceneMeta {
        class_name: Some(spec.class_name.clone()),
        split: Some(Split::Train),
        near: Some(near),
        far: Some(far),
    };
    let meta_path = scene_dir.join("scene.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable"))
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(scene_dir)
}
