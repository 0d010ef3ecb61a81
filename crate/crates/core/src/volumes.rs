//! Pixel-aligned volumetric features: a small convolutional backbone encodes
//! each context image at three scales; each scale's channel dimension is
//! split into depth slices (a bijective reshape), bilinearly upsampled back
//! to image resolution, and sampled at 3D points by trilinear interpolation
//! in the context camera's frustum.
//!
//! Frustum mapping: a world point projects to (row, col, z) in the context
//! camera; grid coordinates are `x = col - 0.5`, `y = row - 0.5` (pixel
//! centers sit on voxel centers) and `z_slice = (z - near) / (far - near) *
//! (d - 1)`, so the depth slices span [near, far] uniformly.

use nalgebra::Vector3;
use ndarray::ArrayD;
use rand::Rng;
use sparseview_autodiff::{nn, Graph, ParamStore, ParamTensors, Tensor};

use crate::camera::CameraPose;
use crate::data::Image;
use crate::error::{Error, Result};

/// Channel counts, strides and depth split of the three backbone scales.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneProfile {
    pub channels: [usize; 3],
    pub strides: [usize; 3],
    pub depth_resolution: usize,
}

impl Default for BackboneProfile {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneProfile {
    /// Residual-network block sizes used at full scale.
    pub fn full_scale() -> Self {
        Self { channels: [256, 512, 1024], strides: [4, 8, 16], depth_resolution: 64 }
    }

    /// Small-CNN profile for fast tests: per-point dim 1 + 2 + 4 = 7.
    pub fn toy() -> Self {
        Self { channels: [64, 128, 256], strides: [4, 8, 16], depth_resolution: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.depth_resolution != 0 {
                return Err(Error::InvalidArgument(format!(
                    "backbone channels[{i}] = {c} not divisible by depth resolution {}",
                    self.depth_resolution
                )));
            }
        }
        if self.strides != [4, 8, 16] {
            return Err(Error::InvalidArgument(format!(
                "backbone strides must be [4, 8, 16], got {:?}",
                self.strides
            )));
        }
        Ok(())
    }

    /// Total stride; image dims must divide by this.
    pub fn total_stride(&self) -> usize {
        self.strides[2]
    }

    /// Concatenated per-point feature size: sum of per-voxel dims over scales.
    pub fn per_point_dim(&self) -> usize {
        self.channels.iter().map(|c| c / self.depth_resolution).sum()
    }
}

/// One scale's volume, as a live graph tensor plus its metadata.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    /// `[feature, depth, height, width]`.
    pub data: Tensor,
    pub depth_resolution: usize,
    pub scale_id: usize,
}

/// All three scales for one context view, pixel-aligned to its image.
#[derive(Debug)]
pub struct FeatureVolumeSet {
    pub volumes: Vec<FeatureVolume>,
    pub context_pose: CameraPose,
    pub per_point_dim: usize,
}

/// Three-block strided CNN producing the multi-scale feature maps. Blocks
/// register their parameters in the caller's store under `{name}.*`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub profile: BackboneProfile,
    stem: nn::Conv2d,
    block1: nn::Conv2d,
    block2: nn::Conv2d,
    block3: nn::Conv2d,
}

impl FeatureExtractor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        profile: BackboneProfile,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        profile.validate()?;
        let [c0, c1, c2] = profile.channels;
        Ok(Self {
            stem: nn::Conv2d::new(store, &format!("{name}.stem"), 3, c0, 3, 2, 1, bias, rng),
            block1: nn::Conv2d::new(store, &format!("{name}.block1"), c0, c0, 3, 2, 1, bias, rng),
            block2: nn::Conv2d::new(store, &format!("{name}.block2"), c0, c1, 3, 2, 1, bias, rng),
            block3: nn::Conv2d::new(store, &format!("{name}.block3"), c1, c2, 3, 2, 1, bias, rng),
            profile,
        })
    }

    /// Encode an image into three maps of shape `[c_i, H/s_i, W/s_i]`.
    pub fn extract_multiscale_features(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        image: &Image,
    ) -> Result<[Tensor; 3]> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                context: "extract_multiscale_features",
                expected: "(h, w, 3)".into(),
                found: format!("{:?}", image.dim()),
            });
        }
        let stride = self.profile.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} not divisible by backbone total stride {stride}"
            )));
        }
        // HWC -> [1, 3, H, W]
        let chw = image.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
        let input = g.constant(chw.into_dyn().into_shape_with_order(vec![1, 3, h, w]).expect("reshape"));

        let x = self.stem.forward(g, pt, input);
        let x = g.silu(x);
        let x = self.block1.forward(g, pt, x);
        let m0 = g.silu(x); // stride 4
        let x = self.block2.forward(g, pt, m0);
        let m1 = g.silu(x); // stride 8
        let x = self.block3.forward(g, pt, m1);
        let m2 = g.silu(x); // stride 16

        let squeeze = |g: &mut Graph, t: Tensor| {
            let s = g.value(t).shape().to_vec();
            g.reshape(t, &s[1..])
        };
        Ok([squeeze(g, m0), squeeze(g, m1), squeeze(g, m2)])
    }

    /// Full per-view pipeline: extract, split channels into depth slices,
    /// pixel-align every scale to the image resolution.
    pub fn build_volume_set(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        image: &Image,
        pose: &CameraPose,
    ) -> Result<FeatureVolumeSet> {
        let (h, w, _) = image.dim();
        let maps = self.extract_multiscale_features(g, pt, image)?;
        let d = self.profile.depth_resolution;
        let volumes = maps
            .into_iter()
            .enumerate()
            .map(|(scale_id, fmap)| {
                let vol = reshape_to_volume(g, fmap, d)?;
                let vol = upsample_pixel_align(g, vol, (h, w))?;
                Ok(FeatureVolume { data: vol, depth_resolution: d, scale_id })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureVolumeSet {
            volumes,
            context_pose: pose.clone(),
            per_point_dim: self.profile.per_point_dim(),
        })
    }
}

/// Split a `[c, h, w]` map's channels into `[c/d, d, h, w]`: channel index
/// `k` maps to (feature `k / d`, slice `k % d`). Plain row-major reshape, so
/// flattening the volume recovers the map exactly.
pub fn reshape_to_volume(g: &mut Graph, fmap: Tensor, depth_resolution: usize) -> Result<Tensor> {
    let shape = g.value(fmap).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "reshape_to_volume",
            expected: "[c, h, w]".into(),
            found: format!("{shape:?}"),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if depth_resolution == 0 || c % depth_resolution != 0 {
        return Err(Error::InvalidArgument(format!(
            "channel count {c} not divisible by depth resolution {depth_resolution}"
        )));
    }
    Ok(g.reshape(fmap, &[c / depth_resolution, depth_resolution, h, w]))
}

/// Bilinearly upsample a volume's spatial dims to `target_hw` (corner-
/// aligned, so source grid values are preserved). Depth is untouched.
pub fn upsample_pixel_align(g: &mut Graph, volume: Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
    let shape = g.value(volume).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "upsample_pixel_align",
            expected: "[c, d, h, w]".into(),
            found: format!("{shape:?}"),
        });
    }
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (th, tw) = target_hw;
    if th < h || tw < w {
        return Err(Error::InvalidArgument(format!(
            "pixel-align target {th}x{tw} smaller than source {h}x{w}"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(volume);
    }
    let flat = g.reshape(volume, &[c * d, h, w]);
    let up = g.upsample_bilinear(flat, th, tw);
    Ok(g.reshape(up, &[c, d, th, tw]))
}

/// Where a world point lands in a context volume's grid coordinates, plus
/// whether it is inside the frustum and depth range.
pub fn frustum_coords(
    pose: &CameraPose,
    point_world: &Vector3<f64>,
    depth_range: (f64, f64),
    depth_resolution: usize,
) -> ([f64; 3], bool) {
    let (near, far) = depth_range;
    let (h, w) = pose.image_size;
    match pose.project(point_world) {
        Some(((row, col), z)) => {
            let inside = z >= near
                && z <= far
                && (0.0..=h as f64).contains(&row)
                && (0.0..=w as f64).contains(&col);
            let zi = (z - near) / (far - near) * (depth_resolution - 1) as f64;
            ([zi, row - 0.5, col - 0.5], inside)
        }
        None => ([0.0, 0.0, 0.0], false),
    }
}

/// Trilinearly sample every scale at the given world points and concatenate
/// coarse-to-fine (deepest block first), producing `[n, per_point_dim]` plus
/// per-point validity. Out-of-frustum points get a zero feature row.
pub fn sample_point_features(
    g: &mut Graph,
    set: &FeatureVolumeSet,
    points_world: &[Vector3<f64>],
    depth_range: (f64, f64),
) -> Result<(Tensor, Vec<bool>)> {
    if set.volumes.is_empty() {
        return Err(Error::InvalidArgument("feature volume set has no scales".into()));
    }
    if !(depth_range.0 > 0.0 && depth_range.0 < depth_range.1) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < near < far, got {depth_range:?}"
        )));
    }
    let d = set.volumes[0].depth_resolution;
    let coords_valid: Vec<([f64; 3], bool)> = points_world
        .iter()
        .map(|p| frustum_coords(&set.context_pose, p, depth_range, d))
        .collect();
    let coords: Vec<[f64; 3]> = coords_valid.iter().map(|(c, _)| *c).collect();
    let valid: Vec<bool> = coords_valid.iter().map(|&(_, v)| v).collect();

    let mut parts: Vec<Tensor> = Vec::with_capacity(set.volumes.len());
    for vol in set.volumes.iter().rev() {
        debug_assert_eq!(vol.depth_resolution, d, "scales share one depth resolution");
        parts.push(g.gather_trilinear(vol.data, &coords, &valid));
    }
    let features = g.concat(&parts, 1);
    let got = g.value(features).shape()[1];
    if got != set.per_point_dim {
        return Err(Error::ShapeMismatch {
            context: "sample_point_features",
            expected: format!("per-point dim {}", set.per_point_dim),
            found: format!("{got}"),
        });
    }
    Ok((features, valid))
}

/// Build a volume set directly from raw arrays (tests and oracles).
pub fn volume_set_from_raw(
    g: &mut Graph,
    volumes: Vec<ArrayD<f64>>,
    pose: CameraPose,
) -> Result<FeatureVolumeSet> {
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("no volumes".into()));
    }
    let d = volumes[0].shape()[1];
    let per_point_dim = volumes.iter().map(|v| v.shape()[0]).sum();
    let volumes = volumes
        .into_iter()
        .enumerate()
        .map(|(scale_id, arr)| {
            if arr.ndim() != 4 || arr.shape()[1] != d {
                return Err(Error::ShapeMismatch {
                    context: "volume_set_from_raw",
                    expected: format!("[c, {d}, h, w]"),
                    found: format!("{:?}", arr.shape()),
                });
            }
            Ok(FeatureVolume { data: g.constant(arr), depth_resolution: d, scale_id })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureVolumeSet { volumes, context_pose: pose, per_point_dim })
}
