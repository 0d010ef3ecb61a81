//! Ray-wise aggregation of pixel-aligned features into a target-view feature
//! map and a coarse color estimate.
//!
//! For every target ray, each context view contributes a sequence of point
//! tokens (sampled volume features + the ray's Plücker coordinates + a depth
//! encoding). A point transformer mixes the tokens per view; a learned logit
//! head turns them into softmax weights over the ray (invalid points weigh
//! exactly zero) and pools a per-view ray descriptor. A view transformer then
//! mixes the per-view descriptors; mean pooling across views (order
//! invariant) followed by an output projection yields one feature-map cell,
//! while a second logit head yields per-view color weights. The coarse color
//! is the doubly-weighted sum of bilinearly sampled context pixel colors, so
//! every channel stays inside the convex hull of the colors it draws from.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use sparseview_autodiff::{nn, Graph, ParamStore, ParamTensors, Tensor};

use crate::camera::{cast_rays, plucker, positional_encode, sample_points, CameraPose};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::volumes::{sample_point_features, BackboneProfile, FeatureExtractor, FeatureVolumeSet};

/// Sizes of the geometry branch (backbone + both transformers).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub backbone: BackboneProfile,
    /// Transformer token width.
    pub width: usize,
    /// Layers in each of the point and view transformers.
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub points_per_ray: usize,
    /// Frequencies in the depth positional encoding (2 values each).
    pub depth_freqs: usize,
    /// Channels of the rendered feature map.
    pub feature_dim: usize,
    /// Spatial resolution of the feature map and coarse image.
    pub feature_resolution: (usize, usize),
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl GeometryConfig {
    /// Full-scale configuration: F is 256 x 32 x 32.
    pub fn full_scale() -> Self {
        Self {
            backbone: BackboneProfile::full_scale(),
            width: 256,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            points_per_ray: 32,
            depth_freqs: 6,
            feature_dim: 256,
            feature_resolution: (32, 32),
        }
    }

    /// Small configuration for CPU training runs and tests.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneProfile::toy(),
            width: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            points_per_ray: 8,
            depth_freqs: 4,
            feature_dim: 16,
            feature_resolution: (32, 32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0
            || self.mlp_ratio == 0
            || self.points_per_ray < 2
            || self.depth_freqs == 0
            || self.feature_dim == 0
        {
            return Err(Error::InvalidArgument(
                "geometry config has a zero-sized component".into(),
            ));
        }
        let (fh, fw) = self.feature_resolution;
        if fh == 0 || fw == 0 {
            return Err(Error::InvalidArgument("feature resolution must be nonzero".into()));
        }
        Ok(())
    }

    /// Width of one point token before projection.
    pub fn token_dim(&self) -> usize {
        self.backbone.per_point_dim() + 6 + 2 * self.depth_freqs
    }
}

/// Encoded context views ready to be rendered from any target pose.
pub struct ContextSet {
    pub volume_sets: Vec<FeatureVolumeSet>,
    pub images: Vec<Image>,
    pub depth_range: (f64, f64),
}

impl ContextSet {
    pub fn num_views(&self) -> usize {
        self.volume_sets.len()
    }
}

/// Everything one render produces; weights and sampled colors are exposed so
/// the convexity of the color estimate can be audited from outside.
pub struct RenderedTarget {
    /// `[feature_dim, fh, fw]`.
    pub feature_map: Tensor,
    /// `[fh, fw, 3]` in the same ray order as the feature map cells.
    pub coarse_image: Tensor,
    /// `[rays, views, points]`, rows sum to 1 over valid points (0 if none).
    pub point_weights: Tensor,
    /// `[rays, views]`, rows sum to 1 over views with any valid point.
    pub view_weights: Tensor,
    /// `[rays, views, points, 3]` bilinear context colors (0 where invalid).
    pub sampled_colors: Array4<f64>,
    /// `[rays, views, points]`.
    pub point_valid: Array3<bool>,
    /// `[rays, views]`.
    pub view_valid: Array2<bool>,
}

/// The learned geometry branch: backbone plus both aggregation transformers.
#[derive(Debug, Clone)]
pub struct GeometryModel {
    pub config: GeometryConfig,
    pub extractor: FeatureExtractor,
    token_proj: nn::Linear,
    point_layers: Vec<nn::TransformerLayer>,
    point_logit: nn::Linear,
    view_proj: nn::Linear,
    view_layers: Vec<nn::TransformerLayer>,
    view_logit: nn::Linear,
    out_proj: nn::Linear,
}

impl GeometryModel {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: GeometryConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let extractor =
            FeatureExtractor::new(store, &format!("{name}.backbone"), config.backbone.clone(), true, rng)?;
        let token_proj =
            nn::Linear::new(store, &format!("{name}.token_proj"), config.token_dim(), w, true, rng);
        let mut point_layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            point_layers.push(nn::TransformerLayer::new(
                store,
                &format!("{name}.point{i}"),
                w,
                config.heads,
                config.mlp_ratio,
                rng,
            ));
        }
        let point_logit = nn::Linear::new(store, &format!("{name}.point_logit"), w, 1, true, rng);
        let view_proj = nn::Linear::new(store, &format!("{name}.view_proj"), w + 6, w, true, rng);
        let mut view_layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            view_layers.push(nn::TransformerLayer::new(
                store,
                &format!("{name}.view{i}"),
                w,
                config.heads,
                config.mlp_ratio,
                rng,
            ));
        }
        let view_logit = nn::Linear::new(store, &format!("{name}.view_logit"), w, 1, true, rng);
        let out_proj =
            nn::Linear::new(store, &format!("{name}.out_proj"), w, config.feature_dim, true, rng);
        Ok(Self {
            config,
            extractor,
            token_proj,
            point_layers,
            point_logit,
            view_proj,
            view_layers,
            view_logit,
            out_proj,
        })
    }

    /// Build pixel-aligned volumes for every context view.
    pub fn encode_contexts(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        views: &[(Image, CameraPose)],
        depth_range: (f64, f64),
    ) -> Result<ContextSet> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("need at least one context view".into()));
        }
        if !(depth_range.0 > 0.0 && depth_range.0 < depth_range.1) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far, got {depth_range:?}"
            )));
        }
        let mut volume_sets = Vec::with_capacity(views.len());
        let mut images = Vec::with_capacity(views.len());
        for (image, pose) in views {
            let (h, w, _) = image.dim();
            if (h, w) != pose.image_size {
                return Err(Error::ShapeMismatch {
                    context: "encode_contexts",
                    expected: format!("image matching pose resolution {:?}", pose.image_size),
                    found: format!("{:?}", (h, w)),
                });
            }
            volume_sets.push(self.extractor.build_volume_set(g, pt, image, pose)?);
            images.push(image.clone());
        }
        Ok(ContextSet { volume_sets, images, depth_range })
    }

    /// Render the feature map and coarse color image for a target pose.
    pub fn render(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        ctx: &ContextSet,
        target: &CameraPose,
    ) -> Result<RenderedTarget> {
        let (fh, fw) = self.config.feature_resolution;
        let (near, far) = ctx.depth_range;
        let num_views = ctx.num_views();
        let num_points = self.config.points_per_ray;
        let num_rays = fh * fw;

        // One ray per feature-map cell center.
        let pixels = grid_cell_centers(target.image_size, (fh, fw));
        let rays = cast_rays(target, &pixels)?;
        let mut points_world = Vec::with_capacity(num_rays * num_points);
        let mut ray_geometry =
            Array3::zeros((num_rays, num_points, 6 + 2 * self.config.depth_freqs));
        let mut mid_points = Vec::with_capacity(num_rays);
        for (r, ray) in rays.iter().enumerate() {
            let samples = sample_points(ray, near, far, num_points)?;
            let pl = plucker(ray).to_array();
            for (p, (&depth, point)) in
                samples.depths.iter().zip(&samples.points).enumerate()
            {
                points_world.push(*point);
                let normalized = (depth - near) / (far - near);
                let enc = positional_encode(normalized, self.config.depth_freqs);
                for (k, &v) in pl.iter().chain(enc.iter()).enumerate() {
                    ray_geometry[[r, p, k]] = v;
                }
            }
            mid_points.push(ray.point_at(0.5 * (near + far)));
        }

        // Per-view volume sampling; stack to [views * rays, points, ppd].
        let ppd = self.config.backbone.per_point_dim();
        let mut per_view_feats = Vec::with_capacity(num_views);
        let mut point_valid = Array3::from_elem((num_rays, num_views, num_points), false);
        for (v, set) in ctx.volume_sets.iter().enumerate() {
            let (feats, valid) = sample_point_features(g, set, &points_world, ctx.depth_range)?;
            per_view_feats.push(g.reshape(feats, &[num_rays, num_points, ppd]));
            for r in 0..num_rays {
                for p in 0..num_points {
                    point_valid[[r, v, p]] = valid[r * num_points + p];
                }
            }
        }
        let feats = g.concat(&per_view_feats, 0); // [views * rays, points, ppd]

        // Shared ray geometry, tiled across views.
        let geom_dim = 6 + 2 * self.config.depth_freqs;
        let geom = Array3::from_shape_fn(
            (num_views * num_rays, num_points, geom_dim),
            |(vr, p, k)| ray_geometry[[vr % num_rays, p, k]],
        );
        let geom = g.constant(geom.into_dyn());
        let token_in = g.concat(&[feats, geom], 2);
        let tokens = self.token_proj.forward(g, pt, token_in); // [v*r, p, width]

        // Point transformer: invalid points are never attended to.
        let key_mask = Array2::from_shape_fn((num_views * num_rays, num_points), |(vr, p)| {
            point_valid[[vr % num_rays, vr / num_rays, p]]
        });
        let mut x = tokens;
        for layer in &self.point_layers {
            x = layer.forward(g, pt, x, Some(&key_mask));
        }
        let logits = self.point_logit.forward(g, pt, x);
        let logits = g.reshape(logits, &[num_views * num_rays, num_points]);
        let (point_w_flat, pooled) = weight_points(g, x, logits, &key_mask);

        // View tokens carry the direction from each context camera to the
        // ray's mid-depth reference point.
        let pooled = g.reshape(pooled, &[num_views, num_rays, self.config.width]);
        let pooled = g.permute(pooled, &[1, 0, 2]); // [rays, views, width]
        let mut view_geom = Array3::zeros((num_rays, num_views, 6));
        for r in 0..num_rays {
            for (v, set) in ctx.volume_sets.iter().enumerate() {
                let center = set.context_pose.center();
                let to_ref = mid_points[r] - center;
                let dir = if to_ref.norm() > 1e-9 {
                    to_ref / to_ref.norm()
                } else {
                    rays[r].direction
                };
                let moment = center.cross(&dir);
                for k in 0..3 {
                    view_geom[[r, v, k]] = dir[k];
                    view_geom[[r, v, 3 + k]] = moment[k];
                }
            }
        }
        let view_geom = g.constant(view_geom.into_dyn());
        let view_in = g.concat(&[pooled, view_geom], 2);
        let mut y = self.view_proj.forward(g, pt, view_in);
        for layer in &self.view_layers {
            y = layer.forward(g, pt, y, None);
        }

        // Feature map: order-invariant mean over views, then projection.
        let agg = aggregate_views(g, y);
        let cells = self.out_proj.forward(g, pt, agg); // [rays, feature_dim]
        let fmap = g.permute(cells, &[1, 0]);
        let feature_map = g.reshape(fmap, &[self.config.feature_dim, fh, fw]);

        // Coarse color: softmax over views that saw the ray at all, then the
        // doubly-weighted sum of bilinearly sampled context colors.
        let view_valid = Array2::from_shape_fn((num_rays, num_views), |(r, v)| {
            (0..num_points).any(|p| point_valid[[r, v, p]])
        });
        let view_logits = self.view_logit.forward(g, pt, y);
        let view_logits = g.reshape(view_logits, &[num_rays, num_views]);
        let view_w = g.softmax_masked(view_logits, Some(&view_valid.clone().into_dyn()));

        let mut sampled_colors = Array4::zeros((num_rays, num_views, num_points, 3));
        for (v, image) in ctx.images.iter().enumerate() {
            let pose = &ctx.volume_sets[v].context_pose;
            for r in 0..num_rays {
                for p in 0..num_points {
                    if !point_valid[[r, v, p]] {
                        continue;
                    }
                    let point = points_world[r * num_points + p];
                    if let Some(((row, col), _)) = pose.project(&point) {
                        let rgb = sample_image_bilinear(image, row, col);
                        for c in 0..3 {
                            sampled_colors[[r, v, p, c]] = rgb[c];
                        }
                    }
                }
            }
        }
        let point_w = g.reshape(point_w_flat, &[num_views, num_rays, num_points]);
        let point_w = g.permute(point_w, &[1, 0, 2]); // [rays, views, points]
        let point_w4 = g.reshape(point_w, &[num_rays, num_views, num_points, 1]);
        let colors = g.constant(sampled_colors.clone().into_dyn());
        let weighted = g.mul(point_w4, colors);
        let per_view_color = g.sum_axis(weighted, 2); // [rays, views, 3]
        let view_w3 = g.reshape(view_w, &[num_rays, num_views, 1]);
        let weighted_views = g.mul(view_w3, per_view_color);
        let ray_colors = g.sum_axis(weighted_views, 1); // [rays, 3]
        let coarse_image = g.reshape(ray_colors, &[fh, fw, 3]);

        Ok(RenderedTarget {
            feature_map,
            coarse_image,
            point_weights: point_w,
            view_weights: view_w,
            sampled_colors,
            point_valid,
            view_valid,
        })
    }

    /// Feature map only (shares the full pass).
    pub fn render_feature_map(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        ctx: &ContextSet,
        target: &CameraPose,
    ) -> Result<Tensor> {
        Ok(self.render(g, pt, ctx, target)?.feature_map)
    }

    /// Coarse color image only (shares the full pass).
    pub fn estimate_color(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        ctx: &ContextSet,
        target: &CameraPose,
    ) -> Result<Tensor> {
        Ok(self.render(g, pt, ctx, target)?.coarse_image)
    }
}

/// Softmax the logits over the point axis (invalid points get exactly zero)
/// and pool the transformer outputs with those weights.
///
/// `outputs` is `[b, points, width]`, `logits` and `valid` are `[b, points]`.
/// Returns (weights `[b, points]`, pooled `[b, width]`).
pub fn weight_points(
    g: &mut Graph,
    outputs: Tensor,
    logits: Tensor,
    valid: &Array2<bool>,
) -> (Tensor, Tensor) {
    let shape = g.value(outputs).shape().to_vec();
    assert_eq!(shape.len(), 3, "weight_points expects [b, points, width]");
    assert_eq!(
        g.value(logits).shape(),
        &[shape[0], shape[1]],
        "logits must be [b, points]"
    );
    assert_eq!(valid.dim(), (shape[0], shape[1]), "valid must be [b, points]");
    let weights = g.softmax_masked(logits, Some(&valid.clone().into_dyn()));
    let w3 = g.reshape(weights, &[shape[0], shape[1], 1]);
    let weighted = g.mul(w3, outputs);
    let pooled = g.sum_axis(weighted, 1);
    (weights, pooled)
}

/// Mean-pool per-view descriptors `[rays, views, width]` to `[rays, width]`.
/// The mean makes the result independent of view order.
pub fn aggregate_views(g: &mut Graph, view_outputs: Tensor) -> Tensor {
    assert_eq!(
        g.value(view_outputs).ndim(),
        3,
        "aggregate_views expects [rays, views, width]"
    );
    g.mean_axis(view_outputs, 1)
}

/// Mean squared error between the coarse estimate and the ground-truth
/// colors at the same grid (both `[fh, fw, 3]`).
pub fn reconstruction_loss(g: &mut Graph, coarse: Tensor, target_colors: &Array3<f64>) -> Tensor {
    let t = g.constant(target_colors.clone().into_dyn());
    g.mse(coarse, t)
}

/// Pixel coordinates (row, col) of the centers of an `fh x fw` grid of cells
/// covering the full image.
pub fn grid_cell_centers(image_size: (usize, usize), grid: (usize, usize)) -> Vec<(f64, f64)> {
    let (h, w) = image_size;
    let (fh, fw) = grid;
    let mut out = Vec::with_capacity(fh * fw);
    for i in 0..fh {
        for j in 0..fw {
            out.push((
                (i as f64 + 0.5) * h as f64 / fh as f64,
                (j as f64 + 0.5) * w as f64 / fw as f64,
            ));
        }
    }
    out
}

/// Ground-truth colors bilinearly sampled at the same cell centers the
/// renderer casts rays through. At equal resolutions this is the image.
pub fn target_colors_at_grid(image: &Image, grid: (usize, usize)) -> Array3<f64> {
    let (fh, fw) = grid;
    let centers = grid_cell_centers((image.dim().0, image.dim().1), grid);
    let mut out = Array3::zeros((fh, fw, 3));
    for (idx, &(row, col)) in centers.iter().enumerate() {
        let rgb = sample_image_bilinear(image, row, col);
        for c in 0..3 {
            out[[idx / fw, idx % fw, c]] = rgb[c];
        }
    }
    out
}

/// Bilinear lookup at float pixel coordinates (row, col); pixel (i, j) holds
/// its value at center (i + 0.5, j + 0.5), borders clamp.
pub fn sample_image_bilinear(image: &Image, row: f64, col: f64) -> [f64; 3] {
    let (h, w, _) = image.dim();
    let tap = |x: f64, n: usize| -> (usize, usize, f64) {
        let x = (x - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let (r0, r1, fr) = tap(row, h);
    let (c0, c1, fc) = tap(col, w);
    let mut out = [0.0; 3];
    for (ch, slot) in out.iter_mut().enumerate() {
        *slot = image[[r0, c0, ch]] * (1.0 - fr) * (1.0 - fc)
            + image[[r0, c1, ch]] * (1.0 - fr) * fc
            + image[[r1, c0, ch]] * fr * (1.0 - fc)
            + image[[r1, c1, ch]] * fr * fc;
    }
    out
}

/// Convenience for tests: bound violation of the coarse image against the
/// convex hull of the valid sampled colors, per ray. Returns the largest
/// amount by which any channel escapes [min, max]; rays with no valid
/// samples are checked to be exactly zero.
pub fn convex_hull_violation(rendered: &RenderedTarget, g: &Graph) -> f64 {
    let coarse = g.value(rendered.coarse_image);
    let (num_rays, num_views, num_points, _) = rendered.sampled_colors.dim();
    let fw = coarse.shape()[1];
    let mut worst: f64 = 0.0;
    for r in 0..num_rays {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for v in 0..num_views {
            for p in 0..num_points {
                if rendered.point_valid[[r, v, p]] {
                    any = true;
                    for c in 0..3 {
                        let val = rendered.sampled_colors[[r, v, p, c]];
                        lo[c] = lo[c].min(val);
                        hi[c] = hi[c].max(val);
                    }
                }
            }
        }
        for c in 0..3 {
            let e = coarse[[r / fw, r % fw, c]];
            if any {
                worst = worst.max(lo[c] - e).max(e - hi[c]);
            } else {
                worst = worst.max(e.abs());
            }
        }
    }
    worst
}
