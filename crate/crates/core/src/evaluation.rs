//! Metric computation and the evaluation protocol: select objects per
//! category, sample uniformly spaced poses, hold out context views, score
//! every synthesized target view against ground truth.
//!
//! PSNR is built in. Perceptual and distribution metrics depend on large
//! pretrained scorers, so they enter through the [`PairScorer`] /
//! [`SetScorer`] interfaces and the report simply carries their values.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::target_colors_at_grid;
use crate::camera::CameraPose;
use crate::data::{load_image, Image, SceneRecord};
use crate::error::{Error, Result};

/// PSNR returned for a zero-MSE (identical) pair, and the ceiling for
/// near-zero MSE.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio from a mean squared error, in dB.
pub fn psnr_from_mse(mse: f64, max_value: f64, cap_db: f64) -> f64 {
    if mse <= 0.0 {
        return cap_db;
    }
    (10.0 * ((max_value * max_value) / mse).log10()).min(cap_db)
}

/// PSNR between two images on the [0, 1] range, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_with(a, b, 1.0, PSNR_CAP_DB)
}

/// PSNR with an explicit peak value and cap.
pub fn psnr_with(a: &Image, b: &Image, max_value: f64, cap_db: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "psnr",
            expected: format!("{:?}", a.dim()),
            found: format!("{:?}", b.dim()),
        });
    }
    let n = a.len() as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse, max_value, cap_db))
}

/// How many objects, poses and context views one evaluation run covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub objects_per_category: usize,
    pub poses_per_object: usize,
    pub context_count: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { objects_per_category: 10, poses_per_object: 32, context_count: 2, seed: 0 }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.objects_per_category == 0 || self.poses_per_object == 0 || self.context_count == 0
        {
            return Err(Error::Config("evaluation counts must be positive".into()));
        }
        if self.context_count >= self.poses_per_object {
            return Err(Error::Config(format!(
                "context_count {} must be smaller than poses_per_object {}",
                self.context_count, self.poses_per_object
            )));
        }
        Ok(())
    }
}

/// Anything that can synthesize a held-out view of a scene. The scene record
/// carries paths and poses; the model loads the context frames it needs and
/// must not read the target frame's image (the identity oracle deliberately
/// breaks that rule to exercise the protocol itself).
pub trait NovelViewModel {
    fn synthesize(
        &self,
        scene: &SceneRecord,
        context_frames: &[usize],
        target_frame: usize,
    ) -> Result<Image>;
}

/// Per-pair perceptual scorer (LPIPS-shaped: lower is better, but the
/// protocol only records values, it never ranks them).
pub trait PairScorer {
    fn name(&self) -> &str;
    fn score(&self, prediction: &Image, truth: &Image) -> Result<f64>;
}

/// Distribution scorer over matched image sets (FID-shaped).
pub trait SetScorer {
    fn name(&self) -> &str;
    fn score(&self, predictions: &[Image], truths: &[Image]) -> Result<f64>;
}

/// Optional external scorers.
#[derive(Default)]
pub struct Scorers<'a> {
    pub perceptual: Option<&'a dyn PairScorer>,
    pub distribution: Option<&'a dyn SetScorer>,
}

impl<'a> Scorers<'a> {
    pub fn none() -> Self {
        Self::default()
    }
}

/// One scored view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub category: String,
    pub scene_id: String,
    pub frame_index: usize,
    pub context_frames: Vec<usize>,
    pub psnr_db: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
}

/// Mean metrics for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: String,
    pub objects: usize,
    pub views: usize,
    pub mean_psnr_db: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_perceptual: Option<f64>,
}

/// A requested count the dataset could not supply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    /// What ran short, e.g. `objects in category "ball"`.
    pub what: String,
    pub requested: usize,
    pub available: usize,
}

/// Full evaluation output: per-view scores plus aggregates that always equal
/// their recomputation from the per-view values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: EvalProtocol,
    pub per_view: Vec<ViewScore>,
    pub categories: Vec<CategorySummary>,
    pub overall_mean_psnr_db: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall_mean_perceptual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution_score: Option<f64>,
    pub shortfalls: Vec<Shortfall>,
    /// True when any requested count was not met.
    pub partial: bool,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Build the aggregate rows from per-view scores.
pub fn aggregate(
    protocol: &EvalProtocol,
    per_view: Vec<ViewScore>,
    distribution_score: Option<f64>,
    shortfalls: Vec<Shortfall>,
) -> Result<MetricReport> {
    if per_view.is_empty() {
        return Err(Error::InvalidArgument("no views were scored".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&ViewScore>> = BTreeMap::new();
    for v in &per_view {
        groups.entry(&v.category).or_default().push(v);
    }
    let mut categories = Vec::with_capacity(groups.len());
    for (category, views) in &groups {
        let psnrs: Vec<f64> = views.iter().map(|v| v.psnr_db).collect();
        let perceptual: Vec<f64> = views.iter().filter_map(|v| v.perceptual).collect();
        let objects = views
            .iter()
            .map(|v| v.scene_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        categories.push(CategorySummary {
            category: (*category).to_string(),
            objects,
            views: views.len(),
            mean_psnr_db: mean(&psnrs),
            mean_perceptual: if perceptual.len() == views.len() {
                Some(mean(&perceptual))
            } else {
                None
            },
        });
    }
    let all_psnr: Vec<f64> = per_view.iter().map(|v| v.psnr_db).collect();
    let all_perc: Vec<f64> = per_view.iter().filter_map(|v| v.perceptual).collect();
    let partial = !shortfalls.is_empty();
    Ok(MetricReport {
        protocol: protocol.clone(),
        overall_mean_psnr_db: mean(&all_psnr),
        overall_mean_perceptual: if all_perc.len() == per_view.len() {
            Some(mean(&all_perc))
        } else {
            None
        },
        per_view,
        categories,
        distribution_score,
        shortfalls,
        partial,
    })
}

/// Check that every aggregate equals its recomputation from the per-view
/// rows within `tol`.
pub fn verify_aggregates(report: &MetricReport, tol: f64) -> Result<()> {
    let recomputed = aggregate(
        &report.protocol,
        report.per_view.clone(),
        report.distribution_score,
        report.shortfalls.clone(),
    )?;
    let close = |a: f64, b: f64| (a - b).abs() <= tol;
    if !close(recomputed.overall_mean_psnr_db, report.overall_mean_psnr_db) {
        return Err(Error::InvalidArgument(format!(
            "overall mean PSNR {} disagrees with recomputation {}",
            report.overall_mean_psnr_db, recomputed.overall_mean_psnr_db
        )));
    }
    if recomputed.categories.len() != report.categories.len() {
        return Err(Error::InvalidArgument("category row count disagrees".into()));
    }
    for (a, b) in report.categories.iter().zip(&recomputed.categories) {
        if a.category != b.category
            || a.views != b.views
            || a.objects != b.objects
            || !close(a.mean_psnr_db, b.mean_psnr_db)
        {
            return Err(Error::InvalidArgument(format!(
                "category {} aggregates disagree with recomputation",
                a.category
            )));
        }
    }
    Ok(())
}

/// The frame indices `floor(k * n / m)` for `k in 0..m`: `m` uniformly
/// spaced picks from `n` frames (all of them when `n <= m`).
pub fn uniformly_spaced(n: usize, m: usize) -> Vec<usize> {
    let m = m.min(n);
    (0..m).map(|k| k * n / m).collect()
}

/// Run the full protocol: per category, pick `objects_per_category` scenes,
/// sample `poses_per_object` uniformly spaced frames, hold out
/// `context_count` of them as context, synthesize and score the rest.
/// Everything the run touches is ordered, so a seed fixes the whole report.
pub fn run_protocol(
    model: &dyn NovelViewModel,
    scenes: &[SceneRecord],
    protocol: &EvalProtocol,
) -> Result<MetricReport> {
    run_protocol_scored(model, scenes, protocol, &Scorers::none())
}

/// [`run_protocol`] with optional external scorers attached.
pub fn run_protocol_scored(
    model: &dyn NovelViewModel,
    scenes: &[SceneRecord],
    protocol: &EvalProtocol,
    scorers: &Scorers<'_>,
) -> Result<MetricReport> {
    protocol.validate()?;
    let mut by_category: BTreeMap<&str, Vec<&SceneRecord>> = BTreeMap::new();
    for scene in scenes {
        by_category.entry(&scene.class_name).or_default().push(scene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut per_view = Vec::new();
    let mut shortfalls = Vec::new();
    let mut predictions = Vec::new();
    let mut truths = Vec::new();

    for (category, members) in &mut by_category {
        members.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        let selected: Vec<&SceneRecord> = if members.len() < protocol.objects_per_category {
            shortfalls.push(Shortfall {
                what: format!("objects in category {category:?}"),
                requested: protocol.objects_per_category,
                available: members.len(),
            });
            members.clone()
        } else {
            let mut order: Vec<usize> = (0..members.len()).collect();
            let (chosen, _) = order.partial_shuffle(&mut rng, protocol.objects_per_category);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| members[i]).collect()
        };

        for scene in selected {
            let n = scene.frames.len();
            if n < protocol.poses_per_object {
                shortfalls.push(Shortfall {
                    what: format!("poses in scene {:?}", scene.scene_id),
                    requested: protocol.poses_per_object,
                    available: n,
                });
            }
            let mut sampled = uniformly_spaced(n, protocol.poses_per_object);
            if sampled.len() < 2 {
                shortfalls.push(Shortfall {
                    what: format!("scene {:?} cannot hold out a view", scene.scene_id),
                    requested: 2,
                    available: sampled.len(),
                });
                continue;
            }
            let mut context_count = protocol.context_count;
            if context_count >= sampled.len() {
                context_count = sampled.len() - 1;
                shortfalls.push(Shortfall {
                    what: format!("context views in scene {:?}", scene.scene_id),
                    requested: protocol.context_count,
                    available: context_count,
                });
            }
            let (context_picks, _) = sampled.partial_shuffle(&mut rng, context_count);
            let mut context_frames = context_picks.to_vec();
            context_frames.sort_unstable();
            let mut target_frames: Vec<usize> = sampled[context_count..].to_vec();
            target_frames.sort_unstable();

            for &target in &target_frames {
                let prediction = model.synthesize(scene, &context_frames, target)?;
                let truth_full = load_image(&scene.frames[target].image_path)?;
                // Score at the prediction's resolution: the model may work
                // at a coarser grid than the capture.
                let (ph, pw, _) = prediction.dim();
                let truth = if truth_full.dim() == prediction.dim() {
                    truth_full
                } else {
                    target_colors_at_grid(&truth_full, (ph, pw))
                };
                let psnr_db = psnr(&prediction, &truth)?;
                let perceptual = match scorers.perceptual {
                    Some(s) => Some(s.score(&prediction, &truth)?),
                    None => None,
                };
                if scorers.distribution.is_some() {
                    predictions.push(prediction);
                    truths.push(truth.clone());
                }
                per_view.push(ViewScore {
                    category: (*category).to_string(),
                    scene_id: scene.scene_id.clone(),
                    frame_index: target,
                    context_frames: context_frames.clone(),
                    psnr_db,
                    perceptual,
                });
            }
        }
    }

    let distribution_score = match scorers.distribution {
        Some(s) => Some(s.score(&predictions, &truths)?),
        None => None,
    };
    aggregate(protocol, per_view, distribution_score, shortfalls)
}

/// One JSON object per scored view, newline-delimited.
pub fn render_report_jsonl(report: &MetricReport) -> String {
    let mut out = String::new();
    for view in &report.per_view {
        out.push_str(&serde_json::to_string(view).expect("view score serializes"));
        out.push('\n');
    }
    out
}

/// Human-readable summary table.
pub fn render_summary_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>8} {:>8} {:>12}\n",
        "category", "objects", "views", "mean PSNR dB"
    ));
    for c in &report.categories {
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>12.4}\n",
            c.category, c.objects, c.views, c.mean_psnr_db
        ));
    }
    out.push_str(&format!(
        "{:<16} {:>8} {:>8} {:>12.4}\n",
        "overall",
        "",
        report.per_view.len(),
        report.overall_mean_psnr_db
    ));
    if let Some(d) = report.distribution_score {
        out.push_str(&format!("distribution score: {d:.4}\n"));
    }
    for s in &report.shortfalls {
        out.push_str(&format!(
            "shortfall: {} (requested {}, available {})\n",
            s.what, s.requested, s.available
        ));
    }
    out
}

/// Oracle model: returns the ground-truth target image. Scores the protocol
/// plumbing itself — every view must come back at the PSNR cap.
pub struct IdentityOracle;

impl NovelViewModel for IdentityOracle {
    fn synthesize(
        &self,
        scene: &SceneRecord,
        _context_frames: &[usize],
        target_frame: usize,
    ) -> Result<Image> {
        load_image(&scene.frames[target_frame].image_path)
    }
}

/// Baseline model: a single constant color everywhere, at the given
/// resolution.
pub struct ConstantColorModel {
    pub color: [f64; 3],
    pub resolution: (usize, usize),
}

impl NovelViewModel for ConstantColorModel {
    fn synthesize(
        &self,
        _scene: &SceneRecord,
        _context_frames: &[usize],
        _target_frame: usize,
    ) -> Result<Image> {
        let (h, w) = self.resolution;
        let mut img = Image::zeros((h, w, 3));
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    img[(r, c, ch)] = self.color[ch];
                }
            }
        }
        Ok(img)
    }
}

/// The geometry prior alone: renders the coarse color estimate E for the
/// target pose, no diffusion pass.
pub struct CoarseGeometryModel<'a> {
    pub geometry: &'a crate::aggregation::GeometryModel,
    pub params: &'a sparseview_autodiff::ParamStore,
}

impl NovelViewModel for CoarseGeometryModel<'_> {
    fn synthesize(
        &self,
        scene: &SceneRecord,
        context_frames: &[usize],
        target_frame: usize,
    ) -> Result<Image> {
        let mut context = Vec::with_capacity(context_frames.len());
        for &idx in context_frames {
            let frame = &scene.frames[idx];
            context.push((load_image(&frame.image_path)?, frame.pose.clone()));
        }
        let target: &CameraPose = &scene.frames[target_frame].pose;
        let mut g = sparseview_autodiff::Graph::new();
        let pt = g.load_params_frozen(self.params);
        let ctx = self.geometry.encode_contexts(&mut g, &pt, &context, scene.bounds()?)?;
        let coarse = self.geometry.estimate_color(&mut g, &pt, &ctx, target)?;
        g.value(coarse)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| Error::InvalidArgument("coarse image rank".into()))
    }
}

/// Full guided pipeline as an evaluation model.
pub struct GuidedSynthesizer<'a> {
    pub model: &'a crate::diffusion::NvsModel,
    pub options: crate::diffusion::NvsOptions,
    pub prompt_template: String,
}

impl NovelViewModel for GuidedSynthesizer<'_> {
    fn synthesize(
        &self,
        scene: &SceneRecord,
        context_frames: &[usize],
        target_frame: usize,
    ) -> Result<Image> {
        let mut context = Vec::with_capacity(context_frames.len());
        for &idx in context_frames {
            let frame = &scene.frames[idx];
            context.push((load_image(&frame.image_path)?, frame.pose.clone()));
        }
        let prompt = self.prompt_template.replace("<class_name>", &scene.class_name);
        self.model.nvs_inference(
            &context,
            &scene.frames[target_frame].pose,
            scene.bounds()?,
            &prompt,
            &self.options,
        )
    }
}
