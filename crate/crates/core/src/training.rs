//! Joint optimization of the geometry branch (φ) and the guidance adapter
//! (θ) with the denoiser (ψ) frozen: min_{φ,θ} L_recon(g_φ) + L_diffusion(T_θ).
//!
//! Each step renders the coarse estimate E and feature map F once, scores E
//! against the ground-truth target (L_recon), then perturbs the encoded
//! ground truth to a random timestep and scores the frozen denoiser's noise
//! prediction under the adapter's guidance (L_diffusion). Both branches
//! backpropagate through F, so the geometry weights receive gradients from
//! the diffusion objective as well.

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparseview_autodiff::{Adam, AdamConfig, Graph, ParamStore, ParamTensors, Tensor};

use crate::aggregation::{
    reconstruction_loss, target_colors_at_grid, GeometryConfig, GeometryModel,
};
use crate::camera::CameraPose;
use crate::data::{load_image, Image, SceneRecord};
use crate::diffusion::{
    embed_prompt, perturb, DenoiserBackend, DenoiserHandle, NoiseSchedule, ToyDenoiserConfig,
};
use crate::error::{Error, Result};
use crate::guidance::{compute_guidance, GuidanceAdapter};

/// Optimization hyperparameters. The context range stays within [1, 4];
/// wider sampling is an inference-time capability, not a training one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inclusive (min, max) number of context views per sampled batch item.
    pub context_views_range: (usize, usize),
    /// Scene draws folded into one optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    /// Weight on L_recon.
    pub recon_weight: f64,
    /// Weight on L_diffusion.
    pub diffusion_weight: f64,
    pub seed: u64,
    /// `<class_name>` is replaced by the scene's class.
    pub prompt_template: String,
    /// Guidance scale applied while training (the inference scale is a
    /// separate, sampler-level knob).
    pub guidance_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            context_views_range: (1, 4),
            batch_size: 1,
            learning_rate: 1e-4,
            total_steps: 3000,
            recon_weight: 1.0,
            diffusion_weight: 1.0,
            seed: 0,
            prompt_template: "a picture of <class_name>".into(),
            guidance_lambda: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.context_views_range;
        if lo < 1 || hi > 4 || lo > hi {
            return Err(Error::Config(format!(
                "context_views_range {:?} must satisfy 1 <= min <= max <= 4",
                self.context_views_range
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(self.recon_weight >= 0.0 && self.diffusion_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.guidance_lambda.is_finite()) {
            return Err(Error::Config("guidance_lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Noise schedule parameters in config form (the expanded table lives in
/// [`NoiseSchedule`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { t_max: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn to_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Everything needed to rebuild the full model stack from scratch; stored
/// verbatim in every checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub geometry: GeometryConfig,
    pub denoiser: ToyDenoiserConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            denoiser: ToyDenoiserConfig::default(),
            schedule: ScheduleSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        if self.geometry.feature_resolution != self.denoiser.resolution {
            return Err(Error::Config(format!(
                "feature map resolution {:?} must match the denoiser latent resolution {:?}",
                self.geometry.feature_resolution, self.denoiser.resolution
            )));
        }
        Ok(())
    }
}

/// Which frames of which scene form one batch item. Pure index bookkeeping,
/// so sampling statistics can be tested without touching image files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub scene_index: usize,
    pub query_frame: usize,
    pub context_frames: Vec<usize>,
}

/// One loaded batch item: context views plus the held-out query view.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub batch_id: String,
    pub class_name: String,
    pub context: Vec<(Image, CameraPose)>,
    pub target_image: Image,
    pub target_pose: CameraPose,
    pub depth_range: (f64, f64),
}

/// Choose a scene and a (query, contexts) split without loading pixels.
/// Scenes with fewer than two frames are skipped with a log entry.
pub fn plan_batch(
    scenes: &[SceneRecord],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    config.validate()?;
    let mut eligible = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        if scene.frames.len() >= 2 {
            eligible.push(i);
        } else {
            log::debug!(
                "scene {} has {} frame(s), need at least 2; skipped",
                scene.scene_id,
                scene.frames.len()
            );
        }
    }
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(
            "no scene has the two or more views required for training".into(),
        ));
    }
    let scene_index = eligible[rng.gen_range(0..eligible.len())];
    let num_frames = scenes[scene_index].frames.len();
    let (lo, hi) = config.context_views_range;
    let max_ctx = hi.min(num_frames - 1);
    let min_ctx = lo.min(max_ctx);
    let num_context = rng.gen_range(min_ctx..=max_ctx);

    let mut order: Vec<usize> = (0..num_frames).collect();
    let (chosen, _) = order.partial_shuffle(rng, num_context + 1);
    Ok(BatchPlan {
        scene_index,
        query_frame: chosen[0],
        context_frames: chosen[1..].to_vec(),
    })
}

/// Load the images a plan refers to.
pub fn load_batch(scenes: &[SceneRecord], plan: &BatchPlan) -> Result<TrainBatch> {
    let scene = scenes.get(plan.scene_index).ok_or_else(|| {
        Error::InvalidArgument(format!("plan references scene index {}", plan.scene_index))
    })?;
    let frame = |idx: usize| -> Result<(Image, CameraPose)> {
        let f = scene.frames.get(idx).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "plan references frame {idx} of scene {} ({} frames)",
                scene.scene_id,
                scene.frames.len()
            ))
        })?;
        Ok((load_image(&f.image_path)?, f.pose.clone()))
    };
    let (target_image, target_pose) = frame(plan.query_frame)?;
    let mut context = Vec::with_capacity(plan.context_frames.len());
    for &idx in &plan.context_frames {
        context.push(frame(idx)?);
    }
    Ok(TrainBatch {
        batch_id: format!(
            "scene {} query {} contexts {:?}",
            scene.scene_id, plan.query_frame, plan.context_frames
        ),
        class_name: scene.class_name.clone(),
        context,
        target_image,
        target_pose,
        depth_range: scene.bounds()?,
    })
}

/// Draw one batch item: plan, then load.
pub fn sample_batch(
    scenes: &[SceneRecord],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainBatch> {
    let plan = plan_batch(scenes, config, rng)?;
    load_batch(scenes, &plan)
}

/// Per-step loss values, reported before the parameter update is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub batch_id: String,
    pub recon_loss: f64,
    pub diffusion_loss: f64,
    pub total_loss: f64,
}

/// Loss values without the step/batch bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub diffusion: f64,
    pub total: f64,
}

/// All mutable training state: both trainable weight stores with their
/// optimizers, the frozen denoiser, the step counter and the RNG stream.
pub struct TrainState {
    pub config: PipelineConfig,
    pub geometry: GeometryModel,
    pub geometry_params: ParamStore,
    pub adapter: GuidanceAdapter,
    pub adapter_params: ParamStore,
    pub denoiser: DenoiserHandle,
    pub step: usize,
    geometry_opt: Adam,
    adapter_opt: Adam,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh φ and θ around an already-trained, frozen ψ.
    pub fn new(config: PipelineConfig, denoiser: DenoiserHandle) -> Result<Self> {
        config.validate()?;
        if !denoiser.frozen {
            return Err(Error::Config(
                "joint training requires a frozen denoiser; call freeze() first".into(),
            ));
        }
        if denoiser.model.config != config.denoiser {
            return Err(Error::Config(
                "denoiser handle configuration disagrees with the pipeline config".into(),
            ));
        }
        if denoiser.schedule != config.schedule.to_schedule()? {
            return Err(Error::Config(
                "denoiser schedule disagrees with the pipeline schedule spec".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut geometry_params = ParamStore::new();
        let geometry =
            GeometryModel::new(&mut geometry_params, "geometry", config.geometry.clone(), &mut rng)?;
        let mut adapter_params = ParamStore::new();
        let adapter = GuidanceAdapter::init(
            &mut adapter_params,
            "adapter",
            &denoiser.model,
            &denoiser.params,
            config.geometry.feature_dim,
            &mut rng,
        )?;
        let opt_cfg = AdamConfig { lr: config.train.learning_rate, ..AdamConfig::default() };
        let geometry_opt = Adam::new(opt_cfg, &geometry_params);
        let adapter_opt = Adam::new(opt_cfg, &adapter_params);
        Ok(Self {
            config,
            geometry,
            geometry_params,
            adapter,
            adapter_params,
            denoiser,
            step: 0,
            geometry_opt,
            adapter_opt,
            rng,
        })
    }

    /// The shared RNG stream (sampling and training draws interleave here so
    /// a run is a single reproducible sequence).
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Build the joint loss for one batch item at a fixed (t, ε) draw.
    /// Returns the recon and diffusion loss tensors (unweighted).
    #[allow(clippy::too_many_arguments)]
    fn item_losses(
        &self,
        g: &mut Graph,
        phi: &ParamTensors,
        theta: &ParamTensors,
        psi: &ParamTensors,
        item: &TrainBatch,
        timestep: usize,
        epsilon: &ArrayD<f64>,
    ) -> Result<(Tensor, Tensor)> {
        if item.context.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "batch item has no context views ({})",
                item.batch_id
            )));
        }
        // Geometry branch: E against the ground-truth target colors.
        let ctx = self.geometry.encode_contexts(g, phi, &item.context, item.depth_range)?;
        let rendered = self.geometry.render(g, phi, &ctx, &item.target_pose)?;
        let targets =
            target_colors_at_grid(&item.target_image, self.geometry.config.feature_resolution);
        let l_recon = reconstruction_loss(g, rendered.coarse_image, &targets);

        // Diffusion branch: perturb the encoded ground truth, predict ε
        // through the frozen denoiser with guidance from F. The ground
        // truth is brought to the codec resolution first (cell-center
        // sampling, the same grid mapping the recon targets use).
        let (c, h, w) = self.denoiser.codec.latent_shape();
        let x0 = if item.target_image.dim() == (h, w, 3) {
            self.denoiser.codec.encode(&item.target_image)?
        } else {
            self.denoiser.codec.encode(&target_colors_at_grid(&item.target_image, (h, w)))?
        };
        let x_t = perturb(&x0, &self.denoiser.schedule, timestep, epsilon)?;
        let x_t = g.constant(
            x_t.into_shape_with_order(IxDyn(&[1, c, h, w])).expect("latent batch axis"),
        );
        let prompt =
            self.config.train.prompt_template.replace("<class_name>", &item.class_name);
        let text_arr = embed_prompt(&prompt, self.denoiser.model.config.text_dim);
        let text = g.constant(
            text_arr
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, self.denoiser.model.config.text_dim]))
                .expect("text batch axis"),
        );
        let fd = self.geometry.config.feature_dim;
        let (fh, fw) = self.geometry.config.feature_resolution;
        let f_map = g.reshape(rendered.feature_map, &[1, fd, fh, fw]);
        let signals =
            compute_guidance(g, theta, &self.adapter, x_t, timestep, text, f_map)?;
        let eps_hat = self.denoiser.model.forward(
            g,
            psi,
            x_t,
            timestep,
            text,
            Some((&signals, self.config.train.guidance_lambda)),
        )?;
        let eps_target = g.constant(
            epsilon.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).expect("eps batch axis"),
        );
        let l_diffusion = g.mse(eps_hat, eps_target);
        Ok((l_recon, l_diffusion))
    }

    /// Weighted total over the mini-batch, with per-item finiteness checks
    /// so a blow-up names the offending batch item.
    fn build_total(
        &self,
        g: &mut Graph,
        items: &[TrainBatch],
        draws: &[(usize, ArrayD<f64>)],
    ) -> Result<(Tensor, ParamTensors, ParamTensors, LossBreakdown)> {
        assert_eq!(items.len(), draws.len(), "one (t, eps) draw per batch item");
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty mini-batch".into()));
        }
        let phi = g.load_params(&self.geometry_params);
        let theta = g.load_params(&self.adapter_params);
        let psi = g.load_params_frozen(&self.denoiser.params);
        let mut recon_terms = Vec::with_capacity(items.len());
        let mut diffusion_terms = Vec::with_capacity(items.len());
        let mut recon_sum = 0.0;
        let mut diffusion_sum = 0.0;
        for (item, (t, eps)) in items.iter().zip(draws) {
            let (l_r, l_d) = self.item_losses(g, &phi, &theta, &psi, item, *t, eps)?;
            let (r, d) = (scalar(g, l_r), scalar(g, l_d));
            if !(r.is_finite() && d.is_finite()) {
                return Err(Error::NonFinite {
                    context: "joint training step",
                    detail: Some(format!(
                        "{}: L_recon = {r}, L_diffusion = {d}",
                        item.batch_id
                    )),
                });
            }
            recon_sum += r;
            diffusion_sum += d;
            recon_terms.push(l_r);
            diffusion_terms.push(l_d);
        }
        let n = items.len() as f64;
        let recon_mean = mean_of(g, &recon_terms);
        let diffusion_mean = mean_of(g, &diffusion_terms);
        let w_r = self.config.train.recon_weight;
        let w_d = self.config.train.diffusion_weight;
        let recon_w = g.scale(recon_mean, w_r);
        let diffusion_w = g.scale(diffusion_mean, w_d);
        let total = g.add(recon_w, diffusion_w);
        let breakdown = LossBreakdown {
            recon: recon_sum / n,
            diffusion: diffusion_sum / n,
            total: w_r * recon_sum / n + w_d * diffusion_sum / n,
        };
        Ok((total, phi, theta, breakdown))
    }

    fn draw_t_eps(&mut self) -> (usize, ArrayD<f64>) {
        let t = self.rng.gen_range(1..=self.denoiser.schedule.t_max());
        let (c, h, w) = self.denoiser.codec.latent_shape();
        let mut eps = ArrayD::zeros(IxDyn(&[c, h, w]));
        for v in eps.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
        (t, eps)
    }

    /// One optimizer step over a mini-batch: forward, backward, update φ
    /// and θ. ψ is loaded frozen, so no gradient ever reaches it.
    pub fn joint_step(&mut self, items: &[TrainBatch]) -> Result<LossReport> {
        let draws: Vec<(usize, ArrayD<f64>)> =
            (0..items.len()).map(|_| self.draw_t_eps()).collect();
        let mut g = Graph::new();
        let (total, phi, theta, breakdown) = self.build_total(&mut g, items, &draws)?;
        let grads = g.backward(total);
        let phi_grads = grads.per_param(&phi);
        self.geometry_opt.step(&mut self.geometry_params, &phi_grads);
        let theta_grads = grads.per_param(&theta);
        self.adapter_opt.step(&mut self.adapter_params, &theta_grads);
        self.step += 1;
        Ok(LossReport {
            step: self.step,
            batch_id: items
                .iter()
                .map(|i| i.batch_id.as_str())
                .collect::<Vec<_>>()
                .join(" | "),
            recon_loss: breakdown.recon,
            diffusion_loss: breakdown.diffusion,
            total_loss: breakdown.total,
        })
    }

    /// Loss values for a fixed, explicit (t, noise seed) draw. Pure: no
    /// parameter, optimizer or RNG state changes.
    pub fn eval_loss(
        &self,
        item: &TrainBatch,
        timestep: usize,
        noise_seed: u64,
    ) -> Result<LossBreakdown> {
        let eps = seeded_noise(self.denoiser.codec.latent_shape(), noise_seed);
        let mut g = Graph::new();
        let (_, _, _, breakdown) =
            self.build_total(&mut g, std::slice::from_ref(item), &[(timestep, eps)])?;
        Ok(breakdown)
    }

    /// Gradients of the weighted total loss for a fixed draw, as owned
    /// arrays in parameter order: `(φ gradients, θ gradients)`. `None`
    /// means the parameter is unreachable from the loss.
    pub fn loss_gradients(
        &self,
        item: &TrainBatch,
        timestep: usize,
        noise_seed: u64,
    ) -> Result<(Vec<Option<ArrayD<f64>>>, Vec<Option<ArrayD<f64>>>)> {
        let eps = seeded_noise(self.denoiser.codec.latent_shape(), noise_seed);
        let mut g = Graph::new();
        let (total, phi, theta, _) =
            self.build_total(&mut g, std::slice::from_ref(item), &[(timestep, eps)])?;
        let grads = g.backward(total);
        let own = |v: Vec<Option<&ArrayD<f64>>>| -> Vec<Option<ArrayD<f64>>> {
            v.into_iter().map(|o| o.cloned()).collect()
        };
        Ok((own(grads.per_param(&phi)), own(grads.per_param(&theta))))
    }

    /// Hand the trained weights over to the inference pipeline.
    pub fn into_nvs_model(self) -> crate::diffusion::NvsModel {
        crate::diffusion::NvsModel {
            geometry: self.geometry,
            geometry_params: self.geometry_params,
            adapter: self.adapter,
            adapter_params: self.adapter_params,
            denoiser: self.denoiser,
        }
    }

    /// L2 norms of the φ and θ gradients for a fixed draw.
    pub fn loss_gradient_norms(
        &self,
        item: &TrainBatch,
        timestep: usize,
        noise_seed: u64,
    ) -> Result<(f64, f64)> {
        let (phi, theta) = self.loss_gradients(item, timestep, noise_seed)?;
        Ok((grad_norm(&phi), grad_norm(&theta)))
    }
}

fn scalar(g: &Graph, t: Tensor) -> f64 {
    *g.value(t).first().expect("scalar loss tensor")
}

fn mean_of(g: &mut Graph, terms: &[Tensor]) -> Tensor {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

fn seeded_noise(shape: (usize, usize, usize), seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = shape;
    let mut eps = ArrayD::zeros(IxDyn(&[c, h, w]));
    for v in eps.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    eps
}

fn grad_norm(grads: &[Option<ArrayD<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|a| a.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Run `steps` optimizer steps, sampling `batch_size` items per step from
/// the scene list and reporting each step to `on_step`.
pub fn run_training(
    state: &mut TrainState,
    scenes: &[SceneRecord],
    steps: usize,
    mut on_step: impl FnMut(&LossReport),
) -> Result<()> {
    for _ in 0..steps {
        let mut items = Vec::with_capacity(state.config.train.batch_size);
        for _ in 0..state.config.train.batch_size {
            let plan = plan_batch(scenes, &state.config.train, &mut state.rng)?;
            items.push(load_batch(scenes, &plan)?);
        }
        let report = state.joint_step(&items)?;
        on_step(&report);
    }
    Ok(())
}

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// SHA-256 of a byte string, hex-encoded.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of the denoiser's current weights (the frozen-ψ audit value).
pub fn denoiser_fingerprint(denoiser: &DenoiserHandle) -> String {
    fingerprint(&denoiser.params.to_blob())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFingerprints {
    pub geometry: String,
    pub adapter: String,
    pub denoiser: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngSnapshot {
    seed: u64,
    /// ChaCha word position, decimal-encoded (u128 is not portable JSON).
    word_pos: String,
}

/// Checkpoint directory manifest. Readers accept any manifest whose version
/// is at most the current one and ignore fields they do not know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub config: PipelineConfig,
    pub denoiser_backend: String,
    pub fingerprints: CheckpointFingerprints,
    rng: RngSnapshot,
}

/// Parse and version-check a checkpoint manifest.
pub fn parse_checkpoint_manifest(bytes: &[u8], path: &Path) -> Result<CheckpointManifest> {
    let manifest: CheckpointManifest = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format_version > CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "manifest version {} is newer than supported version {}",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    manifest.config.validate()?;
    manifest.rng.word_pos.parse::<u128>().map_err(|_| {
        Error::Checkpoint(format!("rng word position {:?} is not an integer", manifest.rng.word_pos))
    })?;
    Ok(manifest)
}

/// Write the full training state into `dir`: a manifest plus one weight
/// blob per component and one optimizer blob per trainable store.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let geometry_blob = state.geometry_params.to_blob();
    let adapter_blob = state.adapter_params.to_blob();
    let denoiser_blob = state.denoiser.params.to_blob();
    let blobs: [(&str, Vec<u8>); 5] = [
        ("geometry.svwb", geometry_blob),
        ("adapter.svwb", adapter_blob),
        ("denoiser.svwb", denoiser_blob),
        ("geometry.adam.svwb", state.geometry_opt.to_blob(&state.geometry_params)),
        ("adapter.adam.svwb", state.adapter_opt.to_blob(&state.adapter_params)),
    ];
    for (name, bytes) in &blobs {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step: state.step,
        config: state.config.clone(),
        denoiser_backend: match &state.denoiser.backend {
            DenoiserBackend::Toy => "toy".into(),
            DenoiserBackend::External { model_id } => model_id.clone(),
        },
        fingerprints: CheckpointFingerprints {
            geometry: fingerprint(&blobs[0].1),
            adapter: fingerprint(&blobs[1].1),
            denoiser: fingerprint(&blobs[2].1),
        },
        rng: RngSnapshot {
            seed: state.config.train.seed,
            word_pos: state.rng.get_word_pos().to_string(),
        },
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest is serializable");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn read_blob(dir: &Path, name: &str, expected_fingerprint: Option<&str>) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(expected) = expected_fingerprint {
        let actual = fingerprint(&bytes);
        if actual != expected {
            return Err(Error::Checkpoint(format!(
                "{name} does not match its manifest fingerprint (expected {expected}, got {actual})"
            )));
        }
    }
    Ok(bytes)
}

/// Rebuild a [`TrainState`] from a checkpoint directory. Weight blobs are
/// integrity-checked against the manifest fingerprints; the restored state
/// reproduces forward outputs and the next step's loss bitwise.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let manifest_path = dir.join("manifest.json");
    let manifest_bytes =
        std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = parse_checkpoint_manifest(&manifest_bytes, &manifest_path)?;
    let config = manifest.config.clone();

    let schedule = config.schedule.to_schedule()?;
    let mut denoiser = DenoiserHandle::new_toy(config.denoiser.clone(), schedule, 0)?;
    let denoiser_blob = read_blob(dir, "denoiser.svwb", Some(&manifest.fingerprints.denoiser))?;
    denoiser.params.load_values_from(&ParamStore::from_blob(&denoiser_blob)?)?;
    denoiser.freeze();
    if manifest.denoiser_backend != "toy" {
        denoiser.backend = DenoiserBackend::External { model_id: manifest.denoiser_backend.clone() };
    }

    let mut state = TrainState::new(config, denoiser)?;
    let geometry_blob = read_blob(dir, "geometry.svwb", Some(&manifest.fingerprints.geometry))?;
    state.geometry_params.load_values_from(&ParamStore::from_blob(&geometry_blob)?)?;
    let adapter_blob = read_blob(dir, "adapter.svwb", Some(&manifest.fingerprints.adapter))?;
    state.adapter_params.load_values_from(&ParamStore::from_blob(&adapter_blob)?)?;

    let opt_cfg = AdamConfig { lr: state.config.train.learning_rate, ..AdamConfig::default() };
    state.geometry_opt = Adam::from_blob(
        opt_cfg,
        &state.geometry_params,
        &read_blob(dir, "geometry.adam.svwb", None)?,
    )?;
    state.adapter_opt = Adam::from_blob(
        opt_cfg,
        &state.adapter_params,
        &read_blob(dir, "adapter.adam.svwb", None)?,
    )?;

    state.step = manifest.step;
    let word_pos: u128 = manifest.rng.word_pos.parse().expect("validated by parse");
    state.rng = ChaCha8Rng::seed_from_u64(manifest.rng.seed);
    state.rng.set_word_pos(word_pos);
    Ok(state)
}
