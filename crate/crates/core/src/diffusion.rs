//! Noise schedule, forward perturbation, the DDIM sampler, a small latent
//! U-Net denoiser with an identity pixel codec, and the noise-perturbation
//! inference procedure that turns a coarse color estimate into a guided
//! sample.
//!
//! The denoiser predicts the noise ε̂(x_t, t, text); sampling runs the
//! deterministic DDIM update x_{t-1} = √ᾱ_{t-1}·x̂0 + √(1-ᾱ_{t-1})·ε̂ with
//! x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t. Guidance signals from the adapter are
//! added at the denoiser's skip connections and middle block, scaled by λ.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sparseview_autodiff::{nn, Adam, AdamConfig, Graph, ParamStore, ParamTensors, Tensor};

use crate::aggregation::GeometryModel;
use crate::camera::CameraPose;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::guidance::{compute_guidance, GuidanceAdapter, GuidanceSignals};

/// Cumulative noise products ᾱ_0..ᾱ_T with ᾱ_0 = 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for i in 0..t_max {
            let beta = if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            };
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(Self { alpha_bar })
    }

    /// The ubiquitous default: β in [1e-4, 0.02], T = 1000.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    /// Number of diffusion steps T (indices run 0..=T).
    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("timestep {t} outside schedule 0..={}", self.t_max()))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.is_empty() || (self.alpha_bar[0] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("schedule must start at alpha_bar = 1".into()));
        }
        for pair in self.alpha_bar.windows(2) {
            if !(pair[1] > 0.0 && pair[1] <= pair[0]) {
                return Err(Error::InvalidArgument(
                    "alpha_bar must be non-increasing and stay in (0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A latent tensor together with its position on the noise schedule.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub latent: ArrayD<f64>,
    pub timestep: usize,
}

/// x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε.
pub fn perturb(
    x0: &ArrayD<f64>,
    schedule: &NoiseSchedule,
    t: usize,
    epsilon: &ArrayD<f64>,
) -> Result<ArrayD<f64>> {
    if x0.shape() != epsilon.shape() {
        return Err(Error::ShapeMismatch {
            context: "perturb",
            expected: format!("{:?}", x0.shape()),
            found: format!("{:?}", epsilon.shape()),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(x0 * ab.sqrt() + epsilon * (1.0 - ab).sqrt())
}

/// The ascending DDIM timestep grid `[0, T/steps, 2T/steps, ..., T]`.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::InvalidArgument(format!(
            "DDIM steps must be in 1..={t_max}, got {steps}"
        )));
    }
    Ok((0..=steps)
        .map(|k| (k as f64 * t_max as f64 / steps as f64).round() as usize)
        .collect())
}

/// Anything that can predict ε̂ for a latent at a timestep.
pub trait EpsilonPredictor {
    fn predict(
        &self,
        x_t: &ArrayD<f64>,
        t: usize,
        condition: &Array1<f64>,
        guidance: Option<&GuidanceContext<'_>>,
    ) -> Result<ArrayD<f64>>;
}

/// Everything needed to compute guidance signals outside a training graph.
pub struct GuidanceContext<'a> {
    pub adapter: &'a GuidanceAdapter,
    pub params: &'a ParamStore,
    /// `[feature_dim, h, w]` value of the rendered feature map.
    pub feature_map: ArrayD<f64>,
    pub lambda: f64,
}

/// Deterministic DDIM sampling (η = 0) from `initial` down to timestep 0.
/// `initial.timestep` must sit on the `steps`-point grid.
pub fn ddim_sample(
    predictor: &dyn EpsilonPredictor,
    schedule: &NoiseSchedule,
    initial: &LatentState,
    steps: usize,
    guidance: Option<&GuidanceContext<'_>>,
    condition: &Array1<f64>,
) -> Result<ArrayD<f64>> {
    schedule.validate()?;
    let grid = ddim_timesteps(schedule.t_max(), steps)?;
    let start = grid.iter().position(|&t| t == initial.timestep).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "initial timestep {} is not on the {steps}-step DDIM grid",
            initial.timestep
        ))
    })?;
    let mut x = initial.latent.clone();
    check_finite(&x, "ddim initial latent", initial.timestep)?;
    for k in (1..=start).rev() {
        let (t, t_prev) = (grid[k], grid[k - 1]);
        let eps_hat = predictor.predict(&x, t, condition, guidance)?;
        if eps_hat.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                context: "ddim_sample",
                expected: format!("{:?}", x.shape()),
                found: format!("{:?}", eps_hat.shape()),
            });
        }
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = schedule.alpha_bar(t_prev)?;
        let x0_hat = (&x - &(&eps_hat * (1.0 - ab).sqrt())) / ab.sqrt();
        x = &x0_hat * ab_prev.sqrt() + &eps_hat * (1.0 - ab_prev).sqrt();
        check_finite(&x, "ddim latent", t_prev)?;
    }
    Ok(x)
}

fn check_finite(x: &ArrayD<f64>, context: &'static str, t: usize) -> Result<()> {
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context,
            detail: Some(format!("value {bad} at timestep {t}")),
        });
    }
    Ok(())
}

/// Maps images to latents and back. The toy backend is the identity on
/// 3-channel pixels (layout change only); decode never clamps so closed-form
/// sampling identities survive the round trip.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LatentCodec {
    Identity { resolution: (usize, usize) },
}

impl LatentCodec {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        match self {
            Self::Identity { resolution: (h, w) } => (3, *h, *w),
        }
    }

    /// `[h, w, 3]` image to `[3, h, w]` latent.
    pub fn encode(&self, image: &Image) -> Result<ArrayD<f64>> {
        let (c, h, w) = self.latent_shape();
        if image.dim() != (h, w, 3) {
            return Err(Error::ShapeMismatch {
                context: "codec encode",
                expected: format!("({h}, {w}, 3)"),
                found: format!("{:?}", image.dim()),
            });
        }
        let chw = image.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
        Ok(chw.into_dyn().into_shape_with_order(IxDyn(&[c, h, w])).expect("encode reshape"))
    }

    /// `[3, h, w]` latent to `[h, w, 3]` image, values passed through as-is.
    pub fn decode(&self, latent: &ArrayD<f64>) -> Result<Image> {
        let (c, h, w) = self.latent_shape();
        if latent.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                context: "codec decode",
                expected: format!("[{c}, {h}, {w}]"),
                found: format!("{:?}", latent.shape()),
            });
        }
        let arr = latent
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("decode rank")
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .to_owned();
        Ok(arr)
    }
}

/// Sizes of the toy latent U-Net.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub resolution: (usize, usize),
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_channels: 16,
            time_dim: 16,
            text_dim: 16,
            resolution: (32, 32),
        }
    }
}

impl ToyDenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "denoiser resolution {h}x{w} must be a positive multiple of 4"
            )));
        }
        if self.latent_channels == 0
            || self.base_channels == 0
            || self.time_dim < 2
            || self.text_dim == 0
        {
            return Err(Error::InvalidArgument("denoiser config has a zero-sized component".into()));
        }
        Ok(())
    }

    /// Channel counts at the adapter tap points: the three encoder skips
    /// (full, half, quarter resolution) and the middle block.
    pub fn tap_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 4 * b]
    }
}

/// Convolution + timestep (and optionally text) conditioning + SiLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: nn::Conv2d,
    time: nn::Linear,
    text: Option<nn::Linear>,
    out_channels: usize,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        cfg: &ToyDenoiserConfig,
        with_text: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: nn::Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, 3, stride, 1, true, rng),
            time: nn::Linear::new(store, &format!("{name}.time"), cfg.time_dim, out_ch, true, rng),
            text: with_text
                .then(|| nn::Linear::new(store, &format!("{name}.text"), cfg.text_dim, out_ch, true, rng)),
            out_channels: out_ch,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        x: Tensor,
        temb: Tensor,
        text: Option<Tensor>,
    ) -> Tensor {
        let mut h = self.conv.forward(g, pt, x);
        let tp = self.time.forward(g, pt, temb);
        let tp = g.reshape(tp, &[1, self.out_channels, 1, 1]);
        h = g.add(h, tp);
        if let (Some(text_proj), Some(text)) = (&self.text, text) {
            let xp = text_proj.forward(g, pt, text);
            let xp = g.reshape(xp, &[1, self.out_channels, 1, 1]);
            h = g.add(h, xp);
        }
        g.silu(h)
    }
}

/// The encoder + middle half of the U-Net; the guidance adapter holds an
/// exact copy of this structure.
#[derive(Debug, Clone)]
pub struct DenoiserEncoder {
    enc0: ConvBlock,
    enc1: ConvBlock,
    enc2: ConvBlock,
    middle: ConvBlock,
}

/// Per-resolution encoder outputs: three skips plus the middle activation.
pub struct EncoderFeatures {
    pub skips: [Tensor; 3],
    pub middle: Tensor,
}

impl DenoiserEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ToyDenoiserConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (c, b) = (cfg.latent_channels, cfg.base_channels);
        Self {
            enc0: ConvBlock::new(store, &format!("{name}.enc0"), c, b, 1, cfg, false, rng),
            enc1: ConvBlock::new(store, &format!("{name}.enc1"), b, 2 * b, 2, cfg, false, rng),
            enc2: ConvBlock::new(store, &format!("{name}.enc2"), 2 * b, 4 * b, 2, cfg, false, rng),
            middle: ConvBlock::new(store, &format!("{name}.middle"), 4 * b, 4 * b, 1, cfg, true, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        x: Tensor,
        temb: Tensor,
        text: Tensor,
    ) -> EncoderFeatures {
        let s0 = self.enc0.forward(g, pt, x, temb, None);
        let s1 = self.enc1.forward(g, pt, s0, temb, None);
        let s2 = self.enc2.forward(g, pt, s1, temb, None);
        let middle = self.middle.forward(g, pt, s2, temb, Some(text));
        EncoderFeatures { skips: [s0, s1, s2], middle }
    }
}

/// Small latent U-Net: three encoder scales, a middle block, and a decoder
/// with skip connections where guidance signals are injected.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    pub config: ToyDenoiserConfig,
    pub encoder: DenoiserEncoder,
    prefix: String,
    dec2: ConvBlock,
    dec1: ConvBlock,
    dec0: nn::Conv2d,
}

impl ToyDenoiser {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: ToyDenoiserConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (c, b) = (config.latent_channels, config.base_channels);
        Ok(Self {
            encoder: DenoiserEncoder::new(store, &format!("{name}.encoder"), &config, rng),
            prefix: name.to_string(),
            dec2: ConvBlock::new(store, &format!("{name}.dec2"), 8 * b, 2 * b, 1, &config, false, rng),
            dec1: ConvBlock::new(store, &format!("{name}.dec1"), 4 * b, b, 1, &config, false, rng),
            dec0: nn::Conv2d::new(store, &format!("{name}.dec0"), 2 * b, c, 3, 1, 1, true, rng),
            config,
        })
    }

    /// Prefix of the encoder + middle parameters inside the denoiser store.
    pub fn encoder_prefix(&self) -> String {
        format!("{}.encoder", self.prefix)
    }

    /// Predict ε̂ for a `[1, c, h, w]` latent at integer timestep `t`.
    /// Guidance signals, when present, are added to the middle activation
    /// and each skip connection, scaled by λ.
    pub fn forward(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        x_t: Tensor,
        t: usize,
        text: Tensor,
        guidance: Option<(&GuidanceSignals, f64)>,
    ) -> Result<Tensor> {
        let (h, w) = self.config.resolution;
        let expect = [1, self.config.latent_channels, h, w];
        if g.value(x_t).shape() != expect {
            return Err(Error::ShapeMismatch {
                context: "denoiser forward",
                expected: format!("{expect:?}"),
                found: format!("{:?}", g.value(x_t).shape()),
            });
        }
        let temb_arr = time_embedding(t, self.config.time_dim);
        let temb = g.constant(temb_arr.into_shape_with_order(IxDyn(&[1, self.config.time_dim])).expect("temb"));
        let feats = self.encoder.forward(g, pt, x_t, temb, text);

        let (skips, middle) = match guidance {
            Some((signals, lambda)) => {
                let mut skips = Vec::with_capacity(3);
                for (i, &skip) in feats.skips.iter().enumerate() {
                    skips.push(crate::guidance::inject(g, skip, signals.per_block[i], lambda)?);
                }
                let middle = crate::guidance::inject(g, feats.middle, signals.per_block[3], lambda)?;
                (skips, middle)
            }
            None => (feats.skips.to_vec(), feats.middle),
        };

        let d2_in = g.concat(&[middle, skips[2]], 1);
        let d2 = self.dec2.forward(g, pt, d2_in, temb, None);
        let d2 = g.upsample_nearest_2x(d2);
        let d1_in = g.concat(&[d2, skips[1]], 1);
        let d1 = self.dec1.forward(g, pt, d1_in, temb, None);
        let d1 = g.upsample_nearest_2x(d1);
        let d0_in = g.concat(&[d1, skips[0]], 1);
        Ok(self.dec0.forward(g, pt, d0_in))
    }
}

/// Sinusoidal timestep embedding of length `dim`.
pub fn time_embedding(t: usize, dim: usize) -> ArrayD<f64> {
    assert!(dim >= 2, "time embedding needs dim >= 2");
    let half = dim / 2;
    let mut out = ArrayD::zeros(IxDyn(&[dim]));
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Deterministic bag-of-words text embedding: each word hashes to a seed for
/// a fixed pseudo-random unit vector; the prompt embeds as their mean.
pub fn embed_prompt(prompt: &str, dim: usize) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(dim);
    let mut count = 0usize;
    for word in prompt.split_whitespace() {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
        let mut v = Array1::<f64>::zeros(dim);
        for slot in v.iter_mut() {
            *slot = rng.sample(StandardNormal);
        }
        let norm = v.dot(&v).sqrt().max(1e-12);
        acc += &(v / norm);
        count += 1;
    }
    if count > 0 {
        acc /= count as f64;
    }
    acc
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

/// Which weights sit behind the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DenoiserBackend {
    Toy,
    External { model_id: String },
}

/// The frozen denoiser ε_ψ with its codec and schedule.
pub struct DenoiserHandle {
    pub backend: DenoiserBackend,
    pub model: ToyDenoiser,
    pub params: ParamStore,
    pub frozen: bool,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
}

impl DenoiserHandle {
    /// Fresh random denoiser (not yet trained, not yet frozen).
    pub fn new_toy(config: ToyDenoiserConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let codec = LatentCodec::Identity { resolution: config.resolution };
        let model = ToyDenoiser::new(&mut params, "denoiser", config, &mut rng)?;
        Ok(Self { backend: DenoiserBackend::Toy, model, params, frozen: false, codec, schedule })
    }

    /// External pretrained weights when present; otherwise degrade to the
    /// toy backend with a warning.
    pub fn from_external(
        model_id: &str,
        weight_path: &std::path::Path,
        config: ToyDenoiserConfig,
        schedule: NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        let mut handle = Self::new_toy(config, schedule, seed)?;
        match std::fs::read(weight_path) {
            Ok(bytes) => {
                let blob = ParamStore::from_blob(&bytes)?;
                handle.params.load_values_from(&blob)?;
                handle.backend = DenoiserBackend::External { model_id: model_id.to_string() };
                handle.frozen = true;
            }
            Err(err) => {
                log::warn!(
                    "external denoiser weights {} unavailable ({err}); using the toy backend",
                    weight_path.display()
                );
            }
        }
        Ok(handle)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Run one forward pass on plain values (fresh private graph).
    fn predict_value(
        &self,
        x_t: &ArrayD<f64>,
        t: usize,
        condition: &Array1<f64>,
        guidance: Option<&GuidanceContext<'_>>,
    ) -> Result<ArrayD<f64>> {
        let (c, h, w) = self.codec.latent_shape();
        if x_t.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                context: "predict_epsilon",
                expected: format!("[{c}, {h}, {w}]"),
                found: format!("{:?}", x_t.shape()),
            });
        }
        let mut g = Graph::new();
        let pt = g.load_params_frozen(&self.params);
        let x = g.constant(
            x_t.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).expect("latent reshape"),
        );
        let text = g.constant(
            condition
                .clone()
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, condition.len()]))
                .expect("text reshape"),
        );
        let signals = match guidance {
            Some(ctx) => {
                let pt_theta = g.load_params_frozen(ctx.params);
                let shape = ctx.feature_map.shape().to_vec();
                let f = g.constant(
                    ctx.feature_map
                        .clone()
                        .into_shape_with_order(IxDyn(&[1, shape[0], shape[1], shape[2]]))
                        .expect("feature map reshape"),
                );
                Some((
                    compute_guidance(&mut g, &pt_theta, ctx.adapter, x, t, text, f)?,
                    ctx.lambda,
                ))
            }
            None => None,
        };
        let eps = self.model.forward(&mut g, &pt, x, t, text, signals.as_ref().map(|(s, l)| (s, *l)))?;
        let out = g.value(eps).clone();
        out.into_shape_with_order(IxDyn(&[c, h, w]))
            .map_err(|_| Error::InvalidArgument("epsilon shape".into()))
    }
}

impl EpsilonPredictor for DenoiserHandle {
    fn predict(
        &self,
        x_t: &ArrayD<f64>,
        t: usize,
        condition: &Array1<f64>,
        guidance: Option<&GuidanceContext<'_>>,
    ) -> Result<ArrayD<f64>> {
        self.predict_value(x_t, t, condition, guidance)
    }
}

/// Settings for `toy_denoiser_train`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, learning_rate: 1e-3, seed: 7 }
    }
}

/// Train the toy denoiser with the standard ε-prediction objective and
/// freeze it. Returns the handle and the per-step loss curve.
pub fn toy_denoiser_train(
    images: &[Image],
    prompt_embedding: &Array1<f64>,
    denoiser_config: ToyDenoiserConfig,
    schedule: NoiseSchedule,
    train: &ToyTrainConfig,
) -> Result<(DenoiserHandle, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("toy denoiser training needs images".into()));
    }
    schedule.validate()?;
    let mut handle = DenoiserHandle::new_toy(denoiser_config, schedule, train.seed)?;
    let (c, h, w) = handle.codec.latent_shape();
    let latents: Vec<ArrayD<f64>> = images
        .iter()
        .map(|img| handle.codec.encode(img))
        .collect::<Result<_>>()?;
    if prompt_embedding.len() != handle.model.config.text_dim {
        return Err(Error::ShapeMismatch {
            context: "toy_denoiser_train",
            expected: format!("text embedding of length {}", handle.model.config.text_dim),
            found: format!("{}", prompt_embedding.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(
        AdamConfig { lr: train.learning_rate, ..AdamConfig::default() },
        &handle.params,
    );
    let t_max = handle.schedule.t_max();
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let idx = (rng.next_u64() % images.len() as u64) as usize;
        let t = 1 + (rng.next_u64() % t_max as u64) as usize;
        let mut eps = ArrayD::zeros(IxDyn(&[c, h, w]));
        for v in eps.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x_t = perturb(&latents[idx], &handle.schedule, t, &eps)?;

        let mut g = Graph::new();
        let pt = g.load_params(&handle.params);
        let x = g.constant(
            x_t.into_shape_with_order(IxDyn(&[1, c, h, w])).expect("latent reshape"),
        );
        let text = g.constant(
            prompt_embedding
                .clone()
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, prompt_embedding.len()]))
                .expect("text reshape"),
        );
        let eps_hat = handle.model.forward(&mut g, &pt, x, t, text, None)?;
        let eps_target =
            g.constant(eps.into_shape_with_order(IxDyn(&[1, c, h, w])).expect("eps reshape"));
        let loss = g.mse(eps_hat, eps_target);
        let loss_value = g.value(loss)[[]];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                context: "toy denoiser training",
                detail: Some(format!("loss {loss_value} at step {step}")),
            });
        }
        losses.push(loss_value);
        let grads = g.backward(loss);
        let per_param = grads.per_param(&pt);
        adam.step(&mut handle.params, &per_param);
    }
    handle.freeze();
    Ok((handle, losses))
}

/// Inference options for `nvs_inference`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NvsOptions {
    /// DDIM grid resolution.
    pub ddim_steps: usize,
    /// How many of those steps of noise to add to the coarse estimate
    /// (k = ddim_steps reproduces the full-strength start; k = 0 skips
    /// denoising entirely).
    pub perturb_steps: usize,
    /// Guidance weight λ at inference.
    pub lambda: f64,
    /// Replace the perturbed start with pure Gaussian noise at x_T.
    pub random_start: bool,
    pub seed: u64,
}

impl Default for NvsOptions {
    fn default() -> Self {
        Self { ddim_steps: 20, perturb_steps: 20, lambda: 2.0, random_start: false, seed: 0 }
    }
}

/// A trained end-to-end pipeline: geometry branch, guidance adapter, frozen
/// denoiser.
pub struct NvsModel {
    pub geometry: GeometryModel,
    pub geometry_params: ParamStore,
    pub adapter: GuidanceAdapter,
    pub adapter_params: ParamStore,
    pub denoiser: DenoiserHandle,
}

impl NvsModel {
    /// Synthesize a novel view: estimate a coarse image from context views,
    /// push it `perturb_steps` up the noise schedule, and denoise with the
    /// adapter's guidance.
    pub fn nvs_inference(
        &self,
        contexts: &[(Image, CameraPose)],
        target: &CameraPose,
        depth_range: (f64, f64),
        prompt: &str,
        opts: &NvsOptions,
    ) -> Result<Image> {
        if opts.perturb_steps > opts.ddim_steps {
            return Err(Error::InvalidArgument(format!(
                "perturb_steps {} exceeds ddim_steps {}",
                opts.perturb_steps, opts.ddim_steps
            )));
        }
        let mut g = Graph::new();
        let pt = g.load_params_frozen(&self.geometry_params);
        let ctx = self.geometry.encode_contexts(&mut g, &pt, contexts, depth_range)?;
        let rendered = self.geometry.render(&mut g, &pt, &ctx, target)?;
        let coarse = g.value(rendered.coarse_image).clone();
        let feature_map = g.value(rendered.feature_map).clone();
        drop(g);

        let coarse_image: Image = coarse
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| Error::InvalidArgument("coarse image rank".into()))?;
        let x0 = self.denoiser.codec.encode(&coarse_image)?;
        if opts.perturb_steps == 0 && !opts.random_start {
            return self.denoiser.codec.decode(&x0);
        }
        let grid = ddim_timesteps(self.denoiser.schedule.t_max(), opts.ddim_steps)?;
        let t_start = if opts.random_start {
            grid[opts.ddim_steps]
        } else {
            grid[opts.perturb_steps]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut eps = ArrayD::zeros(IxDyn(x0.shape()));
        for v in eps.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x_start = if opts.random_start {
            eps
        } else {
            perturb(&x0, &self.denoiser.schedule, t_start, &eps)?
        };
        let condition = embed_prompt(prompt, self.denoiser.model.config.text_dim);
        let gctx = GuidanceContext {
            adapter: &self.adapter,
            params: &self.adapter_params,
            feature_map,
            lambda: opts.lambda,
        };
        let final_latent = ddim_sample(
            &self.denoiser,
            &self.denoiser.schedule,
            &LatentState { latent: x_start, timestep: t_start },
            opts.ddim_steps,
            Some(&gctx),
            &condition,
        )?;
        self.denoiser.codec.decode(&final_latent)
    }
}
