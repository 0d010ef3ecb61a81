//! The guidance adapter: a trainable copy of the frozen denoiser's encoder
//! and middle blocks, fed the noisy latent plus a projection of the rendered
//! feature map, with zero-initialized 1×1 projections at every tap point.
//!
//! Because every tap starts at exactly zero, a guided denoiser pass at
//! initialization equals the unguided pass for any guidance weight λ; the
//! adapter only ever reads the denoiser's weights, never writes them.

use rand::Rng;
use sparseview_autodiff::{nn, Graph, ParamStore, ParamTensors, Tensor};

use crate::diffusion::{time_embedding, DenoiserEncoder, ToyDenoiser, ToyDenoiserConfig};
use crate::error::{Error, Result};

/// One guidance tensor per injection point, in denoiser order:
/// the three encoder skips (full, half, quarter resolution), then the middle
/// block.
pub struct GuidanceSignals {
    pub per_block: [Tensor; 4],
}

/// T_θ: encoder copy + zero taps + the feature-map input projection.
#[derive(Debug, Clone)]
pub struct GuidanceAdapter {
    pub denoiser_config: ToyDenoiserConfig,
    pub feature_dim: usize,
    encoder_copy: DenoiserEncoder,
    input_adapter: nn::Conv2d,
    taps: [nn::Conv2d; 4],
}

impl GuidanceAdapter {
    /// Build the adapter in `store`, copying the denoiser's encoder + middle
    /// weights bitwise. `feature_dim` is the channel count of the rendered
    /// feature map (projected to the latent space by a learned 1×1
    /// convolution — the resolutions already match).
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        denoiser: &ToyDenoiser,
        denoiser_params: &ParamStore,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        let cfg = denoiser.config.clone();
        let copy_prefix = format!("{name}.copy");
        let encoder_copy = DenoiserEncoder::new(store, &copy_prefix, &cfg, rng);

        // Overwrite the fresh copy with the denoiser's encoder weights.
        let src_prefix = format!("{}.", denoiser.encoder_prefix());
        let theta_ids: Vec<_> = store.ids().collect();
        let mut copied = 0usize;
        for id in theta_ids {
            let theta_name = store.name(id).to_string();
            let Some(suffix) = theta_name.strip_prefix(&format!("{copy_prefix}.")) else {
                continue;
            };
            let src_name = format!("{src_prefix}{suffix}");
            let src_id = denoiser_params.id_of(&src_name).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "denoiser has no parameter {src_name} to copy into the adapter"
                ))
            })?;
            let src = denoiser_params.value(src_id);
            if src.shape() != store.value(id).shape() {
                return Err(Error::ShapeMismatch {
                    context: "adapter weight copy",
                    expected: format!("{:?}", store.value(id).shape()),
                    found: format!("{:?} for {src_name}", src.shape()),
                });
            }
            *store.value_mut(id) = src.clone();
            copied += 1;
        }
        let available = denoiser_params
            .ids()
            .filter(|&id| denoiser_params.name(id).starts_with(&src_prefix))
            .count();
        if copied == 0 || copied != available {
            return Err(Error::InvalidArgument(format!(
                "adapter/denoiser architecture mismatch: copied {copied} of {available} encoder parameters"
            )));
        }

        let input_adapter = nn::Conv2d::new(
            store,
            &format!("{name}.input"),
            feature_dim,
            cfg.latent_channels,
            1,
            1,
            0,
            true,
            rng,
        );
        let ch = cfg.tap_channels();
        let taps = [
            nn::Conv2d::new_zero_1x1(store, &format!("{name}.tap0"), ch[0], ch[0]),
            nn::Conv2d::new_zero_1x1(store, &format!("{name}.tap1"), ch[1], ch[1]),
            nn::Conv2d::new_zero_1x1(store, &format!("{name}.tap2"), ch[2], ch[2]),
            nn::Conv2d::new_zero_1x1(store, &format!("{name}.tap3"), ch[3], ch[3]),
        ];
        Ok(Self { denoiser_config: cfg, feature_dim, encoder_copy, input_adapter, taps })
    }
}

/// Run the adapter: `x_t` is the `[1, c, h, w]` noisy latent, `f_map` the
/// `[1, feature_dim, h, w]` rendered feature map, `text` the `[1, text_dim]`
/// prompt embedding. Timestep and text conditioning flow into the copied
/// blocks exactly as they do into the denoiser's encoder.
pub fn compute_guidance(
    g: &mut Graph,
    pt: &ParamTensors,
    adapter: &GuidanceAdapter,
    x_t: Tensor,
    t: usize,
    text: Tensor,
    f_map: Tensor,
) -> Result<GuidanceSignals> {
    let cfg = &adapter.denoiser_config;
    let (h, w) = cfg.resolution;
    let expect_latent = [1, cfg.latent_channels, h, w];
    if g.value(x_t).shape() != expect_latent {
        return Err(Error::ShapeMismatch {
            context: "compute_guidance latent",
            expected: format!("{expect_latent:?}"),
            found: format!("{:?}", g.value(x_t).shape()),
        });
    }
    let expect_f = [1, adapter.feature_dim, h, w];
    if g.value(f_map).shape() != expect_f {
        return Err(Error::ShapeMismatch {
            context: "compute_guidance feature map",
            expected: format!("{expect_f:?}"),
            found: format!("{:?}", g.value(f_map).shape()),
        });
    }
    let f_in = adapter.input_adapter.forward(g, pt, f_map);
    let a_in = g.add(x_t, f_in);
    let temb_arr = time_embedding(t, cfg.time_dim)
        .into_shape_with_order(ndarray::IxDyn(&[1, cfg.time_dim]))
        .expect("temb reshape");
    let temb = g.constant(temb_arr);
    let feats = adapter.encoder_copy.forward(g, pt, a_in, temb, text);
    let inputs = [feats.skips[0], feats.skips[1], feats.skips[2], feats.middle];
    let mut signals = Vec::with_capacity(4);
    for (tap, &input) in adapter.taps.iter().zip(&inputs) {
        signals.push(tap.forward(g, pt, input));
    }
    Ok(GuidanceSignals {
        per_block: [signals[0], signals[1], signals[2], signals[3]],
    })
}

/// residual_input + λ · signal (shapes must match exactly).
pub fn inject(g: &mut Graph, residual_input: Tensor, signal: Tensor, lambda: f64) -> Result<Tensor> {
    if g.value(residual_input).shape() != g.value(signal).shape() {
        return Err(Error::ShapeMismatch {
            context: "inject",
            expected: format!("{:?}", g.value(residual_input).shape()),
            found: format!("{:?}", g.value(signal).shape()),
        });
    }
    let scaled = g.scale(signal, lambda);
    Ok(g.add(residual_input, scaled))
}

/// Double one tap's weights in place (test hook for the linearity check).
pub fn scale_tap_weights(
    store: &mut ParamStore,
    adapter: &GuidanceAdapter,
    tap_index: usize,
    factor: f64,
) {
    let tap = &adapter.taps[tap_index];
    store.value_mut(tap.w).mapv_inplace(|v| v * factor);
    if let Some(b) = tap.b {
        store.value_mut(b).mapv_inplace(|v| v * factor);
    }
}

/// Randomize every tap (test hook: moves the adapter off its zero-signal
/// initialization so gradients flow everywhere).
pub fn randomize_taps(store: &mut ParamStore, adapter: &GuidanceAdapter, rng: &mut impl Rng) {
    for tap in &adapter.taps {
        store.value_mut(tap.w).mapv_inplace(|_| rng.gen_range(-0.05..0.05));
        if let Some(b) = tap.b {
            store.value_mut(b).mapv_inplace(|_| rng.gen_range(-0.05..0.05));
        }
    }
}

/// Bundle for tests that need per-tap access.
pub fn tap_signal_values(
    adapter: &GuidanceAdapter,
    adapter_params: &ParamStore,
    x_t: &ndarray::ArrayD<f64>,
    t: usize,
    text: &ndarray::Array1<f64>,
    f_map: &ndarray::ArrayD<f64>,
) -> Result<Vec<ndarray::ArrayD<f64>>> {
    let cfg = &adapter.denoiser_config;
    let (h, w) = cfg.resolution;
    let mut g = Graph::new();
    let pt = g.load_params_frozen(adapter_params);
    let x = g.constant(
        x_t.clone()
            .into_shape_with_order(ndarray::IxDyn(&[1, cfg.latent_channels, h, w]))
            .map_err(|_| Error::InvalidArgument("latent shape".into()))?,
    );
    let text = g.constant(
        text.clone()
            .into_dyn()
            .into_shape_with_order(ndarray::IxDyn(&[1, cfg.text_dim]))
            .map_err(|_| Error::InvalidArgument("text shape".into()))?,
    );
    let f = g.constant(
        f_map
            .clone()
            .into_shape_with_order(ndarray::IxDyn(&[1, adapter.feature_dim, h, w]))
            .map_err(|_| Error::InvalidArgument("feature map shape".into()))?,
    );
    let signals = compute_guidance(&mut g, &pt, adapter, x, t, text, f)?;
    Ok(signals.per_block.iter().map(|&s| g.value(s).clone()).collect())
}

/// True when the two stores hold bitwise-identical values for every name in
/// `prefix` (used by frozen-denoiser audits).
pub fn params_bitwise_equal(a: &ParamStore, b: &ParamStore) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.ids().all(|id| {
        let name = a.name(id);
        match b.id_of(name) {
            Some(other) => {
                let (x, y) = (a.value(id), b.value(other));
                x.shape() == y.shape()
                    && x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
            }
            None => false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{embed_prompt, DenoiserHandle, EpsilonPredictor, NoiseSchedule, ToyDenoiserConfig};
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FEATURE_DIM: usize = 12;

    fn small_cfg() -> ToyDenoiserConfig {
        ToyDenoiserConfig {
            base_channels: 8,
            resolution: (16, 16),
            ..ToyDenoiserConfig::default()
        }
    }

    fn setup() -> (DenoiserHandle, ParamStore, GuidanceAdapter) {
        let handle = DenoiserHandle::new_toy(small_cfg(), NoiseSchedule::default_linear(), 1).unwrap();
        let mut theta = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adapter = GuidanceAdapter::init(
            &mut theta,
            "adapter",
            &handle.model,
            &handle.params,
            FEATURE_DIM,
            &mut rng,
        )
        .unwrap();
        (handle, theta, adapter)
    }

    fn random_arr(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_copies_encoder_weights_bitwise_and_zeroes_taps() {
        let (handle, theta, _adapter) = setup();
        let src_prefix = format!("{}.", handle.model.encoder_prefix());
        let mut checked = 0;
        for id in handle.params.ids() {
            let name = handle.params.name(id);
            let Some(suffix) = name.strip_prefix(&src_prefix) else { continue };
            let theta_id = theta.id_of(&format!("adapter.copy.{suffix}")).expect("copied param");
            let (a, b) = (handle.params.value(id), theta.value(theta_id));
            assert_eq!(a.shape(), b.shape());
            assert!(
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "copy of {name} not bitwise identical"
            );
            checked += 1;
        }
        assert!(checked >= 8, "expected several copied tensors, saw {checked}");
        for i in 0..4 {
            let w = theta.value(theta.id_of(&format!("adapter.tap{i}.w")).unwrap());
            let b = theta.value(theta.id_of(&format!("adapter.tap{i}.b")).unwrap());
            assert!(w.iter().all(|&v| v == 0.0), "tap{i} weights must start at zero");
            assert!(b.iter().all(|&v| v == 0.0), "tap{i} bias must start at zero");
        }
    }

    #[test]
    fn signals_are_exactly_zero_at_init() {
        let (_handle, theta, adapter) = setup();
        let x = random_arr(3, &[3, 16, 16]);
        let f = random_arr(4, &[FEATURE_DIM, 16, 16]);
        let text = embed_prompt("a picture of a chair", 16);
        let signals = tap_signal_values(&adapter, &theta, &x, 321, &text, &f).unwrap();
        assert_eq!(signals.len(), 4);
        for (i, s) in signals.iter().enumerate() {
            assert!(s.iter().all(|&v| v == 0.0), "tap {i} must output exactly zero");
        }
    }

    #[test]
    fn guided_forward_equals_unguided_at_init_for_every_lambda() {
        let (handle, theta, adapter) = setup();
        let x = random_arr(5, &[3, 16, 16]);
        let f = random_arr(6, &[FEATURE_DIM, 16, 16]);
        let text = embed_prompt("a picture of a mug", 16);
        let unguided = handle.predict(&x, 640, &text, None).unwrap();
        for lambda in [0.0, 1.0, 2.0, 5.0] {
            let ctx = crate::diffusion::GuidanceContext {
                adapter: &adapter,
                params: &theta,
                feature_map: f.clone(),
                lambda,
            };
            let guided = handle.predict(&x, 640, &text, Some(&ctx)).unwrap();
            let worst = guided
                .iter()
                .zip(unguided.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-6, "lambda {lambda}: max abs diff {worst}");
        }
    }

    #[test]
    fn inject_is_exactly_linear_in_lambda() {
        let mut g = Graph::new();
        let x = g.constant(random_arr(7, &[1, 4, 8, 8]));
        let s = g.constant(random_arr(8, &[1, 4, 8, 8]));
        let zero = g.constant(ArrayD::zeros(IxDyn(&[1, 4, 8, 8])));

        let same = inject(&mut g, x, s, 0.0).unwrap();
        assert_eq!(g.value(same), g.value(x), "lambda = 0 leaves the input unchanged");
        let same2 = inject(&mut g, x, zero, 3.5).unwrap();
        assert_eq!(g.value(same2), g.value(x), "zero signal leaves the input unchanged");

        let two = inject(&mut g, x, s, 2.0).unwrap();
        for ((o, xi), si) in g.value(two).iter().zip(g.value(x).iter()).zip(g.value(s).iter()) {
            assert_eq!(*o, xi + 2.0 * si, "inject must be x + 2s exactly");
        }

        let bad = g.constant(ArrayD::zeros(IxDyn(&[1, 4, 4, 4])));
        assert!(inject(&mut g, x, bad, 1.0).is_err());
    }

    #[test]
    fn doubling_one_tap_doubles_exactly_that_signal() {
        let (_handle, mut theta, adapter) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        randomize_taps(&mut theta, &adapter, &mut rng);
        let x = random_arr(10, &[3, 16, 16]);
        let f = random_arr(11, &[FEATURE_DIM, 16, 16]);
        let text = embed_prompt("a picture of a lamp", 16);
        let before = tap_signal_values(&adapter, &theta, &x, 77, &text, &f).unwrap();
        scale_tap_weights(&mut theta, &adapter, 2, 2.0);
        let after = tap_signal_values(&adapter, &theta, &x, 77, &text, &f).unwrap();
        for (i, (b, a)) in before.iter().zip(after.iter()).enumerate() {
            if i == 2 {
                let worst = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - 2.0 * y).abs())
                    .fold(0.0f64, f64::max);
                assert!(worst < 1e-6, "tap 2 should exactly double, off by {worst}");
            } else {
                assert_eq!(a, b, "tap {i} must be untouched");
            }
        }
    }

    #[test]
    fn adapter_construction_never_mutates_denoiser_weights() {
        let handle = DenoiserHandle::new_toy(small_cfg(), NoiseSchedule::default_linear(), 4).unwrap();
        let snapshot = ParamStore::from_blob(&handle.params.to_blob()).unwrap();
        let mut theta = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let adapter = GuidanceAdapter::init(
            &mut theta,
            "adapter",
            &handle.model,
            &handle.params,
            FEATURE_DIM,
            &mut rng,
        )
        .unwrap();
        let x = random_arr(12, &[3, 16, 16]);
        let f = random_arr(13, &[FEATURE_DIM, 16, 16]);
        let text = embed_prompt("a picture of a shoe", 16);
        let _ = tap_signal_values(&adapter, &theta, &x, 10, &text, &f).unwrap();
        assert!(
            params_bitwise_equal(&handle.params, &snapshot),
            "denoiser weights must be bitwise unchanged"
        );
    }

    #[test]
    fn init_rejects_architecture_mismatch() {
        let handle = DenoiserHandle::new_toy(small_cfg(), NoiseSchedule::default_linear(), 6).unwrap();
        let empty = ParamStore::new();
        let mut theta = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let err = GuidanceAdapter::init(&mut theta, "adapter", &handle.model, &empty, FEATURE_DIM, &mut rng);
        assert!(err.is_err(), "empty denoiser store must be rejected");
    }
}
