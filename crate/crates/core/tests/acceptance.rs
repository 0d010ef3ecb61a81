//! Acceptance suite: one test per release criterion, each printing a
//! `acceptance NN <name>: PASS|FAIL` line (visible under `--nocapture`).
//! Tolerances are pinned in the assertions; the slow end-to-end criteria
//! (07, 08, 09) share one jointly trained fixture.

use std::panic::AssertUnwindSafe;
use std::sync::OnceLock;

use nalgebra::Vector3;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use sparseview_core::aggregation::{
    convex_hull_violation, target_colors_at_grid, GeometryConfig, GeometryModel,
};
use sparseview_core::camera::{cast_rays, plucker, CameraPose, Ray};
use sparseview_core::data::{
    ingest, load_image, write_synthetic_dataset, CameraRing, Image, Primitive, PrimitiveShape,
    SceneRecord, SyntheticSceneSpec,
};
use sparseview_core::diffusion::{
    ddim_sample, perturb, toy_denoiser_train, DenoiserHandle, EpsilonPredictor, GuidanceContext,
    LatentState, NoiseSchedule, NvsModel, NvsOptions, ToyDenoiserConfig, ToyTrainConfig,
};
use sparseview_core::evaluation::{
    psnr_from_mse, psnr_with, run_protocol, IdentityOracle, PSNR_CAP_DB,
};
use sparseview_core::guidance::{randomize_taps, GuidanceAdapter};
use sparseview_core::training::{
    denoiser_fingerprint, run_training, PipelineConfig, ScheduleSpec, TrainBatch, TrainConfig,
    TrainState,
};
use sparseview_autodiff::{pick_coordinates, relative_error, Graph, ParamId, ParamStore};

/// Runs one criterion body and prints its verdict line. Assertion failures
/// inside the body still fail the test; the line makes the per-criterion
/// outcome greppable from the test log.
fn criterion(number: usize, name: &str, body: impl FnOnce()) {
    let result = std::panic::catch_unwind(AssertUnwindSafe(body));
    match result {
        Ok(()) => println!("acceptance {number:02} {name}: PASS"),
        Err(payload) => {
            println!("acceptance {number:02} {name}: FAIL");
            std::panic::resume_unwind(payload);
        }
    }
}

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn image_mse(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Small geometry profile every fast criterion shares.
fn tiny_geometry() -> GeometryConfig {
    GeometryConfig {
        backbone: sparseview_core::volumes::BackboneProfile {
            channels: [8, 16, 16],
            strides: [4, 8, 16],
            depth_resolution: 8,
        },
        width: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        points_per_ray: 4,
        depth_freqs: 2,
        feature_dim: 4,
        feature_resolution: (8, 8),
    }
}

fn tiny_denoiser() -> ToyDenoiserConfig {
    ToyDenoiserConfig {
        latent_channels: 3,
        base_channels: 8,
        time_dim: 8,
        text_dim: 8,
        resolution: (8, 8),
    }
}

fn two_object_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        class_name: "ornament".into(),
        primitives: vec![
            Primitive {
                shape: PrimitiveShape::Sphere,
                center: [0.0, 0.0, 0.0],
                size: 0.6,
                albedo: [0.9, 0.3, 0.2],
            },
            Primitive {
                shape: PrimitiveShape::Box,
                center: [0.75, 0.1, 0.0],
                size: 0.45,
                albedo: [0.2, 0.7, 0.3],
            },
        ],
        background: [0.05, 0.05, 0.25],
        camera_ring: CameraRing {
            count: 8,
            radius: 3.0,
            elevation_deg: 15.0,
            image_size: (16, 16),
            focal: None,
        },
    }
}

/// Fast fixture: dataset on disk plus an untrained geometry model. Geometry
/// invariants (weight normalization, convexity, permutation symmetry) hold
/// architecturally, so random weights exercise them fully.
struct GeometryFixture {
    _dir: TempDir,
    scene: SceneRecord,
    model: GeometryModel,
    params: ParamStore,
}

fn geometry_fixture() -> &'static GeometryFixture {
    static FIXTURE: OnceLock<GeometryFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        write_synthetic_dataset(&two_object_spec(), dir.path(), "ornament_0").unwrap();
        let scene = ingest(dir.path()).unwrap().remove(0);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = GeometryModel::new(&mut params, "geometry", tiny_geometry(), &mut rng).unwrap();
        GeometryFixture { _dir: dir, scene, model, params }
    })
}

fn context_views(scene: &SceneRecord, indices: &[usize]) -> Vec<(Image, CameraPose)> {
    indices
        .iter()
        .map(|&i| {
            let frame = &scene.frames[i];
            (load_image(&frame.image_path).unwrap(), frame.pose.clone())
        })
        .collect()
}

/// Slow fixture: the full joint training run behind criteria 07–09.
/// One object, 8 ring views, one held out; toy backbone and toy denoiser.
struct OverfitFixture {
    heldout_image: Image,
    heldout_pose: CameraPose,
    eval_contexts: Vec<(Image, CameraPose)>,
    bounds: (f64, f64),
    model: NvsModel,
    prompt: String,
    /// Denoiser fingerprint before training and after every 200-step chunk.
    fingerprints: Vec<String>,
    steps_taken: usize,
}

const HELD_OUT_FRAME: usize = 3;
const OVERFIT_STEPS: usize = 1600;

/// Geometry for the overfit run: denser depth sampling than the fast tests
/// need, so the coarse estimate can localize the fixture's surfaces.
fn overfit_geometry() -> GeometryConfig {
    GeometryConfig { points_per_ray: 12, width: 16, ..tiny_geometry() }
}

fn overfit_fixture() -> &'static OverfitFixture {
    static FIXTURE: OnceLock<OverfitFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        write_synthetic_dataset(&two_object_spec(), dir.path(), "ornament_0").unwrap();
        let mut scene = ingest(dir.path()).unwrap().remove(0);
        assert_eq!(scene.frames.len(), 8);
        let heldout = scene.frames.remove(HELD_OUT_FRAME);
        let heldout_image = load_image(&heldout.image_path).unwrap();
        // Context views adjacent to the held-out pose, all from the
        // training frames (original indices 2, 4, 5).
        let eval_contexts = context_views(&scene, &[2, 3, 4]);
        let bounds = scene.bounds().unwrap();

        let config = PipelineConfig {
            geometry: overfit_geometry(),
            denoiser: tiny_denoiser(),
            schedule: ScheduleSpec { t_max: 100, beta_start: 1e-4, beta_end: 0.02 },
            train: TrainConfig {
                context_views_range: (2, 3),
                learning_rate: 1e-2,
                total_steps: OVERFIT_STEPS,
                seed: 5,
                ..TrainConfig::default()
            },
        };

        // Pretrain the denoiser on the seven training views at the latent
        // resolution, then freeze it for the joint phase.
        let train_images: Vec<Image> = scene
            .frames
            .iter()
            .map(|f| {
                target_colors_at_grid(
                    &load_image(&f.image_path).unwrap(),
                    config.denoiser.resolution,
                )
            })
            .collect();
        let prompt = config.train.prompt_template.replace("<class_name>", &scene.class_name);
        let embedding =
            sparseview_core::diffusion::embed_prompt(&prompt, config.denoiser.text_dim);
        let (denoiser, _) = toy_denoiser_train(
            &train_images,
            &embedding,
            config.denoiser.clone(),
            config.schedule.to_schedule().unwrap(),
            &ToyTrainConfig { steps: 1500, learning_rate: 1e-3, seed: 7 },
        )
        .unwrap();

        let mut state = TrainState::new(config, denoiser).unwrap();
        let mut fingerprints = vec![denoiser_fingerprint(&state.denoiser)];
        let scenes = vec![scene];
        while state.step < OVERFIT_STEPS {
            run_training(&mut state, &scenes, 200, |_| {}).unwrap();
            fingerprints.push(denoiser_fingerprint(&state.denoiser));
        }
        let steps_taken = state.step;
        OverfitFixture {
            heldout_image,
            heldout_pose: heldout.pose,
            eval_contexts,
            bounds,
            model: state.into_nvs_model(),
            prompt,
            fingerprints,
            steps_taken,
        }
    })
}

impl OverfitFixture {
    fn heldout_at_latent_grid(&self) -> Image {
        let (_, h, w) = self.model.denoiser.codec.latent_shape();
        target_colors_at_grid(&self.heldout_image, (h, w))
    }

    fn sample(&self, opts: &NvsOptions) -> Image {
        self.model
            .nvs_inference(&self.eval_contexts, &self.heldout_pose, self.bounds, &self.prompt, opts)
            .unwrap()
    }
}

// --------------------------------------------------------------------------
// 01: zero-initialized adapter leaves sampling untouched at any λ.
// --------------------------------------------------------------------------

#[test]
fn acceptance_01_identity_at_init() {
    criterion(1, "identity-at-init across lambda", || {
        let schedule = NoiseSchedule::linear(40, 1e-4, 0.02).unwrap();
        let mut denoiser =
            DenoiserHandle::new_toy(tiny_denoiser(), schedule.clone(), 3).unwrap();
        denoiser.freeze();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut adapter_params = ParamStore::new();
        let adapter = GuidanceAdapter::init(
            &mut adapter_params,
            "adapter",
            &denoiser.model,
            &denoiser.params,
            4,
            &mut rng,
        )
        .unwrap();

        // Arbitrary feature map and start latent: the claim is architectural,
        // so random inputs are the strongest probe.
        let feature_map =
            ArrayD::from_shape_fn(IxDyn(&[4, 8, 8]), |_| rng.sample::<f64, _>(StandardNormal));
        let (c, h, w) = denoiser.codec.latent_shape();
        let x0 = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.sample::<f64, _>(StandardNormal));
        let eps = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.sample::<f64, _>(StandardNormal));
        let steps = 8;
        let grid_top = 40; // t_max itself is always on the grid
        let x_t = perturb(&x0, &schedule, grid_top, &eps).unwrap();
        let initial = LatentState { latent: x_t, timestep: grid_top };
        let condition = sparseview_core::diffusion::embed_prompt("a picture of a chair", 8);

        let unguided =
            ddim_sample(&denoiser, &schedule, &initial, steps, None, &condition).unwrap();
        for lambda in [0.0, 1.0, 2.0, 5.0] {
            let gctx = GuidanceContext {
                adapter: &adapter,
                params: &adapter_params,
                feature_map: feature_map.clone(),
                lambda,
            };
            let guided =
                ddim_sample(&denoiser, &schedule, &initial, steps, Some(&gctx), &condition)
                    .unwrap();
            let diff = max_abs_diff(&guided, &unguided);
            assert!(
                diff < 1e-6,
                "lambda {lambda}: guided sampling deviates by {diff} from unguided at init"
            );
        }
    });
}

// --------------------------------------------------------------------------
// 02: geometry oracles.
// --------------------------------------------------------------------------

#[test]
fn acceptance_02_geometry_oracles() {
    criterion(2, "geometry oracles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);

        // Trilinear sampling against an 8-corner brute force oracle.
        let (c, d, h, w) = (3usize, 4usize, 5usize, 6usize);
        let volume =
            ArrayD::from_shape_fn(IxDyn(&[c, d, h, w]), |_| rng.sample::<f64, _>(StandardNormal));
        let mut g = Graph::new();
        let vol = g.constant(volume.clone());
        let coords: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                // Include out-of-range coordinates to exercise clamping.
                [
                    rng.gen_range(-1.0..d as f64 + 1.0),
                    rng.gen_range(-1.0..h as f64 + 1.0),
                    rng.gen_range(-1.0..w as f64 + 1.0),
                ]
            })
            .collect();
        let valid = vec![true; coords.len()];
        let sampled = g.gather_trilinear(vol, &coords, &valid);
        let sampled = g.value(sampled);
        let corner = |x: f64, n: usize| -> (usize, usize, f64) {
            let x = x.clamp(0.0, (n - 1) as f64);
            let i0 = x.floor() as usize;
            (i0, (i0 + 1).min(n - 1), x - i0 as f64)
        };
        for (i, &[z, y, x]) in coords.iter().enumerate() {
            let (z0, z1, fz) = corner(z, d);
            let (y0, y1, fy) = corner(y, h);
            let (x0, x1, fx) = corner(x, w);
            for ci in 0..c {
                let mut acc = 0.0;
                for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                    for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            acc += wz * wy * wx * volume[[ci, zi, yi, xi]];
                        }
                    }
                }
                let got = sampled[[i, ci]];
                assert!(
                    (got - acc).abs() < 1e-6,
                    "trilinear mismatch at case {i} channel {ci}: {got} vs oracle {acc}"
                );
            }
        }

        // Plücker coordinates do not depend on which origin point names the
        // line, nor on the direction's scale.
        for _ in 0..200 {
            let origin = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let direction = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..1.0),
            );
            let base = plucker(&Ray::new(origin, direction, (0.0, 0.0)).unwrap());
            let shift: f64 = rng.gen_range(-10.0..10.0);
            let scale: f64 = rng.gen_range(0.1..10.0);
            let moved = plucker(
                &Ray::new(origin + direction.normalize() * shift, direction * scale, (0.0, 0.0))
                    .unwrap(),
            );
            assert!((base.direction - moved.direction).norm() < 1e-9, "direction changed");
            assert!((base.moment - moved.moment).norm() < 1e-9, "moment changed");
        }

        // Ray/projection round trip through every fixture camera.
        let fixture = geometry_fixture();
        let (near, far) = fixture.scene.bounds().unwrap();
        for frame in &fixture.scene.frames {
            let pose = &frame.pose;
            let pixels: Vec<(f64, f64)> = (0..25)
                .map(|_| {
                    (
                        rng.gen_range(0.0..pose.image_size.0 as f64),
                        rng.gen_range(0.0..pose.image_size.1 as f64),
                    )
                })
                .collect();
            for ray in cast_rays(pose, &pixels).unwrap() {
                let depth = rng.gen_range(near..far);
                let ((row, col), z) =
                    pose.project(&ray.point_at(depth)).expect("point in front of camera");
                assert!(z > 0.0);
                let err =
                    ((row - ray.pixel.0).powi(2) + (col - ray.pixel.1).powi(2)).sqrt();
                assert!(err < 1e-4, "round trip error {err} px at pixel {:?}", ray.pixel);
            }
        }

        // Point-density weights: rows sum to one over valid points and
        // vanish entirely where no point is valid.
        let views = context_views(&fixture.scene, &[0, 2, 5]);
        let mut g = Graph::new();
        let pt = g.load_params_frozen(&fixture.params);
        let ctx = fixture.model.encode_contexts(&mut g, &pt, &views, (near, far)).unwrap();
        let rendered =
            fixture.model.render(&mut g, &pt, &ctx, &fixture.scene.frames[4].pose).unwrap();
        let weights = g.value(rendered.point_weights);
        let (rays, nviews, npoints) = rendered.point_valid.dim();
        let mut checked_rows = 0usize;
        for r in 0..rays {
            for v in 0..nviews {
                let any_valid = (0..npoints).any(|p| rendered.point_valid[[r, v, p]]);
                let sum: f64 = (0..npoints).map(|p| weights[[r, v, p]]).sum();
                if any_valid {
                    assert!((sum - 1.0).abs() < 1e-5, "weights sum to {sum} at ray {r} view {v}");
                    checked_rows += 1;
                } else {
                    assert_eq!(sum, 0.0, "invalid row must carry zero weight");
                }
            }
        }
        assert!(checked_rows > 0, "fixture produced no valid rays");
    });
}

// --------------------------------------------------------------------------
// 03: the color estimate is a convex combination of sampled context colors.
// --------------------------------------------------------------------------

#[test]
fn acceptance_03_convex_combination_bound() {
    criterion(3, "convex-combination color bound", || {
        let fixture = geometry_fixture();
        let bounds = fixture.scene.bounds().unwrap();
        let views = context_views(&fixture.scene, &[0, 3, 6]);

        // 512 rays: 64 feature cells at each of 8 novel target poses drawn
        // from a ring the context cameras never visit.
        let novel_ring = SyntheticSceneSpec {
            camera_ring: CameraRing { elevation_deg: 37.0, ..two_object_spec().camera_ring },
            ..two_object_spec()
        };
        let targets = novel_ring.camera_poses().unwrap();
        assert!(targets.len() * 64 >= 500, "need at least 500 rays");

        let mut rays_checked = 0usize;
        for target in &targets {
            let mut g = Graph::new();
            let pt = g.load_params_frozen(&fixture.params);
            let ctx = fixture.model.encode_contexts(&mut g, &pt, &views, bounds).unwrap();
            let rendered = fixture.model.render(&mut g, &pt, &ctx, target).unwrap();
            let violation = convex_hull_violation(&rendered, &g);
            assert!(
                violation <= 1e-5,
                "color estimate escapes the sampled-color hull by {violation} at pose {target:?}"
            );
            rays_checked += rendered.point_valid.dim().0;
        }
        assert!(rays_checked >= 500, "only {rays_checked} rays checked");
    });
}

// --------------------------------------------------------------------------
// 04: F and E are invariant to context view order.
// --------------------------------------------------------------------------

#[test]
fn acceptance_04_view_permutation_invariance() {
    criterion(4, "view-permutation invariance", || {
        let fixture = geometry_fixture();
        let bounds = fixture.scene.bounds().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let render_fe = |views: &[(Image, CameraPose)], target: &CameraPose| {
            let mut g = Graph::new();
            let pt = g.load_params_frozen(&fixture.params);
            let ctx = fixture.model.encode_contexts(&mut g, &pt, views, bounds).unwrap();
            let rendered = fixture.model.render(&mut g, &pt, &ctx, target).unwrap();
            (g.value(rendered.feature_map).clone(), g.value(rendered.coarse_image).clone())
        };
        for trial in 0..50 {
            // Three distinct context views and a random target pose.
            let mut picks: Vec<usize> = (0..fixture.scene.frames.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut picks[..], &mut rng);
            let base_indices = &picks[..3];
            let target = &fixture.scene.frames[picks[3]].pose;
            let base_views = context_views(&fixture.scene, base_indices);

            let mut permuted = base_views.clone();
            while {
                rand::seq::SliceRandom::shuffle(&mut permuted[..], &mut rng);
                permuted.iter().zip(&base_views).all(|(a, b)| a.1 == b.1)
            } {}

            let (f_base, e_base) = render_fe(&base_views, target);
            let (f_perm, e_perm) = render_fe(&permuted, target);
            let df = max_abs_diff(&f_base, &f_perm);
            let de = max_abs_diff(&e_base, &e_perm);
            assert!(df < 1e-6, "trial {trial}: feature map F drifts {df} under permutation");
            assert!(de < 1e-6, "trial {trial}: color estimate E drifts {de} under permutation");
        }
    });
}

// --------------------------------------------------------------------------
// 05: analytic gradients of the joint loss match central differences.
// --------------------------------------------------------------------------

#[test]
fn acceptance_05_gradient_check() {
    criterion(5, "joint-loss gradient check", || {
        let schedule = ScheduleSpec { t_max: 40, beta_start: 1e-4, beta_end: 0.02 };
        let config = PipelineConfig {
            geometry: tiny_geometry(),
            denoiser: ToyDenoiserConfig { base_channels: 4, ..tiny_denoiser() },
            schedule: schedule.clone(),
            train: TrainConfig { seed: 11, ..TrainConfig::default() },
        };
        let mut denoiser =
            DenoiserHandle::new_toy(config.denoiser.clone(), schedule.to_schedule().unwrap(), 3)
                .unwrap();
        denoiser.freeze();
        let mut state = TrainState::new(config, denoiser).unwrap();

        // Move the adapter off its zero taps: at init the trunk is invisible
        // to the loss (that is criterion 01), which would make its finite
        // differences vacuous 0 = 0 comparisons.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        randomize_taps(&mut state.adapter_params, &state.adapter, &mut rng);

        let fixture = geometry_fixture();
        let scene = &fixture.scene;
        let item = TrainBatch {
            batch_id: "gradient check".into(),
            class_name: scene.class_name.clone(),
            context: context_views(scene, &[0, 4]),
            target_image: load_image(&scene.frames[2].image_path).unwrap(),
            target_pose: scene.frames[2].pose.clone(),
            depth_range: scene.bounds().unwrap(),
        };
        let (timestep, noise_seed) = (25usize, 99u64);
        let (phi_grads, theta_grads) = state.loss_gradients(&item, timestep, noise_seed).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5005);
        let phi_coords = pick_coordinates(&state.geometry_params, 20, &mut rng);
        let theta_coords = pick_coordinates(&state.adapter_params, 20, &mut rng);

        let h = 1e-5;
        let mut check = |which: &str, coords: Vec<(ParamId, usize)>| {
            for (id, index) in coords {
                let analytic = {
                    let (store, grads) = match which {
                        "phi" => (&state.geometry_params, &phi_grads),
                        _ => (&state.adapter_params, &theta_grads),
                    };
                    let position = store.ids().position(|other| other == id).unwrap();
                    grads[position]
                        .as_ref()
                        .map(|g| g.as_slice().unwrap()[index])
                        .unwrap_or(0.0)
                };
                let mut eval_at = |delta: f64| -> f64 {
                    let store = match which {
                        "phi" => &mut state.geometry_params,
                        _ => &mut state.adapter_params,
                    };
                    let slot = &mut store.value_mut(id).as_slice_mut().unwrap()[index];
                    let original = *slot;
                    *slot = original + delta;
                    let loss = state.eval_loss(&item, timestep, noise_seed).unwrap().total;
                    let store = match which {
                        "phi" => &mut state.geometry_params,
                        _ => &mut state.adapter_params,
                    };
                    store.value_mut(id).as_slice_mut().unwrap()[index] = original;
                    loss
                };
                let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                let rel = relative_error(analytic, numeric);
                assert!(
                    rel < 1e-4,
                    "{which} gradient mismatch at coordinate {index}: analytic {analytic}, \
                     central difference {numeric}, relative error {rel}"
                );
            }
        };
        check("phi", phi_coords);
        check("theta", theta_coords);
    });
}

// --------------------------------------------------------------------------
// 06: diffusion closed forms and sampler determinism.
// --------------------------------------------------------------------------

struct ConstPredictor(ArrayD<f64>);
impl EpsilonPredictor for ConstPredictor {
    fn predict(
        &self,
        _x: &ArrayD<f64>,
        _t: usize,
        _c: &ndarray::Array1<f64>,
        _g: Option<&GuidanceContext<'_>>,
    ) -> sparseview_core::error::Result<ArrayD<f64>> {
        Ok(self.0.clone())
    }
}

#[test]
fn acceptance_06_diffusion_closed_forms() {
    criterion(6, "diffusion closed forms and determinism", || {
        let t_max = 40usize;
        let (beta_start, beta_end) = (1e-4, 0.02);
        let schedule = NoiseSchedule::linear(t_max, beta_start, beta_end).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let shape = IxDyn(&[3, 4, 4]);
        let x0 = ArrayD::from_shape_fn(shape.clone(), |_| rng.sample::<f64, _>(StandardNormal));
        let eps = ArrayD::from_shape_fn(shape.clone(), |_| rng.sample::<f64, _>(StandardNormal));

        // Forward perturbation against an independently accumulated ᾱ_t.
        for t in [1usize, 7, 23, 40] {
            let mut alpha_bar = 1.0;
            for i in 0..t {
                let beta =
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64;
                alpha_bar *= 1.0 - beta;
            }
            let expected = &x0 * alpha_bar.sqrt() + &eps * (1.0 - alpha_bar).sqrt();
            let got = perturb(&x0, &schedule, t, &eps).unwrap();
            let diff = max_abs_diff(&got, &expected);
            assert!(diff < 1e-12, "perturb deviates {diff} from closed form at t = {t}");
        }

        // One-step inversion: denoise one grid step, then rebuild the
        // original latent from x̂0 and the (constant) ε̂ the sampler saw.
        let steps = 8usize;
        let eps_hat =
            ArrayD::from_shape_fn(shape.clone(), |_| rng.sample::<f64, _>(StandardNormal));
        let predictor = ConstPredictor(eps_hat.clone());
        let t = t_max / steps; // grid[1]
        let x_t = perturb(&x0, &schedule, t, &eps).unwrap();
        let initial = LatentState { latent: x_t.clone(), timestep: t };
        let condition = ndarray::Array1::zeros(4);
        let x_prev =
            ddim_sample(&predictor, &schedule, &initial, steps, None, &condition).unwrap();
        let ab_prev = schedule.alpha_bar(0).unwrap();
        let ab_t = schedule.alpha_bar(t).unwrap();
        let x0_hat = (&x_prev - &(&eps_hat * (1.0 - ab_prev).sqrt())) / ab_prev.sqrt();
        let recovered = &x0_hat * ab_t.sqrt() + &eps_hat * (1.0 - ab_t).sqrt();
        let diff = max_abs_diff(&recovered, &x_t);
        assert!(diff < 1e-6, "one-step DDIM inversion misses by {diff}");

        // Bitwise determinism of the full guided pipeline under one seed.
        let mut denoiser = DenoiserHandle::new_toy(tiny_denoiser(), schedule, 3).unwrap();
        denoiser.freeze();
        let config = PipelineConfig {
            geometry: tiny_geometry(),
            denoiser: tiny_denoiser(),
            schedule: ScheduleSpec { t_max, beta_start, beta_end },
            train: TrainConfig::default(),
        };
        let model = TrainState::new(config, denoiser).unwrap().into_nvs_model();
        let fixture = geometry_fixture();
        let views = context_views(&fixture.scene, &[0, 4]);
        let opts = NvsOptions {
            ddim_steps: 8,
            perturb_steps: 8,
            lambda: 2.0,
            random_start: false,
            seed: 99,
        };
        let run = || {
            model
                .nvs_inference(
                    &views,
                    &fixture.scene.frames[2].pose,
                    fixture.scene.bounds().unwrap(),
                    "a picture of ornament",
                    &opts,
                )
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert!(
            a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "repeated sampling under one seed must agree bit for bit"
        );
    });
}

// --------------------------------------------------------------------------
// 07: end-to-end overfit — coarse quality and the value of guidance.
// --------------------------------------------------------------------------

#[test]
fn acceptance_07_toy_overfit() {
    criterion(7, "toy overfit held-out quality and guidance win", || {
        let fixture = overfit_fixture();
        let target = fixture.heldout_at_latent_grid();

        // (a) Coarse estimate quality on the held-out view.
        let coarse = fixture.sample(&NvsOptions {
            ddim_steps: 20,
            perturb_steps: 0,
            lambda: 0.0,
            random_start: false,
            seed: 0,
        });
        let coarse_psnr = psnr_with(&coarse, &target, 1.0, PSNR_CAP_DB).unwrap();
        assert!(
            coarse_psnr > 22.0,
            "held-out coarse estimate reached only {coarse_psnr:.2} dB after {} steps",
            fixture.steps_taken
        );

        // (b) Guidance moves the full sample toward the ground truth. The
        // guided pass runs at the strength the adapter was trained with.
        let guided = fixture.sample(&NvsOptions {
            ddim_steps: 20,
            perturb_steps: 20,
            lambda: 1.0,
            random_start: false,
            seed: 0,
        });
        let unguided = fixture.sample(&NvsOptions {
            ddim_steps: 20,
            perturb_steps: 20,
            lambda: 0.0,
            random_start: false,
            seed: 0,
        });
        let guided_mse = image_mse(&guided, &target);
        let unguided_mse = image_mse(&unguided, &target);
        assert!(
            guided_mse < unguided_mse,
            "guided sample MSE {guided_mse:.6} is not below unguided {unguided_mse:.6}"
        );
    });
}

// --------------------------------------------------------------------------
// 08: perturbing the coarse estimate beats a pure-noise start.
// --------------------------------------------------------------------------

#[test]
fn acceptance_08_noise_perturbation_ablation() {
    criterion(8, "noise perturbation beats random start", || {
        let fixture = overfit_fixture();
        let target = fixture.heldout_at_latent_grid();
        let mut wins = 0usize;
        for seed in 0..5u64 {
            let perturbed = fixture.sample(&NvsOptions {
                ddim_steps: 20,
                perturb_steps: 20,
                lambda: 2.0,
                random_start: false,
                seed,
            });
            let random = fixture.sample(&NvsOptions {
                ddim_steps: 20,
                perturb_steps: 20,
                lambda: 2.0,
                random_start: true,
                seed,
            });
            let mse_perturbed = image_mse(&perturbed, &target);
            let mse_random = image_mse(&random, &target);
            if mse_perturbed < mse_random {
                wins += 1;
            } else {
                println!(
                    "seed {seed}: perturbed start {mse_perturbed:.6} vs random {mse_random:.6}"
                );
            }
        }
        assert_eq!(wins, 5, "perturbed start must win on all 5 seeds, won {wins}");
    });
}

// --------------------------------------------------------------------------
// 09: the denoiser stays frozen through the whole run.
// --------------------------------------------------------------------------

#[test]
fn acceptance_09_frozen_denoiser_audit() {
    criterion(9, "frozen-denoiser fingerprint audit", || {
        let fixture = overfit_fixture();
        assert!(fixture.fingerprints.len() >= 2);
        let first = &fixture.fingerprints[0];
        for (chunk, fp) in fixture.fingerprints.iter().enumerate() {
            assert_eq!(
                fp, first,
                "denoiser fingerprint changed by training chunk {chunk}"
            );
        }
        // And the weights handed to inference are still the same ones.
        assert_eq!(&denoiser_fingerprint(&fixture.model.denoiser), first);
    });
}

// --------------------------------------------------------------------------
// 10: evaluation protocol reproducibility and exact PSNR anchors.
// --------------------------------------------------------------------------

#[test]
fn acceptance_10_protocol_reproducibility() {
    criterion(10, "protocol reproducibility and PSNR anchors", || {
        assert_eq!(psnr_from_mse(0.01, 1.0, PSNR_CAP_DB), 20.0, "MSE 0.01 is exactly 20 dB");
        assert_eq!(psnr_from_mse(1e-4, 1.0, PSNR_CAP_DB), 40.0, "MSE 1e-4 is exactly 40 dB");
        assert_eq!(psnr_from_mse(0.0, 1.0, PSNR_CAP_DB), PSNR_CAP_DB, "zero MSE hits the cap");

        let dir = TempDir::new().unwrap();
        write_synthetic_dataset(&two_object_spec(), dir.path(), "ornament_0").unwrap();
        let mut flipped = two_object_spec();
        flipped.class_name = "bauble".into();
        flipped.primitives[0].albedo = [0.1, 0.5, 0.8];
        write_synthetic_dataset(&flipped, dir.path(), "bauble_0").unwrap();
        let scenes = ingest(dir.path()).unwrap();

        let protocol = sparseview_core::evaluation::EvalProtocol {
            objects_per_category: 1,
            poses_per_object: 4,
            context_count: 2,
            seed: 9,
        };
        let a = run_protocol(&IdentityOracle, &scenes, &protocol).unwrap();
        let b = run_protocol(&IdentityOracle, &scenes, &protocol).unwrap();
        let bytes_a = serde_json::to_vec(&a).unwrap();
        let bytes_b = serde_json::to_vec(&b).unwrap();
        assert_eq!(bytes_a, bytes_b, "same seed must serialize to identical report bytes");
        assert_eq!(a.overall_mean_psnr_db, PSNR_CAP_DB, "identity model scores at the cap");
    });
}
