//! Value-level oracles: each op is compared against an independent
//! straight-line implementation or a closed-form expectation, plus property
//! tests for the invariants downstream code leans on.

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseview_autodiff::{Graph, ParamStore};

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_array(&mut rng, &[4, 6]);
    let b = rand_array(&mut rng, &[6, 3]);
    let mut g = Graph::new();
    let (ta, tb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(ta, tb);
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..6 {
                acc += a[[i, k]] * b[[k, j]];
            }
            assert!((g.value(out)[[i, j]] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_array(&mut rng, &[2, 3, 6, 5]);
    let w = rand_array(&mut rng, &[4, 3, 3, 3]);
    let bias = rand_array(&mut rng, &[4]);
    for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
        let mut g = Graph::new();
        let (tx, tw, tb) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(bias.clone()),
        );
        let out = g.conv2d(tx, tw, Some(tb), stride, pad);
        let (h, wd) = (6usize, 5usize);
        let ho = (h + 2 * pad - 3) / stride + 1;
        let wo = (wd + 2 * pad - 3) / stride + 1;
        assert_eq!(g.value(out).shape(), &[2, 4, ho, wo]);
        for b in 0..2 {
            for co in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[[co]];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = (oy * stride + ky) as isize - pad as isize;
                                    let sx = (ox * stride + kx) as isize - pad as isize;
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x[[b, ci, sy as usize, sx as usize]]
                                        * w[[co, ci, ky, kx]];
                                }
                            }
                        }
                        let got = g.value(out)[[b, co, oy, ox]];
                        assert!(
                            (got - acc).abs() < 1e-12,
                            "conv2d mismatch at ({b},{co},{oy},{ox}): {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn bilinear_upsample_aligns_corners_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_array(&mut rng, &[3, 4, 5]);
    let mut g = Graph::new();
    let tx = g.constant(x.clone());
    let out = g.upsample_bilinear(tx, 9, 11);
    let o = g.value(out);
    for c in 0..3 {
        assert_eq!(o[[c, 0, 0]], x[[c, 0, 0]]);
        assert_eq!(o[[c, 0, 10]], x[[c, 0, 4]]);
        assert_eq!(o[[c, 8, 0]], x[[c, 3, 0]]);
        assert_eq!(o[[c, 8, 10]], x[[c, 3, 4]]);
    }
}

#[test]
fn trilinear_gather_hits_exact_voxels_and_cell_centers() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vol = rand_array(&mut rng, &[2, 3, 3, 3]);
    let mut g = Graph::new();
    let tv = g.constant(vol.clone());
    let coords = vec![
        [1.0, 2.0, 0.0], // exactly on a voxel
        [0.5, 0.5, 0.5], // center of the first cell
        [9.0, 9.0, 9.0], // clamps to the far corner
    ];
    let out = g.gather_trilinear(tv, &coords, &[true, true, false]);
    let o = g.value(out);
    for c in 0..2 {
        assert!((o[[0, c]] - vol[[c, 1, 2, 0]]).abs() < 1e-12);
        let mut avg = 0.0;
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    avg += vol[[c, z, y, x]];
                }
            }
        }
        avg /= 8.0;
        assert!((o[[1, c]] - avg).abs() < 1e-12);
        assert_eq!(o[[2, c]], 0.0, "invalid points must produce exact zeros");
    }
}

#[test]
fn masked_softmax_zeroes_invalid_and_renormalizes() {
    let mut g = Graph::new();
    let logits = g.constant(ndarray::arr2(&[[1.0, 2.0, 3.0], [5.0, -1.0, 0.5]]).into_dyn());
    let mask = ndarray::arr2(&[[true, false, true], [false, false, false]]).into_dyn();
    let out = g.softmax_masked(logits, Some(&mask));
    let o = g.value(out);
    assert_eq!(o[[0, 1]], 0.0);
    assert!((o[[0, 0]] + o[[0, 2]] - 1.0).abs() < 1e-12);
    // With logit gap 2, the valid pair splits as sigmoid(±2).
    assert!((o[[0, 2]] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    for j in 0..3 {
        assert_eq!(o[[1, j]], 0.0, "fully masked row must be all zeros");
    }
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient_sign() {
    use sparseview_autodiff::{Adam, AdamConfig};
    let mut store = ParamStore::new();
    let id = store.add("p", ndarray::arr1(&[1.0, -2.0, 0.0]).into_dyn());
    let grad = ndarray::arr1(&[0.3, -0.7, 0.0]).into_dyn();
    let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, &store);
    adam.step(&mut store, &[Some(&grad)]);
    let p = store.value(id);
    // Bias-corrected first step is lr * g / (|g| + eps') ~= lr * sign(g).
    assert!((p[[0]] - (1.0 - 0.01)).abs() < 1e-6);
    assert!((p[[1]] - (-2.0 + 0.01)).abs() < 1e-6);
    assert_eq!(p[[2]], 0.0, "zero gradient leaves the weight untouched");
}

#[test]
fn adam_state_roundtrips_through_blob() {
    use sparseview_autodiff::{Adam, AdamConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    store.add("a", rand_array(&mut rng, &[3, 2]));
    store.add("b", rand_array(&mut rng, &[4]));
    let mut adam = Adam::new(AdamConfig::default(), &store);
    for step in 0..3 {
        let ga = rand_array(&mut rng, &[3, 2]);
        let gb = rand_array(&mut rng, &[4]);
        adam.step(&mut store, &[Some(&ga), Some(&gb)]);
        let _ = step;
    }
    let blob = adam.to_blob(&store);
    let restored = Adam::from_blob(AdamConfig::default(), &store, &blob).expect("restore");
    assert_eq!(restored.steps_taken(), 3);
    assert_eq!(restored.to_blob(&store), blob);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in 0u64..1000,
        mask_bits in 0u32..128,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[rows, cols]), || rng.gen_range(-30.0..30.0));
        let mask = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |ix| {
            (mask_bits >> ((ix[0] * cols + ix[1]) % 32)) & 1 == 1
        });
        let mut g = Graph::new();
        let tx = g.constant(x);
        let out = g.softmax_masked(tx, Some(&mask));
        let o = g.value(out);
        for r in 0..rows {
            let mut sum = 0.0;
            let mut any_valid = false;
            for c in 0..cols {
                let v = o[[r, c]];
                prop_assert!((0.0..=1.0).contains(&v));
                if mask[[r, c]] {
                    any_valid = true;
                } else {
                    prop_assert_eq!(v, 0.0);
                }
                sum += v;
            }
            if any_valid {
                prop_assert!((sum - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn blob_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = ParamStore::from_blob(&bytes);
    }

    #[test]
    fn blob_roundtrip_is_identity(
        n in 0usize..4,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for i in 0..n {
            let ndim = rng.gen_range(0..4);
            let shape: Vec<usize> = (0..ndim).map(|_| rng.gen_range(0..4)).collect();
            store.add(format!("p{i}"), rand_array(&mut rng, &shape));
        }
        let blob = store.to_blob();
        let back = ParamStore::from_blob(&blob).expect("valid blob");
        prop_assert_eq!(back.to_blob(), blob);
    }
}
