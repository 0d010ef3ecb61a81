//! Finite-difference oracles for gradient verification. These never touch
//! the tape: they probe a black-box loss function by perturbing stored
//! parameter values, which is exactly what makes them an independent check
//! of the analytic backward pass.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::store::{ParamId, ParamStore};

/// Central difference `(f(x+h) - f(x-h)) / 2h` w.r.t. one scalar coordinate
/// of one parameter. The parameter is restored afterwards.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let original = read(store, id, index);
    write(store, id, index, original + h);
    let plus = loss(store);
    write(store, id, index, original - h);
    let minus = loss(store);
    write(store, id, index, original);
    (plus - minus) / (2.0 * h)
}

/// Symmetric relative error with an absolute floor: coordinates whose
/// analytic and numeric derivatives are both tiny compare as equal instead
/// of amplifying round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Pick `k` scalar coordinates spread across the parameters of a store:
/// parameters are cycled in shuffled order so no single large tensor
/// dominates the sample.
pub fn pick_coordinates(store: &ParamStore, k: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let mut ids: Vec<ParamId> = store.ids().filter(|&id| !store.value(id).is_empty()).collect();
    ids.shuffle(rng);
    assert!(!ids.is_empty(), "cannot pick coordinates from an empty store");
    (0..k)
        .map(|i| {
            let id = ids[i % ids.len()];
            let index = rng.gen_range(0..store.value(id).len());
            (id, index)
        })
        .collect()
}

fn read(store: &ParamStore, id: ParamId, index: usize) -> f64 {
    *store
        .value(id)
        .as_slice()
        .expect("parameters are stored contiguously")
        .get(index)
        .unwrap_or_else(|| panic!("coordinate {index} out of range for \"{}\"", store.name(id)))
}

fn write(store: &mut ParamStore, id: ParamId, index: usize, value: f64) {
    store
        .value_mut(id)
        .as_slice_mut()
        .expect("parameters are stored contiguously")[index] = value;
}
