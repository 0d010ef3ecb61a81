//! Adam with bias correction, plus (de)serialization of optimizer state so
//! training can resume bit-exactly.

use ndarray::{ArrayD, IxDyn};

use crate::store::{ParamStore, StoreError};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state sized to one [`ParamStore`]; `step` must be called with
/// gradients in [`crate::ParamId`] order (missing entries act as zero
/// gradients, so moments still decay for unused parameters).
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        let v = store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Self { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&ArrayD<f64>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        // ids() borrows the store, so snapshot them before mutating values.
        let ids: Vec<_> = store.ids().enumerate().collect();
        for (i, id) in ids {
            let zero;
            let g: &ArrayD<f64> = match grads[i] {
                Some(g) => {
                    assert_eq!(
                        g.shape(),
                        store.value(id).shape(),
                        "gradient shape for \"{}\"",
                        store.name(id)
                    );
                    g
                }
                None => {
                    zero = ArrayD::zeros(store.value(id).raw_dim());
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
            });
            let lr = self.cfg.lr;
            let eps = self.cfg.eps;
            ndarray::Zip::from(store.value_mut(id))
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Serialize moments and step count using the weight-blob format. Names
    /// are derived from the parameter names, so state can only be restored
    /// onto a store with the same registration order.
    pub fn to_blob(&self, store: &ParamStore) -> Vec<u8> {
        let mut s = ParamStore::new();
        s.add("adam.t", ArrayD::from_elem(IxDyn(&[]), self.t as f64));
        for (i, (_, p)) in store.iter().enumerate() {
            s.add(format!("adam.m.{}", p.name), self.m[i].clone());
            s.add(format!("adam.v.{}", p.name), self.v[i].clone());
        }
        s.to_blob()
    }

    pub fn from_blob(cfg: AdamConfig, store: &ParamStore, bytes: &[u8]) -> Result<Self, StoreError> {
        let s = ParamStore::from_blob(bytes)?;
        let t_id = s.id_of("adam.t").ok_or(StoreError::MissingParam {
            name: "adam.t".into(),
        })?;
        let t = s.value(t_id).first().copied().unwrap_or(0.0) as u64;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            for (slot, prefix) in [(&mut m, "adam.m"), (&mut v, "adam.v")] {
                let name = format!("{prefix}.{}", p.name);
                let id = s
                    .id_of(&name)
                    .ok_or_else(|| StoreError::MissingParam { name: name.clone() })?;
                let value = s.value(id);
                if value.shape() != p.value.shape() {
                    return Err(StoreError::ShapeMismatch {
                        name,
                        expected: p.value.shape().to_vec(),
                        found: value.shape().to_vec(),
                    });
                }
                slot.push(value.clone());
            }
        }
        Ok(Self { cfg, m, v, t })
    }
}
