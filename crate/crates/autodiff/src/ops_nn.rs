//! Softmax, layer norm and group norm.

use ndarray::{ArrayD, Ix4};

use crate::graph::{Graph, Tensor};

/// Rowwise softmax over the last axis of `x`, with `mask` entries of `false`
/// forced to an output of exactly zero (their logits are never exponentiated,
/// so `-inf`/`NaN` logits in masked slots cannot leak through). A row with no
/// valid entry yields all zeros rather than NaN.
fn masked_softmax_value(x: &ArrayD<f64>, mask: Option<&ArrayD<bool>>) -> ArrayD<f64> {
    let n = *x.shape().last().expect("softmax input must have at least 1 axis");
    let rows = x.len() / n.max(1);
    let x2 = x
        .view()
        .into_shape_with_order((rows, n))
        .expect("contiguous softmax input");
    let mask2 = mask.map(|m| {
        m.view()
            .into_shape_with_order((rows, n))
            .expect("mask shape must match logits")
    });
    let mut out = ndarray::Array2::<f64>::zeros((rows, n));
    for r in 0..rows {
        let valid = |i: usize| mask2.as_ref().is_none_or(|m| m[(r, i)]);
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            if valid(i) {
                max = max.max(x2[(r, i)]);
            }
        }
        if !max.is_finite() {
            continue; // fully masked row stays zero
        }
        let mut sum = 0.0;
        for i in 0..n {
            if valid(i) {
                let e = (x2[(r, i)] - max).exp();
                out[(r, i)] = e;
                sum += e;
            }
        }
        if sum > 0.0 {
            for i in 0..n {
                out[(r, i)] /= sum;
            }
        }
    }
    out.into_shape_with_order(x.raw_dim()).expect("same size").into_dyn()
}

impl Graph {
    /// Softmax over the last axis. `mask` (if given) must broadcast to the
    /// input shape; `false` slots produce output weight exactly `0.0`.
    pub fn softmax_masked(&mut self, x: Tensor, mask: Option<&ArrayD<bool>>) -> Tensor {
        let xv = self.value(x);
        let mask_full: Option<ArrayD<bool>> = mask.map(|m| {
            m.broadcast(xv.raw_dim())
                .unwrap_or_else(|| {
                    panic!(
                        "softmax mask {:?} does not broadcast to logits {:?}",
                        m.shape(),
                        xv.shape()
                    )
                })
                .to_owned()
        });
        let value = masked_softmax_value(xv, mask_full.as_ref());
        self.op(
            value,
            vec![x],
            Box::new(move |g, _, y| {
                // dx_i = y_i * (g_i - sum_j g_j y_j), rowwise.
                let n = *y.shape().last().expect("softmax shape");
                let rows = y.len() / n.max(1);
                let y2 = y.view().into_shape_with_order((rows, n)).expect("contiguous");
                let g2 = g.view().into_shape_with_order((rows, n)).expect("contiguous");
                let mut dx = ndarray::Array2::<f64>::zeros((rows, n));
                for r in 0..rows {
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += g2[(r, i)] * y2[(r, i)];
                    }
                    for i in 0..n {
                        dx[(r, i)] = y2[(r, i)] * (g2[(r, i)] - dot);
                    }
                }
                vec![Some(
                    dx.into_shape_with_order(y.raw_dim()).expect("same size").into_dyn(),
                )]
            }),
        )
    }

    pub fn softmax(&mut self, x: Tensor) -> Tensor {
        self.softmax_masked(x, None)
    }

    /// Layer normalization over the last axis with learned affine.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Tensor {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("layer_norm input needs an axis");
        assert_eq!(self.value(gamma).shape(), &[d], "layer_norm: gamma shape");
        assert_eq!(self.value(beta).shape(), &[d], "layer_norm: beta shape");
        let rows = xv.len() / d;
        let x2 = xv.view().into_shape_with_order((rows, d)).expect("contiguous");
        let gv = self.value(gamma).view().into_shape_with_order(d).expect("1-D");
        let bv = self.value(beta).view().into_shape_with_order(d).expect("1-D");

        let mut out = ndarray::Array2::<f64>::zeros((rows, d));
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.mean().expect("non-empty row");
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().expect("non-empty");
            let istd = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                out[(r, i)] = (row[i] - mean) * istd * gv[i] + bv[i];
            }
        }
        let value = out.into_shape_with_order(xv.raw_dim()).expect("same size").into_dyn();
        self.op(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, inputs, _| {
                let xv = inputs[0];
                let gv = inputs[1].view().into_shape_with_order(d).expect("1-D");
                let x2 = xv.view().into_shape_with_order((rows, d)).expect("contiguous");
                let g2 = g.view().into_shape_with_order((rows, d)).expect("contiguous");
                let mut dx = ndarray::Array2::<f64>::zeros((rows, d));
                let mut dgamma = ndarray::Array1::<f64>::zeros(d);
                let mut dbeta = ndarray::Array1::<f64>::zeros(d);
                for r in 0..rows {
                    let row = x2.row(r);
                    let mean = row.mean().expect("non-empty");
                    let var = row.mapv(|v| (v - mean) * (v - mean)).mean().expect("non-empty");
                    let istd = 1.0 / (var + eps).sqrt();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (row[i] - mean) * istd;
                        let dxhat = g2[(r, i)] * gv[i];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgamma[i] += g2[(r, i)] * xhat;
                        dbeta[i] += g2[(r, i)];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for i in 0..d {
                        let xhat = (row[i] - mean) * istd;
                        let dxhat = g2[(r, i)] * gv[i];
                        dx[(r, i)] = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                vec![
                    Some(dx.into_shape_with_order(xv.raw_dim()).expect("same size").into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }

    /// Group normalization over `[batch, channels, h, w]` with learned
    /// per-channel affine. `channels` must divide evenly into `groups`.
    pub fn group_norm(
        &mut self,
        x: Tensor,
        groups: usize,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    ) -> Tensor {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "group_norm expects [b, c, h, w]");
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        assert_eq!(self.value(gamma).shape(), &[c], "group_norm: gamma shape");
        assert_eq!(self.value(beta).shape(), &[c], "group_norm: beta shape");
        let cg = c / groups;

        let stats = move |x4: &ndarray::ArrayView4<f64>, bi: usize, gi: usize| -> (f64, f64) {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ci in gi * cg..(gi + 1) * cg {
                for yi in 0..h {
                    for xi in 0..w {
                        let v = x4[(bi, ci, yi, xi)];
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let n = (cg * h * w) as f64;
            let mean = sum / n;
            (mean, sq / n - mean * mean)
        };

        let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-D");
        let gv = self.value(gamma).view().into_shape_with_order(c).expect("1-D");
        let bv = self.value(beta).view().into_shape_with_order(c).expect("1-D");
        let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for gi in 0..groups {
                let (mean, var) = stats(&x4, bi, gi);
                let istd = 1.0 / (var + eps).sqrt();
                for ci in gi * cg..(gi + 1) * cg {
                    for yi in 0..h {
                        for xi in 0..w {
                            out[(bi, ci, yi, xi)] =
                                (x4[(bi, ci, yi, xi)] - mean) * istd * gv[ci] + bv[ci];
                        }
                    }
                }
            }
        }
        let value = out.into_dyn();
        self.op(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, inputs, _| {
                let x4 = inputs[0].view().into_dimensionality::<Ix4>().expect("4-D");
                let gv = inputs[1].view().into_shape_with_order(c).expect("1-D");
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-D");
                let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                let mut dgamma = ndarray::Array1::<f64>::zeros(c);
                let mut dbeta = ndarray::Array1::<f64>::zeros(c);
                let n = (cg * h * w) as f64;
                for bi in 0..b {
                    for gi in 0..groups {
                        let (mean, var) = stats(&x4, bi, gi);
                        let istd = 1.0 / (var + eps).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for ci in gi * cg..(gi + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let xhat = (x4[(bi, ci, yi, xi)] - mean) * istd;
                                    let dxhat = g4[(bi, ci, yi, xi)] * gv[ci];
                                    mean_dxhat += dxhat;
                                    mean_dxhat_xhat += dxhat * xhat;
                                    dgamma[ci] += g4[(bi, ci, yi, xi)] * xhat;
                                    dbeta[ci] += g4[(bi, ci, yi, xi)];
                                }
                            }
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        for ci in gi * cg..(gi + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let xhat = (x4[(bi, ci, yi, xi)] - mean) * istd;
                                    let dxhat = g4[(bi, ci, yi, xi)] * gv[ci];
                                    dx[(bi, ci, yi, xi)] =
                                        istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }
}
