//! 2-D convolution (im2col lowering) and spatial resampling ops.

use ndarray::{Array2, ArrayView3, Ix3, Ix4};

use crate::graph::{Graph, Tensor};

/// Unfold `[ci, h, w]` into `[ci*kh*kw, ho*wo]` patches (zero padding).
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f64>::zeros((ci * kh * kw, ho * wo));
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..ho {
                    let sy = (oy * stride + i) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + j) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[(row, oy * wo + ox)] = x[(c, sy as usize, sx as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Fold patch gradients back onto the (padded) input, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((ci, h, w));
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..ho {
                    let sy = (oy * stride + i) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + j) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[(c, sy as usize, sx as usize)] += dcol[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    dx
}

impl Graph {
    /// 2-D convolution: `x [b, ci, h, w]` with `w [co, ci, kh, kw]`, optional
    /// `bias [co]`, square `stride` and zero `pad` on all sides.
    pub fn conv2d(
        &mut self,
        x: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let xv = self.value(x);
        let wv = self.value(weight);
        assert_eq!(xv.ndim(), 4, "conv2d: input must be [b, ci, h, w]");
        assert_eq!(wv.ndim(), 4, "conv2d: weight must be [co, ci, kh, kw]");
        let (b, ci, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, wci, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(ci, wci, "conv2d: channel mismatch ({ci} vs {wci})");
        assert!(stride > 0, "conv2d: stride must be positive");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{pad}"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        if let Some(bt) = bias {
            assert_eq!(self.value(bt).shape(), &[co], "conv2d: bias shape");
        }

        let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-D");
        let wmat = wv
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .expect("contiguous weight");
        let mut out = ndarray::Array4::<f64>::zeros((b, co, ho, wo));
        for bi in 0..b {
            let col = im2col(&x4.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad, ho, wo);
            let o = wmat.dot(&col); // [co, ho*wo]
            out.index_axis_mut(ndarray::Axis(0), bi).assign(
                &o.into_shape_with_order((co, ho, wo)).expect("reshape"),
            );
        }
        if let Some(bt) = bias {
            let bv = self.value(bt).view().into_shape_with_order(co).expect("1-D");
            for bi in 0..b {
                for c in 0..co {
                    out.index_axis_mut(ndarray::Axis(0), bi)
                        .index_axis_mut(ndarray::Axis(0), c)
                        .mapv_inplace(|v| v + bv[c]);
                }
            }
        }

        let parents = match bias {
            Some(bt) => vec![x, weight, bt],
            None => vec![x, weight],
        };
        let has_bias = bias.is_some();
        self.op(
            out.into_dyn(),
            parents,
            Box::new(move |g, inputs, _| {
                let x4 = inputs[0].view().into_dimensionality::<Ix4>().expect("4-D");
                let wmat = inputs[1]
                    .view()
                    .into_shape_with_order((co, ci * kh * kw))
                    .expect("contiguous weight");
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-D");
                let mut dx = ndarray::Array4::<f64>::zeros((b, ci, h, w));
                let mut dwmat = Array2::<f64>::zeros((co, ci * kh * kw));
                for bi in 0..b {
                    let col =
                        im2col(&x4.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad, ho, wo);
                    let gmat = g4
                        .index_axis(ndarray::Axis(0), bi)
                        .into_shape_with_order((co, ho * wo))
                        .expect("contiguous grad");
                    dwmat += &gmat.dot(&col.t());
                    let dcol = wmat.t().dot(&gmat);
                    dx.index_axis_mut(ndarray::Axis(0), bi)
                        .assign(&col2im(&dcol, ci, h, w, kh, kw, stride, pad, ho, wo));
                }
                let dw = dwmat
                    .into_shape_with_order((co, ci, kh, kw))
                    .expect("reshape")
                    .into_dyn();
                let mut grads = vec![Some(dx.into_dyn()), Some(dw)];
                if has_bias {
                    let mut db = ndarray::Array1::<f64>::zeros(co);
                    for bi in 0..b {
                        for c in 0..co {
                            db[c] += g4
                                .index_axis(ndarray::Axis(0), bi)
                                .index_axis(ndarray::Axis(0), c)
                                .sum();
                        }
                    }
                    grads.push(Some(db.into_dyn()));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[b, c, h, w]`.
    pub fn upsample_nearest_2x(&mut self, x: Tensor) -> Tensor {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "upsample_nearest_2x: input must be 4-D");
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-D");
        let mut out = ndarray::Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[(bi, ci, y, xx)] = x4[(bi, ci, y / 2, xx / 2)];
                    }
                }
            }
        }
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-D");
                let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(bi, ci, y / 2, xx / 2)] += g4[(bi, ci, y, xx)];
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Bilinear upsampling of `[c, h, w]` to `(out_h, out_w)` with corner
    /// pixels aligned (`align_corners = true`): output corner samples map
    /// exactly onto input corner samples.
    pub fn upsample_bilinear(&mut self, x: Tensor, out_h: usize, out_w: usize) -> Tensor {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "upsample_bilinear: input must be [c, h, w]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "upsample_bilinear: empty input");
        let ys = axis_taps(h, out_h);
        let xs = axis_taps(w, out_w);
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("3-D");
        let mut out = ndarray::Array3::<f64>::zeros((c, out_h, out_w));
        for ci in 0..c {
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    out[(ci, oy, ox)] = (1.0 - wy) * (1.0 - wx) * x3[(ci, y0, x0)]
                        + (1.0 - wy) * wx * x3[(ci, y0, x1)]
                        + wy * (1.0 - wx) * x3[(ci, y1, x0)]
                        + wy * wx * x3[(ci, y1, x1)];
                }
            }
        }
        let ys_b = ys.clone();
        let xs_b = xs.clone();
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-D");
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for (oy, &(y0, y1, wy)) in ys_b.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs_b.iter().enumerate() {
                            let gi = g3[(ci, oy, ox)];
                            dx[(ci, y0, x0)] += (1.0 - wy) * (1.0 - wx) * gi;
                            dx[(ci, y0, x1)] += (1.0 - wy) * wx * gi;
                            dx[(ci, y1, x0)] += wy * (1.0 - wx) * gi;
                            dx[(ci, y1, x1)] += wy * wx * gi;
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}

/// Source taps `(i0, i1, weight_towards_i1)` for resizing `n -> out_n` with
/// corners aligned.
fn axis_taps(n: usize, out_n: usize) -> Vec<(usize, usize, f64)> {
    (0..out_n)
        .map(|o| {
            if out_n == 1 || n == 1 {
                return (0, 0, 0.0);
            }
            let s = o as f64 * (n - 1) as f64 / (out_n - 1) as f64;
            let i0 = s.floor() as usize;
            let i0 = i0.min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}
