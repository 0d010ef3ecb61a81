//! Elementwise arithmetic, activations, shape manipulation and reductions.
//!
//! Binary ops broadcast right-aligned (numpy rules); the backward pass sums
//! gradient contributions over the broadcast axes so parent gradients always
//! match parent shapes.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

use crate::graph::{Graph, Tensor};

/// Right-aligned broadcast shape of two shapes, or a panic describing the op.
fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "{op}: shapes {a:?} and {b:?} are not broadcastable"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `shape` by reducing the axes that were broadcast.
pub(crate) fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if sd == 1 && gd != 1 {
            g = g
                .sum_axis(Axis(axis))
                .insert_axis(Axis(axis));
        }
    }
    g
}

fn broadcast_apply(
    op: &str,
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let shape = broadcast_shape(op, a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("checked broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("checked broadcast");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Graph {
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = broadcast_apply("add", self.value(a), self.value(b), |x, y| x + y);
        self.op(
            value,
            vec![a, b],
            Box::new(|g, inputs, _| {
                vec![
                    Some(reduce_to_shape(g, inputs[0].shape())),
                    Some(reduce_to_shape(g, inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = broadcast_apply("sub", self.value(a), self.value(b), |x, y| x - y);
        self.op(
            value,
            vec![a, b],
            Box::new(|g, inputs, _| {
                vec![
                    Some(reduce_to_shape(g, inputs[0].shape())),
                    Some(-reduce_to_shape(g, inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = broadcast_apply("mul", self.value(a), self.value(b), |x, y| x * y);
        self.op(
            value,
            vec![a, b],
            Box::new(|g, inputs, _| {
                let ga = broadcast_apply("mul-bwd", g, inputs[1], |gi, y| gi * y);
                let gb = broadcast_apply("mul-bwd", g, inputs[0], |gi, x| gi * x);
                vec![
                    Some(reduce_to_shape(&ga, inputs[0].shape())),
                    Some(reduce_to_shape(&gb, inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let value = self.value(a).mapv(|x| x * c);
        self.op(
            value,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.mapv(|gi| gi * c))]),
        )
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let value = self.value(a).mapv(|x| x + c);
        self.op(value, vec![a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.scale(a, -1.0)
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.op(
            value,
            vec![a],
            Box::new(|g, inputs, _| {
                let d = inputs[0].mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![Some(g * &d)]
            }),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).mapv(gelu_tanh);
        self.op(
            value,
            vec![a],
            Box::new(|g, inputs, _| {
                let d = inputs[0].mapv(gelu_tanh_derivative);
                vec![Some(g * &d)]
            }),
        )
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).mapv(f64::tanh);
        self.op(
            value,
            vec![a],
            Box::new(|g, _, out| vec![Some(g * &out.mapv(|y| 1.0 - y * y))]),
        )
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).mapv(f64::exp);
        self.op(value, vec![a], Box::new(|g, _, out| vec![Some(g * out)]))
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let value = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| {
                panic!(
                    "reshape: cannot view {:?} as {shape:?}",
                    self.value(a).shape()
                )
            });
        self.op(
            value,
            vec![a],
            Box::new(|g, inputs, _| {
                let back = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(inputs[0].shape()))
                    .expect("reshape backward");
                vec![Some(back)]
            }),
        )
    }

    pub fn permute(&mut self, a: Tensor, axes: &[usize]) -> Tensor {
        let value = self
            .value(a)
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.op(
            value,
            vec![a],
            Box::new(move |g, _, _| {
                let back = g
                    .clone()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                vec![Some(back)]
            }),
        )
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let views: Vec<_> = parts.iter().map(|&t| self.value(t).view()).collect();
        let value = concatenate(Axis(axis), &views)
            .expect("concat: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let sizes: Vec<usize> = parts.iter().map(|&t| self.value(t).shape()[axis]).collect();
        self.op(
            value,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &s in &sizes {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + s as isize), 1))
                        .to_owned();
                    out.push(Some(piece));
                    start += s as isize;
                }
                out
            }),
        )
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let full = self.value(a).shape().to_vec();
        assert!(
            start + len <= full[axis],
            "narrow: [{start}, {}) out of bounds for axis {axis} of {full:?}",
            start + len
        );
        let value = self
            .value(a)
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        self.op(
            value,
            vec![a],
            Box::new(move |g, inputs, _| {
                let mut back = ArrayD::zeros(inputs[0].raw_dim());
                back.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(g);
                vec![Some(back)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.op(
            value,
            vec![a],
            Box::new(|g, inputs, _| {
                let gi = g.first().copied().expect("scalar grad");
                vec![Some(ArrayD::from_elem(inputs[0].raw_dim(), gi))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Tensor, axis: usize) -> Tensor {
        let value = self.value(a).sum_axis(Axis(axis));
        self.op(
            value,
            vec![a],
            Box::new(move |g, inputs, _| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let back = expanded
                    .broadcast(inputs[0].raw_dim())
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                vec![Some(back)]
            }),
        )
    }

    pub fn mean_axis(&mut self, a: Tensor, axis: usize) -> Tensor {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two same-shaped tensors (scalar output).
    pub fn mse(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mse: shape mismatch"
        );
        let diff = self.value(a) - self.value(b);
        let n = diff.len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), diff.mapv(|d| d * d).sum() / n);
        self.op(
            value,
            vec![a, b],
            Box::new(move |g, inputs, _| {
                let gi = g.first().copied().expect("scalar grad");
                let d = (inputs[0] - inputs[1]).mapv(|d| 2.0 * d / n * gi);
                vec![Some(d.clone()), Some(-d)]
            }),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.044715;
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_tanh_derivative(x: f64) -> f64 {
    const C: f64 = 0.044715;
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * C * x * x)
}
