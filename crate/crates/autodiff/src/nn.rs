//! Layers: thin structs that own [`ParamId`]s and know how to apply
//! themselves to a [`Graph`]. Construction registers parameters in a
//! [`ParamStore`]; `forward` reads them back through [`ParamTensors`], so a
//! model can run against trainable or frozen parameter sets alike.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Tensor};
use crate::store::{ParamId, ParamStore, ParamTensors};

/// Weight initializers. All draw from the caller's RNG so model construction
/// is reproducible from a seed.
pub mod init {
    use super::*;

    pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
        let dist = Normal::new(0.0, std).expect("std must be finite");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
    }

    /// Glorot/Xavier scaling for dense layers.
    pub fn xavier(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
        normal(rng, shape, (2.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// He/Kaiming scaling for layers followed by a rectifying nonlinearity.
    pub fn kaiming(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
        normal(rng, shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::ones(IxDyn(shape))
    }
}

/// Dense layer, weight layout `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init::xavier(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), init::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    /// Apply to `[..., in_dim]`, producing `[..., out_dim]`.
    pub fn forward(&self, g: &mut Graph, pt: &ParamTensors, x: Tensor) -> Tensor {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(
            *shape.last().expect("linear input needs an axis"),
            self.in_dim,
            "linear: input trailing dim"
        );
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.in_dim]);
        let mut y = g.matmul(flat, pt.t(self.w));
        if let Some(b) = self.b {
            y = g.add(y, pt.t(b));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), init::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), init::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, pt: &ParamTensors, x: Tensor) -> Tensor {
        g.layer_norm(x, pt.t(self.gamma), pt.t(self.beta), self.eps)
    }
}

/// Multi-head self-attention over `[batch, tokens, width]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(width.is_multiple_of(heads), "attention width {width} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
            heads,
            width,
        }
    }

    /// `key_mask[b, t] == false` removes token `t` of batch row `b` from
    /// every token's attention targets (its weight is exactly zero).
    pub fn forward(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        x: Tensor,
        key_mask: Option<&ndarray::Array2<bool>>,
    ) -> Tensor {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3, "attention input must be [batch, tokens, width]");
        let (b, t, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(w, self.width, "attention width");
        let h = self.heads;
        let dh = w / h;

        let qkv = self.qkv.forward(g, pt, x); // [b, t, 3w]
        let split = |g: &mut Graph, which: usize| -> Tensor {
            let part = g.narrow(qkv, 2, which * w, w); // [b, t, w]
            let part = g.reshape(part, &[b, t, h, dh]);
            let part = g.permute(part, &[0, 2, 1, 3]); // [b, h, t, dh]
            g.reshape(part, &[b * h, t, dh])
        };
        let q = split(g, 0);
        let k = split(g, 1);
        let v = split(g, 2);

        let kt = g.permute(k, &[0, 2, 1]); // [b*h, dh, t]
        let scores = g.batched_matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt()); // [b*h, t, t]

        let mask_full = key_mask.map(|m| {
            assert_eq!(m.shape(), &[b, t], "key mask must be [batch, tokens]");
            let mut full = ndarray::Array3::<bool>::from_elem((b * h, t, t), false);
            for bi in 0..b {
                for hi in 0..h {
                    for qi in 0..t {
                        for ki in 0..t {
                            full[(bi * h + hi, qi, ki)] = m[(bi, ki)];
                        }
                    }
                }
            }
            full.into_dyn()
        });
        let attn = g.softmax_masked(scores, mask_full.as_ref());

        let ctx = g.batched_matmul(attn, v); // [b*h, t, dh]
        let ctx = g.reshape(ctx, &[b, h, t, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, t, w]);
        self.out.forward(g, pt, ctx)
    }
}

/// Pre-norm transformer encoder block with a GELU MLP.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), width, width * mlp_ratio, true, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), width * mlp_ratio, width, true, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        pt: &ParamTensors,
        x: Tensor,
        key_mask: Option<&ndarray::Array2<bool>>,
    ) -> Tensor {
        let n1 = self.norm1.forward(g, pt, x);
        let a = self.attn.forward(g, pt, n1, key_mask);
        let x = g.add(x, a);
        let n2 = self.norm2.forward(g, pt, x);
        let m = self.mlp_in.forward(g, pt, n2);
        let m = g.gelu(m);
        let m = self.mlp_out.forward(g, pt, m);
        g.add(x, m)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            init::kaiming(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), init::zeros(&[out_ch])));
        Self { w, b, stride, pad }
    }

    /// 1x1 convolution whose weights and bias start at exactly zero.
    pub fn new_zero_1x1(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let w = store.add(format!("{name}.w"), init::zeros(&[out_ch, in_ch, 1, 1]));
        let b = store.add(format!("{name}.b"), init::zeros(&[out_ch]));
        Self { w, b: Some(b), stride: 1, pad: 0 }
    }

    pub fn forward(&self, g: &mut Graph, pt: &ParamTensors, x: Tensor) -> Tensor {
        g.conv2d(x, pt.t(self.w), self.b.map(|b| pt.t(b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "group_norm: {channels} channels, {groups} groups");
        Self {
            gamma: store.add(format!("{name}.gamma"), init::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), init::zeros(&[channels])),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, pt: &ParamTensors, x: Tensor) -> Tensor {
        g.group_norm(x, self.groups, pt.t(self.gamma), pt.t(self.beta), self.eps)
    }
}
