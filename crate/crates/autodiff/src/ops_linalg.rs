//! Matrix products. 2-D products lower onto ndarray's `dot` (which calls a
//! tuned dgemm); batched products loop over the leading axis.

use ndarray::{ArrayD, Ix2, Ix3, IxDyn};

use crate::graph::{Graph, Tensor};

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

fn as3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality::<Ix3>().expect("3-D tensor")
}

impl Graph {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 2, "matmul: lhs must be 2-D, got {:?}", av.shape());
        assert_eq!(bv.ndim(), 2, "matmul: rhs must be 2-D, got {:?}", bv.shape());
        assert_eq!(
            av.shape()[1],
            bv.shape()[0],
            "matmul: inner dims differ ({:?} x {:?})",
            av.shape(),
            bv.shape()
        );
        let value = as2(av).dot(&as2(bv)).into_dyn();
        self.op(
            value,
            vec![a, b],
            Box::new(|g, inputs, _| {
                let g2 = as2(g);
                let da = g2.dot(&as2(inputs[1]).t()).into_dyn();
                let db = as2(inputs[0]).t().dot(&g2).into_dyn();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// `[bsz, m, k] x [bsz, k, n] -> [bsz, m, n]`.
    pub fn batched_matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 3, "batched_matmul: lhs must be 3-D");
        assert_eq!(bv.ndim(), 3, "batched_matmul: rhs must be 3-D");
        let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[2];
        assert_eq!(
            (bv.shape()[0], bv.shape()[1]),
            (bsz, k),
            "batched_matmul: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let a3 = as3(av);
        let b3 = as3(bv);
        let mut value = ArrayD::zeros(IxDyn(&[bsz, m, n]));
        {
            let mut v3 = value.view_mut().into_dimensionality::<Ix3>().expect("3-D");
            for i in 0..bsz {
                v3.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&a3.index_axis(ndarray::Axis(0), i).dot(&b3.index_axis(ndarray::Axis(0), i)));
            }
        }
        self.op(
            value,
            vec![a, b],
            Box::new(move |g, inputs, _| {
                let g3 = as3(g);
                let a3 = as3(inputs[0]);
                let b3 = as3(inputs[1]);
                let mut da = ArrayD::zeros(inputs[0].raw_dim());
                let mut db = ArrayD::zeros(inputs[1].raw_dim());
                {
                    let mut da3 = da.view_mut().into_dimensionality::<Ix3>().expect("3-D");
                    let mut db3 = db.view_mut().into_dimensionality::<Ix3>().expect("3-D");
                    for i in 0..bsz {
                        let gi = g3.index_axis(ndarray::Axis(0), i);
                        da3.index_axis_mut(ndarray::Axis(0), i)
                            .assign(&gi.dot(&b3.index_axis(ndarray::Axis(0), i).t()));
                        db3.index_axis_mut(ndarray::Axis(0), i)
                            .assign(&a3.index_axis(ndarray::Axis(0), i).t().dot(&gi));
                    }
                }
                vec![Some(da), Some(db)]
            }),
        )
    }
}
