//! Trilinear point sampling from a dense volume.

use ndarray::Ix4;

use crate::graph::{Graph, Tensor};

/// Per-point interpolation stencil: low/high corner indices on each axis
/// plus the fractional offsets.
type CornerTap = ([usize; 2], [usize; 2], [usize; 2], [f64; 3]);

/// Corner indices and fractional offset for one coordinate, clamped to the
/// valid index range `[0, n-1]`.
fn corner(c: f64, n: usize) -> (usize, usize, f64) {
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

impl Graph {
    /// Sample `coords.len()` points from `volume [c, d, h, w]` by trilinear
    /// interpolation, producing `[n, c]`. Coordinates are `(z, y, x)` in
    /// fractional index units (`z` along the depth axis `d`); they are
    /// clamped into range. Points with `valid[i] == false` yield an all-zero
    /// feature row and receive no interpolation at all.
    ///
    /// Gradients flow to the volume only; coordinates are treated as fixed
    /// geometry.
    pub fn gather_trilinear(
        &mut self,
        volume: Tensor,
        coords: &[[f64; 3]],
        valid: &[bool],
    ) -> Tensor {
        let vv = self.value(volume);
        assert_eq!(vv.ndim(), 4, "gather_trilinear: volume must be [c, d, h, w]");
        assert_eq!(
            coords.len(),
            valid.len(),
            "gather_trilinear: coords and valid length differ"
        );
        let (c, d, h, w) = (vv.shape()[0], vv.shape()[1], vv.shape()[2], vv.shape()[3]);
        assert!(d > 0 && h > 0 && w > 0, "gather_trilinear: empty volume");
        let n = coords.len();

        // Resolve the 8 corner taps once; forward and backward share them.
        let taps: Vec<Option<CornerTap>> = coords
            .iter()
            .zip(valid)
            .map(|(&[z, y, x], &ok)| {
                if !ok {
                    return None;
                }
                let (z0, z1, fz) = corner(z, d);
                let (y0, y1, fy) = corner(y, h);
                let (x0, x1, fx) = corner(x, w);
                Some(([z0, z1], [y0, y1], [x0, x1], [fz, fy, fx]))
            })
            .collect();

        let v4 = vv.view().into_dimensionality::<Ix4>().expect("4-D");
        let mut out = ndarray::Array2::<f64>::zeros((n, c));
        for (i, tap) in taps.iter().enumerate() {
            let Some((zi, yi, xi, f)) = tap else { continue };
            let [fz, fy, fx] = *f;
            for ci in 0..c {
                let mut acc = 0.0;
                for (kz, wz) in [(zi[0], 1.0 - fz), (zi[1], fz)] {
                    for (ky, wy) in [(yi[0], 1.0 - fy), (yi[1], fy)] {
                        for (kx, wx) in [(xi[0], 1.0 - fx), (xi[1], fx)] {
                            acc += wz * wy * wx * v4[(ci, kz, ky, kx)];
                        }
                    }
                }
                out[(i, ci)] = acc;
            }
        }

        self.op(
            out.into_dyn(),
            vec![volume],
            Box::new(move |g, inputs, _| {
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("2-D grad");
                let mut dv = ndarray::Array4::<f64>::zeros((c, d, h, w));
                let _ = inputs;
                for (i, tap) in taps.iter().enumerate() {
                    let Some((zi, yi, xi, f)) = tap else { continue };
                    let [fz, fy, fx] = *f;
                    for ci in 0..c {
                        let gi = g2[(i, ci)];
                        for (kz, wz) in [(zi[0], 1.0 - fz), (zi[1], fz)] {
                            for (ky, wy) in [(yi[0], 1.0 - fy), (yi[1], fy)] {
                                for (kx, wx) in [(xi[0], 1.0 - fx), (xi[1], fx)] {
                                    dv[(ci, kz, ky, kx)] += wz * wy * wx * gi;
                                }
                            }
                        }
                    }
                }
                vec![Some(dv.into_dyn())]
            }),
        )
    }
}
