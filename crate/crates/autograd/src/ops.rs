//! Differentiable operations on [`Var`].
//!
//! Every method records one node on the tape. Backward closures capture
//! `Arc` clones of whatever forward values they need, never tape handles.

use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis, Ix2, Ix3, IxDyn, Zip};

use crate::conv;
use crate::{Arr, Var};

/// Sums `g` down to `shape` by collapsing axes where `shape` has extent 1.
/// Inverse of broadcasting; ranks must match.
fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    assert_eq!(g.ndim(), shape.len());
    let mut out = g.to_owned();
    for (ax, &want) in shape.iter().enumerate() {
        if want == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

/// Derivative of the tanh-approximated GELU.
fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU, applied elementwise.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl<'t> Var<'t> {
    // ---- elementwise arithmetic -------------------------------------------

    /// Elementwise sum; shapes must match exactly.
    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = &*a + &*b;
        self.binary(rhs, out, |g| vec![g.clone(), g.clone()])
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = &*a - &*b;
        self.binary(rhs, out, |g| vec![g.clone(), g.mapv(|v| -v)])
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = &*a * &*b;
        self.binary(rhs, out, move |g| vec![g * &*b, g * &*a])
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(self, k: f64) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(|v| v * k);
        self.unary(out, move |g| vec![g.mapv(|v| v * k)])
    }

    /// `self + rhs` where `rhs` broadcasts against `self`: equal rank, and
    /// every axis of `rhs` either matches or has extent 1.
    pub fn add_bcast(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), b.ndim(), "add_bcast: rank mismatch");
        for (&da, &db) in a.shape().iter().zip(b.shape()) {
            assert!(db == da || db == 1, "add_bcast: incompatible shapes");
        }
        let out = &*a + &*b;
        let b_shape = b.shape().to_vec();
        self.binary(rhs, out, move |g| {
            vec![g.clone(), reduce_to_shape(g, &b_shape)]
        })
    }

    /// `self * rhs` with the same broadcasting rule as [`Var::add_bcast`].
    pub fn mul_bcast(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), b.ndim(), "mul_bcast: rank mismatch");
        for (&da, &db) in a.shape().iter().zip(b.shape()) {
            assert!(db == da || db == 1, "mul_bcast: incompatible shapes");
        }
        let out = &*a * &*b;
        let b_shape = b.shape().to_vec();
        self.binary(rhs, out, move |g| {
            let ga = g * &*b;
            let gb = reduce_to_shape(&(g * &*a), &b_shape);
            vec![ga, gb]
        })
    }

    /// Elementwise absolute value. Subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(f64::abs);
        self.unary(out, move |g| {
            let sign = a.mapv(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            vec![g * &sign]
        })
    }

    /// Elementwise tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(gelu_scalar);
        self.unary(out, move |g| vec![g * &a.mapv(gelu_prime)])
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(f64::tanh);
        let y = out.clone();
        self.unary(out, move |g| vec![g * &y.mapv(|t| 1.0 - t * t)])
    }

    // ---- reductions -------------------------------------------------------

    /// Mean over all elements, producing a 0-dimensional value.
    pub fn mean_all(self) -> Var<'t> {
        let a = self.value();
        let n = a.len();
        assert!(n > 0, "mean_all: empty array");
        let mean = a.sum() / n as f64;
        let shape = a.shape().to_vec();
        self.unary(Arr::from_elem(IxDyn(&[]), mean), move |g| {
            let gv = g[IxDyn(&[])] / n as f64;
            vec![Arr::from_elem(IxDyn(&shape[..]), gv)]
        })
    }

    /// Sum over all elements, producing a 0-dimensional value.
    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.unary(Arr::from_elem(IxDyn(&[]), a.sum()), move |g| {
            let gv = g[IxDyn(&[])];
            vec![Arr::from_elem(IxDyn(&shape[..]), gv)]
        })
    }

    // ---- shape manipulation -----------------------------------------------

    /// Reshape to `shape`; element count must be preserved.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let out = a
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible shape")
            .into_owned();
        let orig: Vec<usize> = a.shape().to_vec();
        self.unary(out, move |g| {
            vec![g.to_shape(IxDyn(&orig)).unwrap().into_owned()]
        })
    }

    /// Permute axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), axes.len(), "permute: rank mismatch");
        let out = a
            .view()
            .permuted_axes(axes)
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.unary(out, move |g| {
            vec![g
                .view()
                .permuted_axes(&inverse[..])
                .as_standard_layout()
                .into_owned()]
        })
    }

    /// Concatenate along the last axis; all other axes must match.
    pub fn concat_last(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let last = a.ndim() - 1;
        let out = concatenate(Axis(last), &[a.view(), b.view()])
            .expect("concat_last: incompatible shapes");
        let ca = a.shape()[last];
        self.binary(rhs, out, move |g| {
            let last = g.ndim() - 1;
            let ga = g
                .slice_axis(Axis(last), ndarray::Slice::from(0..ca as isize))
                .to_owned();
            let gb = g
                .slice_axis(Axis(last), ndarray::Slice::from(ca as isize..))
                .to_owned();
            vec![ga, gb]
        })
    }

    /// Select rows of a 2-d table: `out[i, :] = self[indices[i], :]`.
    /// Rows may repeat; gradients accumulate.
    pub fn gather_rows(self, indices: Arc<Vec<usize>>) -> Var<'t> {
        let a = self.value();
        let table = a.view().into_dimensionality::<Ix2>().expect("gather_rows: 2-d table");
        let (rows, cols) = table.dim();
        let mut out = Array2::<f64>::zeros((indices.len(), cols));
        for (i, &r) in indices.iter().enumerate() {
            assert!(r < rows, "gather_rows: index {r} out of range {rows}");
            out.row_mut(i).assign(&table.row(r));
        }
        self.unary(out.into_dyn(), move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gt = Array2::<f64>::zeros((rows, cols));
            for (i, &r) in indices.iter().enumerate() {
                let mut dst = gt.row_mut(r);
                dst += &g2.row(i);
            }
            vec![gt.into_dyn()]
        })
    }

    // ---- matrix products --------------------------------------------------

    /// Matrix product of 2-d operands: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul: lhs 2-d");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul: rhs 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dimension mismatch");
        let out = conv::matmul_std(&a2, &b2).into_dyn();
        self.binary(rhs, out, move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            vec![
                conv::matmul_std(&g2, &b2.t()).into_dyn(),
                conv::matmul_std(&a2.t(), &g2).into_dyn(),
            ]
        })
    }

    /// Batched matrix product: `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn bmm(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm: lhs 3-d");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm: rhs 3-d");
        let (ga, m, k) = a3.dim();
        let (gb, k2, n) = b3.dim();
        assert_eq!(ga, gb, "bmm: batch mismatch");
        assert_eq!(k, k2, "bmm: inner dimension mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((ga, m, n));
        for i in 0..ga {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        self.binary(rhs, out.into_dyn(), move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = ndarray::Array3::<f64>::zeros(a3.dim());
            let mut db = ndarray::Array3::<f64>::zeros(b3.dim());
            for i in 0..g3.dim().0 {
                let gi = g3.index_axis(Axis(0), i);
                da.index_axis_mut(Axis(0), i)
                    .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                db.index_axis_mut(Axis(0), i)
                    .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
            }
            vec![da.into_dyn(), db.into_dyn()]
        })
    }

    // ---- normalization and attention pieces --------------------------------

    /// Softmax along the last axis, numerically stabilized by max
    /// subtraction per lane.
    pub fn softmax_last(self) -> Var<'t> {
        let a = self.value();
        let last = a.ndim() - 1;
        let mut out = a.as_ref().clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        let y = Arc::new(out.clone());
        self.unary(out, move |g| {
            let last = g.ndim() - 1;
            let mut gx = g.clone();
            for (mut glane, ylane) in gx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
            {
                let dot: f64 = glane.iter().zip(ylane.iter()).map(|(&gv, &yv)| gv * yv).sum();
                Zip::from(&mut glane).and(&ylane).for_each(|gv, &yv| {
                    *gv = yv * (*gv - dot);
                });
            }
            vec![gx]
        })
    }

    /// Layer normalization over the last axis with learnable affine
    /// parameters: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    /// `gamma` and `beta` are 1-d of length equal to the last axis; the
    /// variance is the biased (population) estimate.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let a = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let last = a.ndim() - 1;
        let c = a.shape()[last];
        assert_eq!(gm.shape(), [c], "layer_norm: gamma length mismatch");
        assert_eq!(bt.shape(), [c], "layer_norm: beta length mismatch");

        let mut xhat = a.as_ref().clone();
        let mut inv_shape = a.shape().to_vec();
        inv_shape[last] = 1;
        let mut inv = Arr::zeros(IxDyn(&inv_shape));
        for (mut lane, iv) in xhat.lanes_mut(Axis(last)).into_iter().zip(inv.iter_mut()) {
            let mean = lane.sum() / c as f64;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|v| (v - mean) * istd);
            *iv = istd;
        }
        let gm1 = gm.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let bt1 = bt.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = xhat.clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            Zip::from(&mut lane)
                .and(&gm1)
                .and(&bt1)
                .for_each(|v, &gv, &bv| *v = *v * gv + bv);
        }

        let xhat = Arc::new(xhat);
        let inv = Arc::new(inv);
        self.ternary(gamma, beta, out, move |g| {
            let last = g.ndim() - 1;
            let c = g.shape()[last];
            let gm1 = gm.view().into_dimensionality::<ndarray::Ix1>().unwrap();

            let mut dgamma = ndarray::Array1::<f64>::zeros(c);
            let mut dbeta = ndarray::Array1::<f64>::zeros(c);
            let mut dx = g.clone();
            for ((mut glane, xlane), &istd) in dx
                .lanes_mut(Axis(last))
                .into_iter()
                .zip(xhat.lanes(Axis(last)))
                .zip(inv.iter())
            {
                // Accumulate affine-parameter gradients from this lane.
                Zip::from(&mut dgamma.view_mut())
                    .and(&glane)
                    .and(&xlane)
                    .for_each(|dg, &gv, &xv| *dg += gv * xv);
                dbeta += &glane;

                // dxhat = g * gamma; then project out mean and variance modes.
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                Zip::from(&mut glane).and(&gm1).for_each(|gv, &gmv| {
                    *gv *= gmv;
                });
                for (&gv, &xv) in glane.iter().zip(xlane.iter()) {
                    m1 += gv;
                    m2 += gv * xv;
                }
                m1 /= c as f64;
                m2 /= c as f64;
                Zip::from(&mut glane).and(&xlane).for_each(|gv, &xv| {
                    *gv = istd * (*gv - m1 - xv * m2);
                });
            }
            vec![dx, dgamma.into_dyn(), dbeta.into_dyn()]
        })
    }

    /// Sorts each lane along the last axis ascending. Gradients are routed
    /// back through the recorded permutation (sorted-pairing subgradient).
    /// The sort is stable, so ties route deterministically.
    pub fn sort_last(self) -> Var<'t> {
        let a = self.value();
        let last = a.ndim() - 1;
        let l = a.shape()[last];
        let lanes = a.len() / l.max(1);
        let flat = a
            .to_shape(IxDyn(&[lanes, l]))
            .expect("sort_last: standard layout")
            .into_owned();
        let mut out = flat.clone();
        let mut perm = vec![0usize; lanes * l];
        for lane in 0..lanes {
            let row: Vec<f64> = flat
                .index_axis(Axis(0), lane)
                .iter()
                .cloned()
                .collect();
            let mut order: Vec<usize> = (0..l).collect();
            order.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
            for (pos, &src) in order.iter().enumerate() {
                out[[lane, pos]] = row[src];
                perm[lane * l + pos] = src;
            }
        }
        let out = out.to_shape(a.raw_dim()).unwrap().into_owned();
        let orig_shape: Vec<usize> = a.shape().to_vec();
        self.unary(out, move |g| {
            let gf = g.to_shape(IxDyn(&[lanes, l])).unwrap();
            let mut gx = Array2::<f64>::zeros((lanes, l));
            for lane in 0..lanes {
                for pos in 0..l {
                    gx[[lane, perm[lane * l + pos]]] += gf[[lane, pos]];
                }
            }
            vec![gx.into_dyn().to_shape(IxDyn(&orig_shape)).unwrap().into_owned()]
        })
    }

    // ---- spatial operations on [B, H, W, C] --------------------------------

    /// Reflect-pads the H and W axes of a `[B, H, W, C]` array at the
    /// bottom/right edges (mirror without repeating the border sample).
    pub fn reflect_pad_hw(self, pad_h: usize, pad_w: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), 4, "reflect_pad_hw: expected [B, H, W, C]");
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let row_map = conv::mirror_map(h, pad_h);
        let col_map = conv::mirror_map(w, pad_w);
        let out = conv::gather_hw(&a, &row_map, &col_map);
        self.unary(out, move |g| {
            vec![conv::scatter_hw(g, &row_map, &col_map, h, w)]
        })
    }

    /// Crops a `[B, H, W, C]` array to its top-left `[B, h, w, C]` corner.
    pub fn crop_hw(self, h: usize, w: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), 4, "crop_hw: expected [B, H, W, C]");
        assert!(h <= a.shape()[1] && w <= a.shape()[2], "crop_hw: crop exceeds input");
        let out = a
            .slice(ndarray::s![.., 0..h, 0..w, ..])
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let orig = a.shape().to_vec();
        self.unary(out, move |g| {
            let mut gx = Arr::zeros(IxDyn(&orig));
            gx.slice_mut(ndarray::s![.., 0..h, 0..w, ..]).assign(g);
            vec![gx]
        })
    }

    /// 3x3 same-padded (zero) convolution over `[B, H, W, Ci]` with kernel
    /// `[3, 3, Ci, Co]` and bias `[Co]`, producing `[B, H, W, Co]`.
    pub fn conv3x3_same(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        assert_eq!(x.ndim(), 4, "conv3x3_same: expected [B, H, W, Ci]");
        assert_eq!(w.ndim(), 4, "conv3x3_same: kernel [3, 3, Ci, Co]");
        assert_eq!(&w.shape()[..2], &[3, 3], "conv3x3_same: 3x3 kernel only");
        assert_eq!(w.shape()[2], x.shape()[3], "conv3x3_same: channel mismatch");
        assert_eq!(b.shape(), [w.shape()[3]], "conv3x3_same: bias length");
        let out = conv::conv3x3_forward(&x, &w, &b);
        self.ternary(weight, bias, out, move |g| {
            let (gx, gw, gb) = conv::conv3x3_backward(&x, &w, g);
            vec![gx, gw, gb]
        })
    }

    /// Depthwise 3x3 same-padded (zero) convolution over `[B, H, W, C]`
    /// with kernel `[3, 3, C]` and bias `[C]`.
    pub fn dwconv3x3_same(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        assert_eq!(x.ndim(), 4, "dwconv3x3_same: expected [B, H, W, C]");
        assert_eq!(w.shape(), [3, 3, x.shape()[3]], "dwconv3x3_same: kernel [3, 3, C]");
        assert_eq!(b.shape(), [x.shape()[3]], "dwconv3x3_same: bias length");
        let out = conv::dwconv3x3_forward(&x, &w, &b);
        self.ternary(weight, bias, out, move |g| {
            let (gx, gw, gb) = conv::dwconv3x3_backward(&x, &w, g);
            vec![gx, gw, gb]
        })
    }
}
