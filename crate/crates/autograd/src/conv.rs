//! Array-level kernels for the spatial operations: 3x3 convolutions via
//! im2col and reflect padding as index gathers. Forward and backward are
//! plain functions over arrays; the tape wiring lives in `ops`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::Arr;

/// Matrix product with a guaranteed standard-layout (row-major) result.
/// `dot` may hand back a column-major array when an operand is transposed
/// or degenerate, which breaks later reshapes; computing into a fresh
/// output fixes the layout.
pub(crate) fn matmul_std(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// Index map for reflect padding: identity for `0..n`, then mirrored
/// indices (border sample not repeated) for another `pad` entries.
pub(crate) fn mirror_map(n: usize, pad: usize) -> Vec<usize> {
    assert!(n > 0, "mirror_map: empty axis");
    let mut map = Vec::with_capacity(n + pad);
    map.extend(0..n);
    if n == 1 {
        map.extend(std::iter::repeat(0).take(pad));
        return map;
    }
    let period = 2 * n - 2;
    for i in n..n + pad {
        let m = i % period;
        map.push(if m < n { m } else { period - m });
    }
    map
}

/// Gathers rows then columns of a `[B, H, W, C]` array according to the
/// index maps, producing `[B, row_map.len(), col_map.len(), C]`.
pub(crate) fn gather_hw(x: &Arr, row_map: &[usize], col_map: &[usize]) -> Arr {
    let (b, _h, w, c) = dims4(x);
    let hp = row_map.len();
    let wp = col_map.len();
    let mut rows = ArrayD::<f64>::zeros(IxDyn(&[b, hp, w, c]));
    for (i, &src) in row_map.iter().enumerate() {
        rows.slice_mut(s![.., i, .., ..])
            .assign(&x.slice(s![.., src, .., ..]));
    }
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, hp, wp, c]));
    for (j, &src) in col_map.iter().enumerate() {
        out.slice_mut(s![.., .., j, ..])
            .assign(&rows.slice(s![.., .., src, ..]));
    }
    out
}

/// Transpose of [`gather_hw`]: scatter-adds a `[B, Hp, Wp, C]` cotangent
/// back onto the original `[B, H, W, C]` extents.
pub(crate) fn scatter_hw(g: &Arr, row_map: &[usize], col_map: &[usize], h: usize, w: usize) -> Arr {
    let (b, hp, _wp, c) = dims4(g);
    let mut cols = ArrayD::<f64>::zeros(IxDyn(&[b, hp, w, c]));
    for (j, &dst) in col_map.iter().enumerate() {
        let mut acc = cols.slice_mut(s![.., .., dst, ..]);
        acc += &g.slice(s![.., .., j, ..]);
    }
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, h, w, c]));
    for (i, &dst) in row_map.iter().enumerate() {
        let mut acc = out.slice_mut(s![.., dst, .., ..]);
        acc += &cols.slice(s![.., i, .., ..]);
    }
    out
}

fn dims4(x: &Arr) -> (usize, usize, usize, usize) {
    assert_eq!(x.ndim(), 4);
    (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3])
}

/// Lays out 3x3 zero-padded neighborhoods of `[B, H, W, Ci]` as a
/// `[B*H*W, 9*Ci]` matrix; column block `(dy*3+dx)*Ci..` holds the sample
/// at spatial offset `(dy-1, dx-1)`.
fn im2col3(x: &Arr) -> Array2<f64> {
    let (b, h, w, ci) = dims4(x);
    let mut col = ArrayD::<f64>::zeros(IxDyn(&[b, h, w, 9 * ci]));
    for dy in 0..3usize {
        for dx in 0..3usize {
            let (y0, y1) = valid_range(h, dy);
            let (x0, x1) = valid_range(w, dx);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            let base = (dy * 3 + dx) * ci;
            let (sy0, sy1) = (y0 + dy - 1, y1 + dy - 1);
            let (sx0, sx1) = (x0 + dx - 1, x1 + dx - 1);
            col.slice_mut(s![.., y0..y1, x0..x1, base..base + ci])
                .assign(&x.slice(s![.., sy0..sy1, sx0..sx1, ..]));
        }
    }
    col.into_shape_with_order(IxDyn(&[b * h * w, 9 * ci]))
        .unwrap()
        .into_dimensionality()
        .unwrap()
}

/// Output rows `[y0, y1)` whose source row `y + dy - 1` is in range.
fn valid_range(n: usize, d: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(d);
    let hi = (n + 1 - d).min(n);
    (lo, hi)
}

pub(crate) fn conv3x3_forward(x: &Arr, w: &Arr, bias: &Arr) -> Arr {
    let (b, h, wd, ci) = dims4(x);
    let co = w.shape()[3];
    let col = im2col3(x);
    let wmat = w
        .to_shape((9 * ci, co))
        .expect("conv3x3: kernel must be standard layout");
    let mut out = matmul_std(&col.view(), &wmat.view());
    let bias1 = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    out += &bias1;
    out.into_shape_with_order(IxDyn(&[b, h, wd, co]))
        .unwrap()
        .into_dyn()
}

pub(crate) fn conv3x3_backward(x: &Arr, w: &Arr, g: &Arr) -> (Arr, Arr, Arr) {
    let (b, h, wd, ci) = dims4(x);
    let co = w.shape()[3];
    let g2 = g
        .to_shape((b * h * wd, co))
        .expect("conv3x3: cotangent must be standard layout");

    // The column matrix is recomputed rather than kept from the forward
    // pass; it is 9x the input and cheap to rebuild.
    let col = im2col3(x);
    let gw = matmul_std(&col.t(), &g2.view());
    let gb = g2.sum_axis(Axis(0));

    let wmat = w.to_shape((9 * ci, co)).unwrap();
    let gcol = matmul_std(&g2.view(), &wmat.t());
    let gcol4 = gcol
        .into_shape_with_order(IxDyn(&[b, h, wd, 9 * ci]))
        .unwrap();

    let mut gx = ArrayD::<f64>::zeros(IxDyn(&[b, h, wd, ci]));
    for dy in 0..3usize {
        for dx in 0..3usize {
            let (y0, y1) = valid_range(h, dy);
            let (x0, x1) = valid_range(wd, dx);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            let base = (dy * 3 + dx) * ci;
            let (sy0, sy1) = (y0 + dy - 1, y1 + dy - 1);
            let (sx0, sx1) = (x0 + dx - 1, x1 + dx - 1);
            let mut dst = gx.slice_mut(s![.., sy0..sy1, sx0..sx1, ..]);
            dst += &gcol4.slice(s![.., y0..y1, x0..x1, base..base + ci]);
        }
    }
    (
        gx,
        gw.into_shape_with_order(IxDyn(&[3, 3, ci, co]))
            .unwrap()
            .into_dyn(),
        gb.into_dyn(),
    )
}

pub(crate) fn dwconv3x3_forward(x: &Arr, w: &Arr, bias: &Arr) -> Arr {
    let (b, h, wd, c) = dims4(x);
    let mut out = bias
        .broadcast(IxDyn(&[b, h, wd, c]))
        .expect("dwconv3x3: bias broadcast")
        .to_owned();
    for dy in 0..3usize {
        for dx in 0..3usize {
            let (y0, y1) = valid_range(h, dy);
            let (x0, x1) = valid_range(wd, dx);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            let (sy0, sy1) = (y0 + dy - 1, y1 + dy - 1);
            let (sx0, sx1) = (x0 + dx - 1, x1 + dx - 1);
            let wlane = w.slice(s![dy, dx, ..]);
            let contrib = &x.slice(s![.., sy0..sy1, sx0..sx1, ..]) * &wlane;
            let mut dst = out.slice_mut(s![.., y0..y1, x0..x1, ..]);
            dst += &contrib;
        }
    }
    out
}

pub(crate) fn dwconv3x3_backward(x: &Arr, w: &Arr, g: &Arr) -> (Arr, Arr, Arr) {
    let (b, h, wd, c) = dims4(x);
    let mut gx = ArrayD::<f64>::zeros(IxDyn(&[b, h, wd, c]));
    let mut gw = ArrayD::<f64>::zeros(IxDyn(&[3, 3, c]));
    for dy in 0..3usize {
        for dx in 0..3usize {
            let (y0, y1) = valid_range(h, dy);
            let (x0, x1) = valid_range(wd, dx);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            let (sy0, sy1) = (y0 + dy - 1, y1 + dy - 1);
            let (sx0, sx1) = (x0 + dx - 1, x1 + dx - 1);
            let gslice = g.slice(s![.., y0..y1, x0..x1, ..]);
            let xslice = x.slice(s![.., sy0..sy1, sx0..sx1, ..]);
            let wlane = w.slice(s![dy, dx, ..]);

            let back = &gslice * &wlane;
            let mut dst = gx.slice_mut(s![.., sy0..sy1, sx0..sx1, ..]);
            dst += &back;

            let prod = &gslice * &xslice;
            let per_channel: Array1<f64> = prod
                .sum_axis(Axis(0))
                .sum_axis(Axis(0))
                .sum_axis(Axis(0))
                .into_dimensionality()
                .unwrap();
            let mut wdst = gw.slice_mut(s![dy, dx, ..]);
            wdst += &per_channel;
        }
    }
    let gb = g
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        .into_dyn();
    (gx, gw, gb)
}
