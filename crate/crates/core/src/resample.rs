//! Plane and volume resampling.
//!
//! Interpolation uses center-aligned sample mapping
//! `src = (dst + 0.5) * (in_len / out_len) - 0.5` with mirror boundary
//! handling (border sample not repeated). The cubic kernel is Catmull-Rom
//! (a = -0.5) — the convention baked into all baseline comparisons, since
//! "cubic" alone underdetermines the result.
//!
//! Axial down-sampling for pair synthesis reduces rows by a real factor
//! `rho >= 1` to `floor(rows / rho)` output rows; the remainder is absorbed
//! by the later re-upsampling step of the degradation pipeline.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::{Spacing, Volume};

/// Interpolation order for resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpMethod {
    Nearest,
    Linear,
    #[default]
    Cubic,
}

impl std::str::FromStr for InterpMethod {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(InterpMethod::Nearest),
            "linear" => Ok(InterpMethod::Linear),
            "cubic" => Ok(InterpMethod::Cubic),
            other => Err(CoreError::config(format!(
                "unknown interpolation method '{other}' (expected nearest, linear, or cubic)"
            ))),
        }
    }
}

/// Row-reduction kernel for axial down-sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleKernel {
    /// Integrate each window of `rho` source rows (fractional windows at
    /// non-integer `rho`). Models section integration; the default.
    #[default]
    BoxAverage,
    /// Keep the first row of each period for integer `rho`; cubic
    /// resampling to the reduced row count otherwise.
    Decimate,
    /// Gaussian pre-filter (sigma = 0.5*sqrt(rho^2-1)) then decimate.
    GaussianDecimate,
}

impl std::str::FromStr for DownsampleKernel {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box-average" | "box" => Ok(DownsampleKernel::BoxAverage),
            "decimate" => Ok(DownsampleKernel::Decimate),
            "gaussian+decimate" | "gaussian-decimate" => Ok(DownsampleKernel::GaussianDecimate),
            other => Err(CoreError::config(format!(
                "unknown downsample kernel '{other}' \
                 (expected box-average, decimate, or gaussian+decimate)"
            ))),
        }
    }
}

/// Geometry of a volume resize: axes, scale factors, method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub in_shape: (usize, usize, usize),
    pub out_shape: (usize, usize, usize),
    pub method: InterpMethod,
    /// Per-axis `out = round(in * scale)` factors, (z, y, x) order.
    pub scale: (f64, f64, f64),
}

impl ResamplePlan {
    pub fn validate(&self) -> Result<()> {
        let ins = [self.in_shape.0, self.in_shape.1, self.in_shape.2];
        let outs = [self.out_shape.0, self.out_shape.1, self.out_shape.2];
        let scales = [self.scale.0, self.scale.1, self.scale.2];
        for ax in 0..3 {
            if outs[ax] < 1 {
                return Err(CoreError::config(format!(
                    "resample plan: output axis {ax} must be >= 1"
                )));
            }
            let expect = (ins[ax] as f64 * scales[ax]).round() as usize;
            if expect != outs[ax] {
                return Err(CoreError::config(format!(
                    "resample plan: axis {ax} inconsistent: round({} * {}) = {expect} != {}",
                    ins[ax], scales[ax], outs[ax]
                )));
            }
        }
        Ok(())
    }
}

/// Plan for bringing a volume of the given geometry to isotropic spacing
/// (the minimum of its per-axis spacings): each axis is scaled by
/// `s_axis / s_target` and rounded.
pub fn isotropic_plan(
    shape: (usize, usize, usize),
    spacing: Spacing,
    method: InterpMethod,
) -> Result<ResamplePlan> {
    spacing.validate()?;
    let target = spacing.min();
    let scale = (
        spacing.z / target,
        spacing.y / target,
        spacing.x / target,
    );
    let out_shape = (
        (shape.0 as f64 * scale.0).round() as usize,
        (shape.1 as f64 * scale.1).round() as usize,
        (shape.2 as f64 * scale.2).round() as usize,
    );
    let plan = ResamplePlan {
        in_shape: shape,
        out_shape,
        method,
        scale,
    };
    plan.validate()?;
    Ok(plan)
}

/// Mirror boundary index (period `2n-2`, border sample not repeated).
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let p = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(p);
    if m >= n as isize {
        m = p - m;
    }
    m as usize
}

/// Catmull-Rom weight at distance `s in [0, 2]` from the sample.
fn catmull_rom(s: f64) -> f64 {
    const A: f64 = -0.5;
    if s <= 1.0 {
        // ((A+2)s - (A+3)) s^2 + 1 — equals exactly 1 at s=0, 0 at s=1.
        ((A + 2.0) * s - (A + 3.0)) * s * s + 1.0
    } else if s < 2.0 {
        // A (s-1) (s-2)^2 — factored so s=1 and s=2 give exactly 0.
        A * (s - 1.0) * (s - 2.0) * (s - 2.0)
    } else {
        0.0
    }
}

/// Per-output-row taps: source indices and weights for one axis resize.
fn axis_taps(in_len: usize, out_len: usize, method: InterpMethod) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = (dst as f64 + 0.5) * ratio - 0.5;
            match method {
                InterpMethod::Nearest => {
                    let idx = reflect_index((src + 0.5).floor() as isize, in_len);
                    vec![(idx, 1.0)]
                }
                InterpMethod::Linear => {
                    let i0 = src.floor();
                    let t = src - i0;
                    let i0 = i0 as isize;
                    if t == 0.0 {
                        vec![(reflect_index(i0, in_len), 1.0)]
                    } else {
                        vec![
                            (reflect_index(i0, in_len), 1.0 - t),
                            (reflect_index(i0 + 1, in_len), t),
                        ]
                    }
                }
                InterpMethod::Cubic => {
                    let i0 = src.floor();
                    let t = src - i0;
                    let i0 = i0 as isize;
                    let weights = [
                        catmull_rom(t + 1.0),
                        catmull_rom(t),
                        catmull_rom(1.0 - t),
                        catmull_rom(2.0 - t),
                    ];
                    (0..4)
                        .filter(|k| weights[*k] != 0.0)
                        .map(|k| (reflect_index(i0 - 1 + k as isize, in_len), weights[k]))
                        .collect()
                }
            }
        })
        .collect()
}

/// Resizes along axis 0 of a 2-d array. Identity (bit-exact copy) when the
/// length is unchanged.
fn resize_rows(img: ArrayView2<'_, f64>, out_len: usize, method: InterpMethod) -> Array2<f64> {
    let (h, w) = img.dim();
    if out_len == h {
        return img.to_owned();
    }
    let taps = axis_taps(h, out_len, method);
    let mut out = Array2::zeros((out_len, w));
    for (dst, row_taps) in taps.iter().enumerate() {
        let mut acc = out.row_mut(dst);
        for &(src, wgt) in row_taps {
            acc.scaled_add(wgt, &img.row(src));
        }
    }
    out
}

/// Separable 2-d resize of a plane with the values clipped to `[0, 1]`.
/// Bit-exact identity when the target shape equals the input shape.
pub fn resize_plane(
    img: ArrayView2<'_, f64>,
    out_h: usize,
    out_w: usize,
    method: InterpMethod,
) -> Result<Array2<f64>> {
    if out_h < 1 || out_w < 1 {
        return Err(CoreError::config(format!(
            "resize_plane: target sizes must be >= 1, got ({out_h}, {out_w})"
        )));
    }
    let (h, w) = img.dim();
    if (out_h, out_w) == (h, w) {
        return Ok(img.to_owned());
    }
    let rows = resize_rows(img, out_h, method);
    let cols = resize_rows(rows.t(), out_w, method);
    let mut out = cols.t().to_owned();
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Resizes one axis of a 3-d array by moving it to the front, resizing
/// rows of the flattened remainder, and moving it back.
fn resize_volume_axis(
    vol: &Array3<f64>,
    axis: usize,
    out_len: usize,
    method: InterpMethod,
) -> Array3<f64> {
    let shape = vol.dim();
    let lens = [shape.0, shape.1, shape.2];
    if lens[axis] == out_len {
        return vol.clone();
    }
    let mut order = vec![axis];
    order.extend((0..3).filter(|&a| a != axis));
    let fronted = vol.view().permuted_axes([order[0], order[1], order[2]]);
    let rest: usize = order[1..].iter().map(|&a| lens[a]).product();
    let flat = fronted
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((lens[axis], rest))
        .expect("contiguous after standardizing");
    let resized = resize_rows(flat.view(), out_len, method);

    let mut out_lens = [0usize; 3];
    out_lens[0] = out_len;
    out_lens[1] = lens[order[1]];
    out_lens[2] = lens[order[2]];
    let back = resized
        .into_shape_with_order((out_lens[0], out_lens[1], out_lens[2]))
        .expect("row count matches");
    // Invert the permutation that brought `axis` to the front.
    let mut inverse = [0usize; 3];
    for (i, &a) in order.iter().enumerate() {
        inverse[a] = i;
    }
    back.permuted_axes(inverse).as_standard_layout().into_owned()
}

/// Resizes a volume so all axes share the smallest per-axis spacing.
/// Axes already at target spacing are passed through untouched, so an
/// already-isotropic volume comes back bit-identical (modulo the final
/// clip, which is a no-op on normalized data).
pub fn resize_volume_to_isotropic(v: &Volume, method: InterpMethod) -> Result<Volume> {
    let plan = isotropic_plan(v.shape(), v.spacing, method)?;
    let mut voxels = v.voxels.clone();
    let outs = [plan.out_shape.0, plan.out_shape.1, plan.out_shape.2];
    for axis in 0..3 {
        voxels = resize_volume_axis(&voxels, axis, outs[axis], method);
    }
    voxels.mapv_inplace(|x| x.clamp(0.0, 1.0));
    let target = v.spacing.min();
    Ok(Volume {
        voxels,
        spacing: Spacing::isotropic(target)?,
        provenance: v.provenance.clone(),
    }
    .with_note(&format!(
        "isotropized to {target} nm ({:?} -> {:?})",
        plan.in_shape, plan.out_shape
    )))
}

/// Reduces the rows of `img` by the real factor `rho >= 1`, producing
/// `floor(rows / rho)` output rows; columns are untouched. See
/// [`DownsampleKernel`] for the reduction rules.
pub fn downsample_axial(
    img: ArrayView2<'_, f64>,
    rho: f64,
    kernel: DownsampleKernel,
) -> Result<Array2<f64>> {
    if !(rho.is_finite() && rho >= 1.0) {
        return Err(CoreError::config(format!(
            "downsample_axial requires rho >= 1, got {rho}"
        )));
    }
    let (h, w) = img.dim();
    let out_h = (h as f64 / rho).floor() as usize;
    if out_h < 1 {
        return Err(CoreError::config(format!(
            "downsample_axial: {h} rows cannot fit one period of rho = {rho}"
        )));
    }
    if rho == 1.0 {
        return Ok(img.to_owned());
    }
    let integral = (rho - rho.round()).abs() < 1e-9;

    let picked = match kernel {
        DownsampleKernel::BoxAverage => box_average_rows(img, rho, out_h),
        DownsampleKernel::Decimate => decimate_rows(img, rho, out_h, integral),
        DownsampleKernel::GaussianDecimate => {
            let sigma = 0.5 * (rho * rho - 1.0).sqrt();
            let blurred = gaussian_blur_rows(img, sigma);
            decimate_rows(blurred.view(), rho, out_h, integral)
        }
    };
    debug_assert_eq!(picked.dim(), (out_h, w));
    Ok(picked)
}

/// Box integration of rows over windows `[i*rho, (i+1)*rho)` with
/// fractional edge weights. Written as `first + sum(w*(x-first))/W` so a
/// constant input survives exactly.
fn box_average_rows(img: ArrayView2<'_, f64>, rho: f64, out_h: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = Array2::zeros((out_h, w));
    for i in 0..out_h {
        let lo = i as f64 * rho;
        let hi = ((i + 1) as f64 * rho).min(h as f64);
        let first_row = lo.floor() as usize;
        let mut taps: Vec<(usize, f64)> = Vec::new();
        let mut r = first_row;
        while (r as f64) < hi {
            let cover_lo = (r as f64).max(lo);
            let cover_hi = ((r + 1) as f64).min(hi);
            let wgt = cover_hi - cover_lo;
            if wgt > 0.0 {
                taps.push((r, wgt));
            }
            r += 1;
        }
        let total: f64 = taps.iter().map(|&(_, wgt)| wgt).sum();
        let base = img.row(first_row);
        let mut acc = out.row_mut(i);
        acc.assign(&base);
        for &(row, wgt) in &taps {
            if row == first_row {
                continue;
            }
            let diff = &img.row(row) - &base;
            acc.scaled_add(wgt / total, &diff);
        }
    }
    out
}

/// First-row-of-period decimation for integer factors; cubic resampling
/// to the reduced row count for non-integer factors.
fn decimate_rows(img: ArrayView2<'_, f64>, rho: f64, out_h: usize, integral: bool) -> Array2<f64> {
    let (_, w) = img.dim();
    if integral {
        let step = rho.round() as usize;
        let mut out = Array2::zeros((out_h, w));
        for i in 0..out_h {
            out.row_mut(i).assign(&img.row(i * step));
        }
        out
    } else {
        resize_rows(img, out_h, InterpMethod::Cubic)
    }
}

/// Gaussian blur along rows with reflect boundary; kernel radius 3 sigma,
/// weights normalized to sum 1. Sigma 0 is the identity.
pub fn gaussian_blur_rows(img: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.to_owned();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= norm;
    }
    let (h, w) = img.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        let mut acc = out.row_mut(r);
        for (k, &wgt) in weights.iter().enumerate() {
            let src = reflect_index(r as isize + k as isize - radius, h);
            acc.scaled_add(wgt, &img.row(src));
        }
    }
    out
}

/// Axially down-samples a whole volume (along z) by `rho`, adjusting the
/// z spacing to `sx * rho`. This is the synthetic-evaluation degradation:
/// it turns an isotropic volume into a simulated anisotropic acquisition.
pub fn downsample_volume_axial(
    v: &Volume,
    rho: f64,
    kernel: DownsampleKernel,
) -> Result<Volume> {
    let (z, y, x) = v.shape();
    let flat = v
        .voxels
        .view()
        .into_shape_with_order((z, y * x))
        .expect("volume is standard layout");
    let reduced = downsample_axial(flat, rho, kernel)?;
    let out_z = reduced.dim().0;
    let voxels = reduced
        .into_shape_with_order((out_z, y, x))
        .expect("columns preserved");
    Ok(Volume {
        voxels,
        spacing: Spacing::new(v.spacing.x * rho, v.spacing.y, v.spacing.x)?,
        provenance: v.provenance.clone(),
    }
    .with_note(&format!("axial downsample rho={rho} kernel={kernel:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_plane(seed: u64, h: usize, w: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..=1.0))
    }

    #[test]
    fn same_size_resize_is_bit_identical() {
        let img = random_plane(1, 9, 7);
        for method in [InterpMethod::Nearest, InterpMethod::Linear, InterpMethod::Cubic] {
            let out = resize_plane(img.view(), 9, 7, method).unwrap();
            assert_eq!(out, img, "{method:?} identity failed");
        }
    }

    #[test]
    fn constants_are_fixed_points_of_interpolation() {
        let img = Array2::from_elem((6, 6), 0.5);
        for method in [InterpMethod::Nearest, InterpMethod::Linear, InterpMethod::Cubic] {
            for (h, w) in [(12, 12), (9, 17), (3, 4)] {
                let out = resize_plane(img.view(), h, w, method).unwrap();
                assert!(
                    out.iter().all(|&v| (v - 0.5).abs() < 1e-12),
                    "{method:?} {h}x{w} drifted from the constant"
                );
            }
        }
    }

    #[test]
    fn cubic_upscale_reproduces_linear_ramp_in_interior() {
        // Catmull-Rom has linear precision: away from the mirrored border a
        // ramp must be reproduced to machine-level accuracy.
        let h = 16;
        let step = 0.05;
        let img = Array2::from_shape_fn((h, 4), |(r, _)| r as f64 * step);
        let out = resize_plane(img.view(), 2 * h, 4, InterpMethod::Cubic).unwrap();
        for r in 0..2 * h {
            let src = (r as f64 + 0.5) * 0.5 - 0.5;
            if src < 1.0 || src > (h - 2) as f64 {
                continue; // boundary region uses mirrored samples
            }
            let expect = src * step;
            assert!(
                (out[[r, 2]] - expect).abs() < 1e-6,
                "row {r}: {} vs {expect}",
                out[[r, 2]]
            );
        }
    }

    #[test]
    fn isotropic_plan_examples() {
        // Large acquisition geometry: plan only, no voxel allocation.
        let plan = isotropic_plan(
            (490, 1024, 1024),
            Spacing::new(50.0, 15.0, 15.0).unwrap(),
            InterpMethod::Cubic,
        )
        .unwrap();
        assert_eq!(plan.out_shape, (1633, 1024, 1024));

        let plan = isotropic_plan(
            (4, 8, 8),
            Spacing::new(45.0, 15.0, 15.0).unwrap(),
            InterpMethod::Cubic,
        )
        .unwrap();
        assert_eq!(plan.out_shape, (12, 8, 8));

        // Non-integer ratio: 10 * 50/15 = 33.33 -> 33.
        let plan = isotropic_plan(
            (10, 32, 32),
            Spacing::new(50.0, 15.0, 15.0).unwrap(),
            InterpMethod::Cubic,
        )
        .unwrap();
        assert_eq!(plan.out_shape, (33, 32, 32));
    }

    #[test]
    fn already_isotropic_volume_is_unchanged() {
        let v = Volume::new(
            random_plane(2, 4, 16)
                .into_shape_with_order((4, 4, 4))
                .unwrap(),
            Spacing::isotropic(15.0).unwrap(),
            "t",
        )
        .unwrap();
        let out = resize_volume_to_isotropic(&v, InterpMethod::Cubic).unwrap();
        assert_eq!(out.voxels, v.voxels);
        assert_eq!(out.spacing, v.spacing);
    }

    #[test]
    fn isotropic_resize_keeps_lateral_axes_untouched() {
        // (4,8,8) @ (45,15,15): only z changes; lateral planes must be
        // interpolated along z but individual (y,x) samples never move.
        let v = Volume::new(
            Array3::from_shape_fn((4, 8, 8), |(z, y, x)| {
                (z as f64 * 0.1 + y as f64 * 0.05 + x as f64 * 0.01).min(1.0)
            }),
            Spacing::new(45.0, 15.0, 15.0).unwrap(),
            "t",
        )
        .unwrap();
        let out = resize_volume_to_isotropic(&v, InterpMethod::Cubic).unwrap();
        assert_eq!(out.shape(), (12, 8, 8));
        assert!(out.spacing.is_isotropic());
    }

    #[test]
    fn box_average_is_exact_on_constants() {
        let img = Array2::from_elem((12, 12), 0.3);
        let out = downsample_axial(img.view(), 3.0, DownsampleKernel::BoxAverage).unwrap();
        assert_eq!(out.dim(), (4, 12));
        assert!(out.iter().all(|&v| v == 0.3), "constant not preserved exactly");
    }

    #[test]
    fn box_average_direct_window_means() {
        // rows (0,0,0,1,1,1) -> (0,1)
        let mut img = Array2::zeros((6, 2));
        for r in 3..6 {
            img.row_mut(r).fill(1.0);
        }
        let out = downsample_axial(img.view(), 3.0, DownsampleKernel::BoxAverage).unwrap();
        assert_eq!(out.dim(), (2, 2));
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[1, 0]], 1.0);
    }

    #[test]
    fn box_average_preserves_global_mean_when_divisible() {
        let img = random_plane(3, 12, 5);
        let out = downsample_axial(img.view(), 3.0, DownsampleKernel::BoxAverage).unwrap();
        let mean_in: f64 = img.mean().unwrap();
        let mean_out: f64 = out.mean().unwrap();
        assert!((mean_in - mean_out).abs() < 1e-6);
    }

    #[test]
    fn downsample_output_rows_follow_floor_rule() {
        let img = random_plane(4, 13, 4);
        for (rho, expect) in [(3.0, 4), (2.5, 5), (10.0 / 3.0, 3), (1.0, 13)] {
            let out = downsample_axial(img.view(), rho, DownsampleKernel::BoxAverage).unwrap();
            assert_eq!(out.dim().0, expect, "rho={rho}");
        }
    }

    #[test]
    fn decimate_picks_period_starts() {
        let img = Array2::from_shape_fn((9, 2), |(r, _)| r as f64 / 10.0);
        let out = downsample_axial(img.view(), 3.0, DownsampleKernel::Decimate).unwrap();
        assert_eq!(out.dim(), (3, 2));
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[1, 0]], 0.3);
        assert_eq!(out[[2, 0]], 0.6);
    }

    #[test]
    fn gaussian_blur_preserves_constants_and_mass() {
        let img = Array2::from_elem((8, 3), 0.25);
        let out = gaussian_blur_rows(img.view(), 1.5);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn rho_below_one_rejected() {
        let img = random_plane(5, 8, 8);
        assert!(downsample_axial(img.view(), 0.5, DownsampleKernel::BoxAverage).is_err());
    }

    #[test]
    fn too_few_rows_for_one_period_rejected() {
        let img = random_plane(6, 2, 4);
        assert!(downsample_axial(img.view(), 3.0, DownsampleKernel::BoxAverage).is_err());
    }

    #[test]
    fn volume_axial_downsample_adjusts_spacing() {
        let v = Volume::new(
            Array3::from_elem((12, 4, 4), 0.5),
            Spacing::isotropic(15.0).unwrap(),
            "t",
        )
        .unwrap();
        let out = downsample_volume_axial(&v, 3.0, DownsampleKernel::BoxAverage).unwrap();
        assert_eq!(out.shape(), (4, 4, 4));
        assert_eq!(out.spacing.z, 45.0);
        assert_eq!(out.spacing.x, 15.0);
    }
}
