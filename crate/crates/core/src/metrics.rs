//! Reconstruction quality metrics and the synthetic evaluation protocol.
//!
//! PSNR is computed jointly over the compared voxels; SSIM uses a
//! uniform window and is averaged per axial (xz) plane, matching the
//! orientation the restorer actually works in. A configurable axial
//! margin excludes boundary voxels, where interpolation support is
//! one-sided.
//!
//! The synthetic protocol starts from an isotropic ground truth, builds
//! the anisotropic input by axial downsampling, reconstructs it, and
//! reports restored-vs-cubic metrics side by side. The downsample and
//! upsample conventions are center-aligned, so slice `j` of the
//! reconstruction corresponds to slice `j` of the ground truth; the
//! volumes are compared on their common axial range.

use std::path::Path;

use ndarray::{Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::degrade::DegradationConfig;
use crate::error::{CoreError, Result};
use crate::reconstruct::{reconstruct_volume, PlanePredictor, ReconstructionOptions};
use crate::resample::downsample_volume_axial;
use crate::volume::Volume;

/// Intensity range metrics assume; volumes are normalized to `[0, 1]`.
pub const DATA_RANGE: f64 = 1.0;
/// Axial slices trimmed from both ends before comparison.
pub const DEFAULT_AXIAL_MARGIN: usize = 4;

const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `None` when the inputs are
/// identical (infinite PSNR), which serializes as `null`.
pub fn psnr(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, data_range: f64) -> Option<f64> {
    assert_eq!(a.dim(), b.dim(), "psnr: shape mismatch");
    let n = a.len() as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        None
    } else {
        Some(10.0 * (data_range * data_range / mse).log10())
    }
}

/// Mean structural similarity of a 2-d plane over all valid positions of
/// a uniform window (shrunk if the plane is smaller than the default
/// 8x8).
pub fn ssim_plane(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, data_range: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "ssim: shape mismatch");
    let (h, w) = a.dim();
    let win = SSIM_WINDOW.min(h).min(w);
    let n = (win * win) as f64;
    let c1 = (SSIM_K1 * data_range) * (SSIM_K1 * data_range);
    let c2 = (SSIM_K2 * data_range) * (SSIM_K2 * data_range);

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let x = a[(y0 + dy, x0 + dx)];
                    let y = b[(y0 + dy, x0 + dx)];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

fn trim_axial(v: ArrayView3<'_, f64>, margin: usize) -> ArrayView3<'_, f64> {
    let nz = v.dim().0;
    assert!(nz > 2 * margin, "axial margin {margin} leaves no slices of {nz}");
    v.slice_move(ndarray::s![margin..nz - margin, .., ..])
}

/// Joint PSNR over the volume interior (axial margin trimmed).
pub fn volume_psnr(
    a: ArrayView3<'_, f64>,
    b: ArrayView3<'_, f64>,
    margin: usize,
    data_range: f64,
) -> Option<f64> {
    psnr(trim_axial(a, margin), trim_axial(b, margin), data_range)
}

/// Mean SSIM of the axial (xz) planes over the volume interior.
pub fn volume_ssim(
    a: ArrayView3<'_, f64>,
    b: ArrayView3<'_, f64>,
    margin: usize,
    data_range: f64,
) -> f64 {
    let at = trim_axial(a, margin);
    let bt = trim_axial(b, margin);
    let ny = at.dim().1;
    let mut total = 0.0;
    for y in 0..ny {
        total += ssim_plane(
            at.index_axis(Axis(1), y),
            bt.index_axis(Axis(1), y),
            data_range,
        );
    }
    total / ny as f64
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricsPair {
    /// `null` means the compared volumes were identical.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

/// Side-by-side evaluation of a reconstruction against the cubic
/// baseline on synthetic anisotropic data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub gt_shape: (usize, usize, usize),
    pub restored_shape: (usize, usize, usize),
    /// Axial slices compared after registration and margin trimming.
    pub compared_slices: usize,
    pub rho: f64,
    pub axial_margin: usize,
    pub cubic: MetricsPair,
    pub restored: MetricsPair,
    /// Restored PSNR minus cubic PSNR; `null` if either side saturated.
    pub psnr_gain_db: Option<f64>,
    /// Restored SSIM minus cubic SSIM.
    pub ssim_delta: f64,
}

impl ReconstructionReport {
    /// Plain-text summary table.
    pub fn render_table(&self) -> String {
        let fmt_psnr = |p: Option<f64>| match p {
            Some(v) => format!("{v:8.3}"),
            None => "     inf".to_string(),
        };
        let mut s = String::new();
        s.push_str(&format!(
            "reconstruction report (rho = {:.4}, margin = {}, {} axial slices compared)\n",
            self.rho, self.axial_margin, self.compared_slices
        ));
        s.push_str("method     psnr[dB]     ssim\n");
        s.push_str(&format!(
            "cubic      {}   {:.4}\n",
            fmt_psnr(self.cubic.psnr_db),
            self.cubic.ssim
        ));
        s.push_str(&format!(
            "restored   {}   {:.4}\n",
            fmt_psnr(self.restored.psnr_db),
            self.restored.ssim
        ));
        s.push_str(&format!(
            "gain       {}   {:+.4}\n",
            fmt_psnr(self.psnr_gain_db),
            self.ssim_delta
        ));
        s
    }
}

/// Crops two volumes to their common axial extent. The resampling
/// conventions align slice `j` with slice `j`, so no sub-voxel
/// registration is needed.
fn common_axial<'a>(
    a: &'a Array3<f64>,
    b: &'a Array3<f64>,
) -> (ArrayView3<'a, f64>, ArrayView3<'a, f64>) {
    assert_eq!(a.dim().1, b.dim().1, "lateral shape mismatch");
    assert_eq!(a.dim().2, b.dim().2, "lateral shape mismatch");
    let nz = a.dim().0.min(b.dim().0);
    (
        a.slice(ndarray::s![0..nz, .., ..]),
        b.slice(ndarray::s![0..nz, .., ..]),
    )
}

/// Synthetic evaluation: degrade an isotropic ground truth axially by
/// `cfg.rho`, reconstruct with `predictor`, and compare both the
/// reconstruction and the cubic baseline against the ground truth.
pub fn evaluate_synthetic(
    gt: &Volume,
    cfg: &DegradationConfig,
    predictor: &dyn PlanePredictor,
    opts: &ReconstructionOptions,
    margin: usize,
) -> Result<(ReconstructionReport, Volume)> {
    if !gt.spacing.is_isotropic() {
        return Err(CoreError::config(
            "synthetic evaluation requires an isotropic ground truth",
        ));
    }
    let down = downsample_volume_axial(gt, cfg.rho.get(), cfg.kernel)?;
    let restored = reconstruct_volume(&down, predictor, opts)?;
    let cubic = reconstruct_volume(&down, &crate::reconstruct::IdentityPredictor, opts)?;

    let (gt_r, rec_r) = common_axial(&gt.voxels, &restored.voxels);
    let (gt_c, cub_c) = common_axial(&gt.voxels, &cubic.voxels);
    let nz = gt_r.dim().0;
    if nz <= 2 * margin {
        return Err(CoreError::config(format!(
            "axial margin {margin} leaves no slices to compare (common extent {nz})"
        )));
    }

    let restored_pair = MetricsPair {
        psnr_db: volume_psnr(rec_r, gt_r, margin, DATA_RANGE),
        ssim: volume_ssim(rec_r, gt_r, margin, DATA_RANGE),
    };
    let cubic_pair = MetricsPair {
        psnr_db: volume_psnr(cub_c, gt_c, margin, DATA_RANGE),
        ssim: volume_ssim(cub_c, gt_c, margin, DATA_RANGE),
    };
    let report = ReconstructionReport {
        gt_shape: gt.shape(),
        restored_shape: restored.shape(),
        compared_slices: nz - 2 * margin,
        rho: cfg.rho.get(),
        axial_margin: margin,
        cubic: cubic_pair,
        restored: restored_pair,
        psnr_gain_db: match (restored_pair.psnr_db, cubic_pair.psnr_db) {
            (Some(r), Some(c)) => Some(r - c),
            _ => None,
        },
        ssim_delta: restored_pair.ssim - cubic_pair.ssim,
    };
    Ok((report, restored))
}

/// Writes 8-bit grayscale preview PNGs of the center xz plane of each
/// volume: `<stem>_gt.png`, `<stem>_cubic.png`, `<stem>_restored.png`.
pub fn save_xz_previews(
    dir: &Path,
    stem: &str,
    volumes: &[(&str, &Volume)],
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut written = Vec::new();
    for (label, v) in volumes {
        let y = v.shape().1 / 2;
        let plane = v.voxels.index_axis(Axis(1), y);
        let (h, w) = plane.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ((r, c), &val) in plane.indexed_iter() {
            let q = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(c as u32, r as u32, image::Luma([q]));
        }
        let path = dir.join(format!("{stem}_{label}.png"));
        img.save(&path)
            .map_err(|e| CoreError::format(&path, format!("PNG write failed: {e}")))?;
        written.push(path);
    }
    Ok(written)
}
