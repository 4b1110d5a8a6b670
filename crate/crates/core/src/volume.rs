//! The `Volume` domain type: a 3-D scalar grid with physical voxel spacing.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Physical voxel spacing in nanometres, one entry per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub fn new(z: f64, y: f64, x: f64) -> Result<Self> {
        let s = Spacing { z, y, x };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic(s: f64) -> Result<Self> {
        Spacing::new(s, s, s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("z", self.z), ("y", self.y), ("x", self.x)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CoreError::config(format!(
                    "spacing.{name} must be finite and strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Smallest per-axis spacing; the isotropic target.
    pub fn min(&self) -> f64 {
        self.z.min(self.y).min(self.x)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        Spacing::new(a[0], a[1], a[2])
    }

    /// True when all three spacings agree to within a part in 10^9.
    pub fn is_isotropic(&self) -> bool {
        let m = self.min();
        let rel = |v: f64| (v - m).abs() / m;
        rel(self.z) < 1e-9 && rel(self.y) < 1e-9 && rel(self.x) < 1e-9
    }
}

/// Ratio of axial to lateral spacing, `rho = sz / sx`. Not necessarily an
/// integer; `>= 1` for anisotropic acquisitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyRatio {
    rho: f64,
}

impl AnisotropyRatio {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(CoreError::config(format!(
                "anisotropy ratio must be finite and positive, got {rho}"
            )));
        }
        Ok(AnisotropyRatio { rho })
    }

    pub fn get(&self) -> f64 {
        self.rho
    }
}

/// A 3-D scalar volume indexed `(z, y, x)` with voxel spacing in nm.
///
/// By convention the lateral plane is a fixed-`z` slice (the natively
/// high-resolution plane) and the axial planes are fixed-`y` (xz) or
/// fixed-`x` (yz) slices. Computations hold voxels as f64; values are
/// expected in `[0, 1]` once normalized.
#[derive(Debug, Clone)]
pub struct Volume {
    pub voxels: Array3<f64>,
    pub spacing: Spacing,
    /// Free-text processing history (source file, transforms applied).
    pub provenance: String,
}

impl Volume {
    pub fn new(voxels: Array3<f64>, spacing: Spacing, provenance: impl Into<String>) -> Result<Self> {
        let v = Volume {
            voxels,
            spacing,
            provenance: provenance.into(),
        };
        v.validate_shape()?;
        Ok(v)
    }

    /// `(z, y, x)` extents.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.voxels.dim();
        (d.0, d.1, d.2)
    }

    fn validate_shape(&self) -> Result<()> {
        self.spacing.validate()?;
        let (z, y, x) = self.shape();
        if z == 0 || y == 0 || x == 0 {
            return Err(CoreError::config(format!(
                "volume axes must all be non-empty, got ({z}, {y}, {x})"
            )));
        }
        Ok(())
    }

    /// Checks the full Volume invariant: positive spacing, non-empty axes,
    /// all voxels finite and inside `[0, 1]`.
    pub fn validate_normalized(&self) -> Result<()> {
        self.validate_shape()?;
        for &v in self.voxels.iter() {
            if !v.is_finite() {
                return Err(CoreError::numeric("volume contains non-finite voxels"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::numeric(format!(
                    "voxel value {v} outside [0, 1]; normalize the volume first"
                )));
            }
        }
        Ok(())
    }

    /// `sz / sx`, the axial under-sampling factor.
    pub fn anisotropy_ratio(&self) -> Result<AnisotropyRatio> {
        AnisotropyRatio::new(self.spacing.z / self.spacing.x)
    }

    /// Appends one step to the provenance chain.
    pub fn with_note(mut self, note: &str) -> Self {
        if self.provenance.is_empty() {
            self.provenance = note.to_string();
        } else {
            self.provenance = format!("{} | {note}", self.provenance);
        }
        self
    }
}

/// Linear percentile of `values` (interpolated order statistic, the same
/// convention as the common numerical libraries). `pct` in `[0, 100]`.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    assert!((0.0..=100.0).contains(&pct), "percentile out of range");
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        // a + (b - a) * t rather than a * (1 - t) + b * t: the former is
        // exact when the two order statistics are equal, so plateaus (and
        // in particular constant volumes) keep their value to the bit.
        let t = rank - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * t
    }
}

/// Linearly rescales intensities so the `lo_pct` percentile maps to 0 and
/// the `hi_pct` percentile maps to 1, clipping to `[0, 1]`. A constant
/// volume (degenerate percentile range) maps to all zeros.
pub fn normalize_intensity(v: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(CoreError::config(format!(
            "percentile range must satisfy 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})"
        )));
    }
    let flat: Vec<f64> = v.voxels.iter().cloned().collect();
    let lo = percentile(&flat, lo_pct);
    let hi = percentile(&flat, hi_pct);
    let span = hi - lo;
    let voxels = if span <= 0.0 {
        Array3::zeros(v.voxels.dim())
    } else {
        v.voxels.mapv(|x| ((x - lo) / span).clamp(0.0, 1.0))
    };
    Ok(Volume {
        voxels,
        spacing: v.spacing,
        provenance: v.provenance.clone(),
    }
    .with_note(&format!("normalize({lo_pct},{hi_pct})")))
}
