//! Synthetic test volumes: smooth random "cells" delimited by dark
//! membrane-like boundaries, with isotropic statistics by construction.
//!
//! The field is a sum of random plane waves with directions drawn
//! uniformly on the sphere, so no axis is privileged — histograms of xy,
//! xz, and yz planes agree statistically, which is exactly the
//! self-similarity premise that makes lateral-plane training transfer to
//! axial planes. Membranes are carved where the field crosses zero.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::volume::{Spacing, Volume};

/// Number of plane waves per random field; enough for visually varied
/// structure while staying cheap to evaluate.
const WAVES: usize = 48;

struct WaveField {
    // Per wave: wave vector (kz, ky, kx), phase, amplitude.
    waves: Vec<([f64; 3], f64, f64)>,
}

impl WaveField {
    fn sample(rng: &mut ChaCha8Rng, wavelength: f64) -> Self {
        let amplitude = 1.0 / (WAVES as f64).sqrt();
        let waves = (0..WAVES)
            .map(|_| {
                // Uniform direction: normalized Gaussian triple.
                let mut dir = [0.0f64; 3];
                loop {
                    for d in &mut dir {
                        *d = StandardNormal.sample(rng);
                    }
                    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
                    if norm > 1e-6 {
                        for d in &mut dir {
                            *d /= norm;
                        }
                        break;
                    }
                }
                // Wavenumber jittered around 2*pi/wavelength.
                let k = 2.0 * std::f64::consts::PI / wavelength * rng.random_range(0.6..1.6);
                let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                ([dir[0] * k, dir[1] * k, dir[2] * k], phase, amplitude)
            })
            .collect();
        WaveField { waves }
    }

    fn eval(&self, z: f64, y: f64, x: f64) -> f64 {
        let mut acc = 0.0;
        for ([kz, ky, kx], phase, amp) in &self.waves {
            acc += amp * (kz * z + ky * y + kx * x + phase).cos();
        }
        // Each wave contributes variance amp^2/2; normalize to unit std.
        acc / 0.5f64.sqrt()
    }
}

/// Generates a deterministic membrane-like phantom volume.
///
/// `structure_scale` is the characteristic cell size in voxels; scales
/// larger than the volume are legal and produce a single smooth gradient
/// blob. Values lie in `[0, 1]` with membranes dark (~0.05) and cell
/// interiors textured in the mid-to-bright range. The result has
/// isotropic 15 nm spacing (the caller may override spacing afterwards).
pub fn generate_phantom_volume(
    size: (usize, usize, usize),
    structure_scale: f64,
    seed: u64,
) -> Result<Volume> {
    let (nz, ny, nx) = size;
    if nz < 8 || ny < 8 || nx < 8 {
        return Err(CoreError::config(format!(
            "phantom axes must all be >= 8, got ({nz}, {ny}, {nx})"
        )));
    }
    if !(structure_scale.is_finite() && structure_scale > 0.0) {
        return Err(CoreError::config(format!(
            "structure_scale must be positive, got {structure_scale}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = WaveField::sample(&mut rng, structure_scale);
    let texture = WaveField::sample(&mut rng, structure_scale * 0.45);

    let voxels = Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let (zf, yf, xf) = (z as f64, y as f64, x as f64);
        let f = cells.eval(zf, yf, xf);
        // 0 at the zero level set (membranes), saturating to 1 inside cells.
        let membrane = 1.0 - (-(f / 0.35) * (f / 0.35)).exp();
        let t = 0.5 + 0.5 * texture.eval(zf, yf, xf).tanh();
        (0.05 + membrane * (0.35 + 0.55 * t)).clamp(0.0, 1.0)
    });

    Volume::new(
        voxels,
        Spacing::isotropic(15.0)?,
        format!("phantom size=({nz},{ny},{nx}) scale={structure_scale} seed={seed}"),
    )
}
