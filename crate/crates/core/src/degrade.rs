//! Self-supervised training-pair synthesis.
//!
//! Ground-truth patches come from the volume's own lateral (xy) planes —
//! the natively high-resolution direction. Each is pushed through a
//! configurable degradation pipeline (axial blur, row under-sampling by
//! rho, noise, artifacts, cubic re-upsampling) to produce the LR input,
//! simulating what an axial (xz/yz) plane looks like after interpolation.
//! Both row-wise and column-wise degradations are emitted with equal
//! probability, covering the statistics of both axial orientations.
//!
//! Every pair is a pure function of `(volume, configs, seed, index)`:
//! workers can synthesize any subset in any order and the stream is still
//! reproducible, whatever the worker count.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::resample::{downsample_axial, gaussian_blur_rows, resize_plane, DownsampleKernel, InterpMethod};
use crate::volume::{AnisotropyRatio, Volume};

/// Additive noise applied at the under-sampled (acquisition) grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum NoiseModel {
    #[default]
    None,
    /// i.i.d. zero-mean Gaussian with standard deviation `sigma`.
    Gaussian { sigma: f64 },
    /// Signal-dependent shot noise (Gaussian approximation of a Poisson
    /// term with the given gain) plus a Gaussian read-noise floor.
    PoissonGaussian { gain: f64, sigma: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::None => Ok(()),
            NoiseModel::Gaussian { sigma } => {
                if sigma < 0.0 || !sigma.is_finite() {
                    return Err(CoreError::config(format!("noise sigma must be >= 0, got {sigma}")));
                }
                Ok(())
            }
            NoiseModel::PoissonGaussian { gain, sigma } => {
                if gain < 0.0 || !gain.is_finite() || sigma < 0.0 || !sigma.is_finite() {
                    return Err(CoreError::config(format!(
                        "poisson-gaussian parameters must be >= 0, got gain={gain} sigma={sigma}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Structured acquisition artifacts applied at the under-sampled grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ArtifactModel {
    #[default]
    None,
    /// Additive sinusoidal row striping with a random per-patch phase.
    Stripe { amplitude: f64, period: f64 },
    /// Each row independently zeroed with the given probability
    /// (lost scan lines).
    DropoutLines { probability: f64 },
}

impl ArtifactModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ArtifactModel::None => Ok(()),
            ArtifactModel::Stripe { amplitude, period } => {
                if amplitude < 0.0 || !amplitude.is_finite() {
                    return Err(CoreError::config(format!(
                        "stripe amplitude must be >= 0, got {amplitude}"
                    )));
                }
                if !(period.is_finite() && period > 0.0) {
                    return Err(CoreError::config(format!(
                        "stripe period must be positive, got {period}"
                    )));
                }
                Ok(())
            }
            ArtifactModel::DropoutLines { probability } => {
                if !(0.0..=1.0).contains(&probability) {
                    return Err(CoreError::config(format!(
                        "dropout probability must lie in [0,1], got {probability}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Full degradation recipe for synthesizing LR patches from GT patches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationConfig {
    /// Axial under-sampling factor; defaults to the volume's sz/sx.
    pub rho: AnisotropyRatio,
    /// Gaussian blur (in high-res pixels) along the to-be-undersampled
    /// direction before reduction; models axial PSF spread.
    pub axial_blur_sigma: f64,
    /// Row-reduction kernel for the under-sampling step.
    pub kernel: DownsampleKernel,
    pub noise: NoiseModel,
    pub artifact: ArtifactModel,
    /// Master seed; every pair derives its own RNG stream from it.
    pub seed: u64,
}

impl DegradationConfig {
    /// Defaults mimicking serial-section acquisition at ratio `rho`:
    /// axial blur rho/2, box-average reduction, mild Gaussian noise.
    pub fn defaults_for_rho(rho: AnisotropyRatio, seed: u64) -> Self {
        DegradationConfig {
            rho,
            axial_blur_sigma: rho.get() / 2.0,
            kernel: DownsampleKernel::BoxAverage,
            noise: NoiseModel::Gaussian { sigma: 0.02 },
            artifact: ArtifactModel::None,
            seed,
        }
    }

    /// A clean pipeline: pure under-sampling, no blur/noise/artifacts.
    pub fn clean(rho: AnisotropyRatio, kernel: DownsampleKernel, seed: u64) -> Self {
        DegradationConfig {
            rho,
            axial_blur_sigma: 0.0,
            kernel,
            noise: NoiseModel::None,
            artifact: ArtifactModel::None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.get() < 1.0 {
            return Err(CoreError::config(format!(
                "degradation rho must be >= 1, got {}",
                self.rho.get()
            )));
        }
        if self.axial_blur_sigma < 0.0 || !self.axial_blur_sigma.is_finite() {
            return Err(CoreError::config(format!(
                "axial_blur_sigma must be >= 0, got {}",
                self.axial_blur_sigma
            )));
        }
        self.noise.validate()?;
        self.artifact.validate()
    }
}

/// How ground-truth patches are drawn from lateral planes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PatchSampler {
    /// Random plane and origin per patch.
    UniformRandom,
    /// Regular grid with the given stride, row-major over each plane.
    Grid { stride: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSamplingConfig {
    /// Patch side M_p in pixels (both LR and GT are M_p x M_p).
    pub patch_size: usize,
    /// Patches drawn per lateral plane (uniform-random sampler).
    pub patches_per_plane: usize,
    pub sampler: PatchSampler,
    /// Patches with standard deviation below this are rejected (empty
    /// resin regions carry no training signal).
    pub min_foreground_std: f64,
}

impl Default for PatchSamplingConfig {
    fn default() -> Self {
        PatchSamplingConfig {
            patch_size: 64,
            patches_per_plane: 4,
            sampler: PatchSampler::UniformRandom,
            min_foreground_std: 0.01,
        }
    }
}

impl PatchSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(CoreError::config(format!(
                "patch_size must be >= 2, got {}",
                self.patch_size
            )));
        }
        if self.patches_per_plane < 1 {
            return Err(CoreError::config("patches_per_plane must be >= 1"));
        }
        if let PatchSampler::Grid { stride } = self.sampler {
            if stride < 1 {
                return Err(CoreError::config("grid stride must be >= 1"));
            }
        }
        if self.min_foreground_std < 0.0 {
            return Err(CoreError::config("min_foreground_std must be >= 0"));
        }
        Ok(())
    }

    /// Cross-module invariant: patches must hold at least two attention
    /// windows per side, or windowed attention degenerates.
    pub fn validate_for_window(&self, window_size: usize) -> Result<()> {
        self.validate()?;
        if self.patch_size < 2 * window_size {
            return Err(CoreError::config(format!(
                "patch_size {} is below twice the model window size {window_size}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Which axial orientation a synthesized LR patch emulates: degradation
/// along patch rows (xz statistics) or along columns (yz statistics,
/// realized by transposing before the row pipeline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairOrientation {
    Rows,
    Columns,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMeta {
    /// z index of the source lateral plane.
    pub plane_z: usize,
    /// (row, col) of the patch origin within the plane.
    pub origin: (usize, usize),
    pub orientation: PairOrientation,
    /// Stream index the pair was derived from.
    pub index: u64,
}

/// One (LR, GT) training example. Both grids are `patch_size` square with
/// values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub lr: Array2<f64>,
    pub gt: Array2<f64>,
    pub meta: PairMeta,
}

/// Extracts GT patches from constant-z (lateral) planes.
///
/// Uniform-random sampling rejects low-variance patches with a bounded
/// retry budget; the grid sampler enumerates all grid origins on every
/// plane and filters low-variance cells out.
pub fn extract_lateral_patches(
    v: &Volume,
    cfg: &PatchSamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Array2<f64>>> {
    cfg.validate()?;
    let (nz, ny, nx) = v.shape();
    let m = cfg.patch_size;
    if ny < m || nx < m {
        return Err(CoreError::config(format!(
            "volume lateral extent ({ny}, {nx}) smaller than patch_size {m}"
        )));
    }

    let mut patches = Vec::new();
    match cfg.sampler {
        PatchSampler::Grid { stride } => {
            for z in 0..nz {
                let plane = v.voxels.index_axis(Axis(0), z);
                let mut r = 0;
                while r + m <= ny {
                    let mut c = 0;
                    while c + m <= nx {
                        let patch = plane.slice(ndarray::s![r..r + m, c..c + m]).to_owned();
                        if patch_std(&patch.view()) >= cfg.min_foreground_std {
                            patches.push(patch);
                        }
                        c += stride;
                    }
                    r += stride;
                }
            }
            if patches.is_empty() {
                return Err(CoreError::config(
                    "grid sampler: every patch fell below min_foreground_std",
                ));
            }
        }
        PatchSampler::UniformRandom => {
            const RETRIES_PER_PATCH: usize = 64;
            for z in 0..nz {
                let plane = v.voxels.index_axis(Axis(0), z);
                for _ in 0..cfg.patches_per_plane {
                    let mut found = false;
                    for _ in 0..RETRIES_PER_PATCH {
                        let r = rng.random_range(0..=ny - m);
                        let c = rng.random_range(0..=nx - m);
                        let patch = plane.slice(ndarray::s![r..r + m, c..c + m]).to_owned();
                        if patch_std(&patch.view()) >= cfg.min_foreground_std {
                            patches.push(patch);
                            found = true;
                            break;
                        }
                    }
                    if !found {
                        return Err(CoreError::config(format!(
                            "plane {z}: could not find a patch with std >= {} in {RETRIES_PER_PATCH} tries",
                            cfg.min_foreground_std
                        )));
                    }
                }
            }
        }
    }
    Ok(patches)
}

fn patch_std(p: &ArrayView2<'_, f64>) -> f64 {
    let n = p.len() as f64;
    let mean = p.sum() / n;
    let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Runs the full degradation pipeline on one GT patch:
/// blur -> row under-sampling by rho -> noise -> artifacts -> cubic resize
/// back to the GT shape, clipped to `[0, 1]`.
pub fn degrade_patch(
    gt: ArrayView2<'_, f64>,
    cfg: &DegradationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let (h, w) = gt.dim();
    if h != w {
        return Err(CoreError::config(format!(
            "degrade_patch expects a square patch, got {h}x{w}"
        )));
    }

    let blurred = gaussian_blur_rows(gt, cfg.axial_blur_sigma);
    let mut low = downsample_axial(blurred.view(), cfg.rho.get(), cfg.kernel)?;
    apply_noise(&mut low, cfg.noise, rng);
    apply_artifact(&mut low, cfg.artifact, rng);
    resize_plane(low.view(), h, w, InterpMethod::Cubic)
}

fn apply_noise(img: &mut Array2<f64>, noise: NoiseModel, rng: &mut ChaCha8Rng) {
    match noise {
        NoiseModel::None => {}
        NoiseModel::Gaussian { sigma } => {
            if sigma > 0.0 {
                for v in img.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += sigma * n;
                }
            }
        }
        NoiseModel::PoissonGaussian { gain, sigma } => {
            for v in img.iter_mut() {
                let shot: f64 = StandardNormal.sample(rng);
                let read: f64 = StandardNormal.sample(rng);
                let shot_sd = (gain * v.max(0.0)).sqrt();
                *v += shot_sd * shot + sigma * read;
            }
        }
    }
}

fn apply_artifact(img: &mut Array2<f64>, artifact: ArtifactModel, rng: &mut ChaCha8Rng) {
    match artifact {
        ArtifactModel::None => {}
        ArtifactModel::Stripe { amplitude, period } => {
            if amplitude > 0.0 {
                let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                for (r, mut row) in img.rows_mut().into_iter().enumerate() {
                    let offset =
                        amplitude * (2.0 * std::f64::consts::PI * r as f64 / period + phase).sin();
                    row.mapv_inplace(|v| v + offset);
                }
            }
        }
        ArtifactModel::DropoutLines { probability } => {
            for mut row in img.rows_mut() {
                if rng.random_bool(probability) {
                    row.fill(0.0);
                }
            }
        }
    }
}

/// Reproducible pair stream: `pair(i)` is a pure function of the
/// synthesizer's configuration and `i`, so any worker may compute any
/// index independently.
pub struct PairSynthesizer {
    volume: Volume,
    sampling: PatchSamplingConfig,
    degradation: DegradationConfig,
}

impl PairSynthesizer {
    pub fn new(
        volume: Volume,
        sampling: PatchSamplingConfig,
        degradation: DegradationConfig,
    ) -> Result<Self> {
        sampling.validate()?;
        degradation.validate()?;
        let (_, ny, nx) = volume.shape();
        if ny < sampling.patch_size || nx < sampling.patch_size {
            return Err(CoreError::config(format!(
                "volume lateral extent ({ny}, {nx}) smaller than patch_size {}",
                sampling.patch_size
            )));
        }
        Ok(PairSynthesizer {
            volume,
            sampling,
            degradation,
        })
    }

    pub fn sampling(&self) -> &PatchSamplingConfig {
        &self.sampling
    }

    pub fn degradation(&self) -> &DegradationConfig {
        &self.degradation
    }

    /// Synthesizes the `index`-th pair of the stream.
    pub fn pair(&self, index: u64) -> Result<TrainingPair> {
        // Independent RNG stream per index: same master seed, stream = index.
        let mut rng = ChaCha8Rng::seed_from_u64(self.degradation.seed);
        rng.set_stream(index);

        let (nz, ny, nx) = self.volume.shape();
        let m = self.sampling.patch_size;

        const RETRIES: usize = 64;
        let mut chosen: Option<(usize, usize, usize)> = None;
        for _ in 0..RETRIES {
            let (z, r, c) = match self.sampling.sampler {
                PatchSampler::UniformRandom => (
                    rng.random_range(0..nz),
                    rng.random_range(0..=ny - m),
                    rng.random_range(0..=nx - m),
                ),
                PatchSampler::Grid { stride } => {
                    let per_row = (nx - m) / stride + 1;
                    let per_col = (ny - m) / stride + 1;
                    let cells = per_row * per_col;
                    let cell = (index as usize) % (cells * nz);
                    let z = cell / cells;
                    let within = cell % cells;
                    (z, (within / per_row) * stride, (within % per_row) * stride)
                }
            };
            let plane = self.volume.voxels.index_axis(Axis(0), z);
            let patch = plane.slice(ndarray::s![r..r + m, c..c + m]);
            if patch_std(&patch) >= self.sampling.min_foreground_std {
                chosen = Some((z, r, c));
                break;
            }
            if matches!(self.sampling.sampler, PatchSampler::Grid { .. }) {
                // Grid cells are deterministic; a rejected cell cannot be
                // retried into acceptance.
                break;
            }
        }
        let Some((z, r, c)) = chosen else {
            return Err(CoreError::config(format!(
                "pair {index}: no patch met min_foreground_std {}",
                self.sampling.min_foreground_std
            )));
        };

        let plane = self.volume.voxels.index_axis(Axis(0), z);
        let mut gt = plane.slice(ndarray::s![r..r + m, c..c + m]).to_owned();
        let orientation = if rng.random_bool(0.5) {
            PairOrientation::Rows
        } else {
            PairOrientation::Columns
        };
        if orientation == PairOrientation::Columns {
            gt = gt.t().to_owned();
        }
        let lr = degrade_patch(gt.view(), &self.degradation, &mut rng)?;
        Ok(TrainingPair {
            lr,
            gt,
            meta: PairMeta {
                plane_z: z,
                origin: (r, c),
                orientation,
                index,
            },
        })
    }

    /// Convenience: the first `count` pairs of the stream, in order.
    pub fn take(&self, count: u64) -> Result<Vec<TrainingPair>> {
        (0..count).map(|i| self.pair(i)).collect()
    }
}

// ---- on-disk pair cache ----------------------------------------------------

/// Manifest written alongside an exported pair cache.
#[derive(Debug, Serialize, Deserialize)]
pub struct PairCacheManifest {
    pub count: u64,
    pub patch_size: usize,
    pub sampling: PatchSamplingConfig,
    pub degradation: DegradationConfig,
}

/// Exports `count` pairs as 16-bit grayscale PNGs (`pair_<i>_lr.png` /
/// `pair_<i>_gt.png`) plus a JSON manifest, for inspection or external
/// consumption.
pub fn save_pair_cache(synth: &PairSynthesizer, count: u64, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for i in 0..count {
        let pair = synth.pair(i)?;
        write_png16(&pair.lr, &dir.join(format!("pair_{i:06}_lr.png")))?;
        write_png16(&pair.gt, &dir.join(format!("pair_{i:06}_gt.png")))?;
    }
    let manifest = PairCacheManifest {
        count,
        patch_size: synth.sampling.patch_size,
        sampling: synth.sampling.clone(),
        degradation: synth.degradation.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
}

/// Loads an exported pair cache back into memory.
pub fn load_pair_cache(dir: &std::path::Path) -> Result<(PairCacheManifest, Vec<TrainingPair>)> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| CoreError::io(&manifest_path, e))?;
    let manifest: PairCacheManifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::format(&manifest_path, format!("invalid manifest: {e}")))?;
    let mut pairs = Vec::with_capacity(manifest.count as usize);
    for i in 0..manifest.count {
        let lr = read_png16(&dir.join(format!("pair_{i:06}_lr.png")))?;
        let gt = read_png16(&dir.join(format!("pair_{i:06}_gt.png")))?;
        pairs.push(TrainingPair {
            lr,
            gt,
            meta: PairMeta {
                plane_z: 0,
                origin: (0, 0),
                orientation: PairOrientation::Rows,
                index: i,
            },
        });
    }
    Ok((manifest, pairs))
}

fn write_png16(img: &Array2<f64>, path: &std::path::Path) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for ((r, c), &v) in img.indexed_iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.put_pixel(c as u32, r as u32, image::Luma([q]));
    }
    buf.save(path)
        .map_err(|e| CoreError::format(path, format!("PNG write failed: {e}")))
}

fn read_png16(path: &std::path::Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| CoreError::format(path, format!("PNG read failed: {e}")))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / 65535.0
    }))
}
