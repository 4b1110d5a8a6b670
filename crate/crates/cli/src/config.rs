//! Declarative run configuration.
//!
//! One file (TOML or JSON) describes a whole pipeline run. Every field
//! has a default, every section can be overridden by command-line flags,
//! and the fully resolved configuration is echoed into each artifact's
//! provenance record, so a run can be reproduced from its outputs alone.
//! Unknown keys are rejected rather than ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use isosr_core::degrade::{ArtifactModel, DegradationConfig, NoiseModel, PatchSamplingConfig};
use isosr_core::io::BitDepth;
use isosr_core::losses::LossConfig;
use isosr_core::model::ModelConfig;
use isosr_core::reconstruct::ReconstructionOptions;
use isosr_core::resample::DownsampleKernel;
use isosr_core::trainer::TrainConfig;
use isosr_core::{AnisotropyRatio, CoreError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub io: IoSection,
    pub sampling: PatchSamplingConfig,
    pub degradation: DegradationSection,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub reconstruct: ReconstructionOptions,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Loads a configuration file; the format follows the extension
    /// (`.json` is JSON, everything else is treated as TOML).
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let is_json = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| CoreError::config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| CoreError::config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Section-local validation; cross-section constraints (for example
    /// patch size versus attention window) are checked by the commands
    /// that rely on them.
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.degradation.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.reconstruct.validate()?;
        self.eval.validate()
    }

    /// Applies the global `--seed` flag: one master seed drives every
    /// seeded section.
    pub fn apply_master_seed(&mut self, seed: u64) {
        self.degradation.seed = seed;
        self.train.seed = seed;
    }
}

/// File handling shared by all subcommands. `input`/`output` act as
/// defaults for the corresponding flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Bit depth for volumes this run writes.
    pub depth: BitDepth,
    /// Dataset path inside HDF5 containers.
    pub h5_dataset: String,
    /// Voxel spacing `[z, y, x]` in nm, used only for inputs that carry
    /// no spacing metadata of their own.
    pub spacing_nm: Option<[f64; 3]>,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            input: None,
            output: None,
            depth: BitDepth::U8,
            h5_dataset: isosr_core::io::DEFAULT_H5_DATASET.to_string(),
            spacing_nm: None,
        }
    }
}

/// Degradation recipe with data-dependent fields left optional: `rho`
/// defaults to the input volume's own anisotropy (sz/sx) and the axial
/// blur defaults to `rho / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSection {
    pub rho: Option<f64>,
    pub axial_blur_sigma: Option<f64>,
    pub kernel: DownsampleKernel,
    pub noise: NoiseModel,
    pub artifact: ArtifactModel,
    pub seed: u64,
}

impl Default for DegradationSection {
    fn default() -> Self {
        DegradationSection {
            rho: None,
            axial_blur_sigma: None,
            kernel: DownsampleKernel::BoxAverage,
            noise: NoiseModel::Gaussian { sigma: 0.02 },
            artifact: ArtifactModel::None,
            seed: 0,
        }
    }
}

impl DegradationSection {
    /// What can be checked without knowing the input volume.
    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.rho {
            if !(rho.is_finite() && rho >= 1.0) {
                return Err(CoreError::config(format!(
                    "degradation.rho must be >= 1, got {rho}"
                )));
            }
        }
        if let Some(sigma) = self.axial_blur_sigma {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(CoreError::config(format!(
                    "degradation.axial_blur_sigma must be >= 0, got {sigma}"
                )));
            }
        }
        self.noise.validate()?;
        self.artifact.validate()
    }

    /// Fills the data-dependent fields. `volume_rho` is the input
    /// volume's own sz/sx ratio, used when the config does not pin one.
    pub fn resolve(&self, volume_rho: Option<f64>) -> Result<DegradationConfig> {
        let rho = match self.rho.or(volume_rho) {
            Some(r) => AnisotropyRatio::new(r)?,
            None => {
                return Err(CoreError::config(
                    "anisotropy ratio unavailable: set degradation.rho (or --rho) \
                     or provide an input volume with anisotropic spacing",
                ))
            }
        };
        let cfg = DegradationConfig {
            rho,
            axial_blur_sigma: self.axial_blur_sigma.unwrap_or(rho.get() / 2.0),
            kernel: self.kernel,
            noise: self.noise,
            artifact: self.artifact,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes the resolved values back, so the echoed config reproduces
    /// the run even without the original input volume.
    pub fn pin(&mut self, resolved: &DegradationConfig) {
        self.rho = Some(resolved.rho.get());
        self.axial_blur_sigma = Some(resolved.axial_blur_sigma);
        self.kernel = resolved.kernel;
        self.noise = resolved.noise;
        self.artifact = resolved.artifact;
        self.seed = resolved.seed;
    }
}

/// Synthetic-evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Axial slices trimmed from each end before comparison (boundary
    /// interpolation effects are not representative).
    pub axial_margin: usize,
    /// Emit center-plane preview PNGs alongside the report.
    pub previews: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            axial_margin: isosr_core::metrics::DEFAULT_AXIAL_MARGIN,
            previews: true,
        }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        Ok(())
    }
}
