//! `isosr reconstruct`: apply a trained checkpoint to a volume.

use std::path::PathBuf;

use clap::Args as ClapArgs;

use isosr_core::checkpoint::load_checkpoint;
use isosr_core::reconstruct::{reconstruct_volume, ModelPredictor};
use isosr_core::{CoreError, Result};

use crate::config::RunConfig;
use crate::provenance::{write_provenance, FileStamp, Provenance};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Input (anisotropic) volume.
    #[arg(long, short = 'i')]
    pub input: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long, short = 'c')]
    pub checkpoint: PathBuf,
    /// Output volume path.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
}

pub fn run(cfg: &mut RunConfig, args: &Args) -> Result<()> {
    let input = super::resolve_path(&args.input, &cfg.io.input, "input")?;
    let output = super::resolve_path(&args.output, &cfg.io.output, "output")?;

    let volume = super::load_input_volume(&input, &cfg.io)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;

    // Axial planes must comfortably hold the network's receptive
    // structure after isotropization; report both geometries when the
    // volume is too small for the checkpointed model.
    let divisor = ckpt.meta.model.size_divisor();
    let (nz, ny, nx) = volume.shape();
    let rho = volume.anisotropy_ratio()?.get();
    let iso_z = ((nz - 1) as f64 * rho).round() as usize + 1;
    for (axis, len) in [("z (isotropized)", iso_z), ("y", ny), ("x", nx)] {
        if 2 * len <= divisor {
            return Err(CoreError::config(format!(
                "volume too small for this checkpoint: {axis} extent {len} cannot be \
                 padded to the model's size divisor {divisor} (volume {nz}x{ny}x{nx} at \
                 rho {rho:.3}; model window {}, {} levels)",
                ckpt.meta.model.window_size, ckpt.meta.model.levels
            )));
        }
    }

    let predictor = ModelPredictor {
        cfg: &ckpt.meta.model,
        params: &ckpt.params,
    };
    let restored = reconstruct_volume(&volume, &predictor, &cfg.reconstruct)?;
    super::save_output_volume(&restored, &output, &cfg.io)?;

    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("volume", FileStamp::of(&input)?);
    inputs.insert("checkpoint", FileStamp::of(&args.checkpoint)?);
    let prov = Provenance {
        command: "reconstruct",
        parameters: serde_json::json!({
            "checkpoint_step": ckpt.meta.step,
            "input_shape": [nz, ny, nx],
            "input_spacing_nm": volume.spacing.as_array(),
            "output_shape": [restored.shape().0, restored.shape().1, restored.shape().2],
            "output_spacing_nm": restored.spacing.as_array(),
        }),
        config: cfg,
        inputs,
    };
    write_provenance(&output, false, &prov)?;

    println!(
        "reconstruct: {:?} at {:?} nm -> {:?} at {:?} nm -> {}",
        volume.shape(),
        volume.spacing.as_array(),
        restored.shape(),
        restored.spacing.as_array(),
        output.display()
    );
    Ok(())
}
