//! `isosr phantom`: deterministic synthetic EM-like test volumes.

use std::path::PathBuf;

use clap::Args as ClapArgs;

use isosr_core::phantom::generate_phantom_volume;
use isosr_core::{Result, Spacing};

use crate::config::RunConfig;
use crate::provenance::{write_provenance, Provenance};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Output volume path (.tif/.tiff, .h5/.hdf5, or .raw).
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Volume shape: one side length for a cube, or Z,Y,X.
    #[arg(long, default_value = "64", value_parser = super::parse_size)]
    pub size: (usize, usize, usize),
    /// Characteristic structure (cell) scale in voxels.
    #[arg(long, default_value_t = 12.0)]
    pub scale: f64,
    /// Voxel spacing stamped on the output: one number or Z,Y,X in nm.
    #[arg(long, value_parser = super::parse_spacing)]
    pub spacing: Option<[f64; 3]>,
}

pub fn run(cfg: &RunConfig, args: &Args, seed: u64) -> Result<()> {
    let output = super::resolve_path(&args.output, &cfg.io.output, "output")?;
    let mut volume = generate_phantom_volume(args.size, args.scale, seed)?;
    if let Some(sp) = args.spacing {
        volume.spacing = Spacing::from_array(sp)?;
    }
    super::save_output_volume(&volume, &output, &cfg.io)?;

    let prov = Provenance {
        command: "phantom",
        parameters: serde_json::json!({
            "size": [args.size.0, args.size.1, args.size.2],
            "scale": args.scale,
            "seed": seed,
            "spacing_nm": volume.spacing.as_array(),
        }),
        config: cfg,
        inputs: Default::default(),
    };
    write_provenance(&output, false, &prov)?;

    println!(
        "phantom: wrote {} voxels {:?} at spacing {:?} nm -> {}",
        volume.voxels.len(),
        volume.shape(),
        volume.spacing.as_array(),
        output.display()
    );
    Ok(())
}
