//! `isosr synthesize`: export a cache of (LR, GT) training pairs.

use std::path::PathBuf;

use clap::Args as ClapArgs;

use isosr_core::degrade::{save_pair_cache, PairSynthesizer};
use isosr_core::Result;

use crate::config::RunConfig;
use crate::provenance::{write_provenance, FileStamp, Provenance};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Input volume to draw lateral ground-truth patches from.
    #[arg(long, short = 'i')]
    pub input: Option<PathBuf>,
    /// Output directory for the pair cache.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Number of pairs to export.
    #[arg(long, default_value_t = 256)]
    pub count: u64,
    /// Override degradation.rho.
    #[arg(long)]
    pub rho: Option<f64>,
}

pub fn run(cfg: &mut RunConfig, args: &Args) -> Result<()> {
    let input = super::resolve_path(&args.input, &cfg.io.input, "input")?;
    let output = super::resolve_path(&args.output, &cfg.io.output, "output")?;
    if let Some(rho) = args.rho {
        cfg.degradation.rho = Some(rho);
    }

    let volume = super::load_input_volume(&input, &cfg.io)?;
    let volume_rho = volume.anisotropy_ratio().ok().map(|r| r.get());
    let degradation = cfg.degradation.resolve(volume_rho)?;
    cfg.degradation.pin(&degradation);

    let synthesizer = PairSynthesizer::new(volume, cfg.sampling.clone(), degradation)?;
    save_pair_cache(&synthesizer, args.count, &output)?;

    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("volume", FileStamp::of(&input)?);
    let prov = Provenance {
        command: "synthesize",
        parameters: serde_json::json!({ "count": args.count }),
        config: cfg,
        inputs,
    };
    write_provenance(&output, true, &prov)?;

    println!(
        "synthesize: wrote {} pairs (patch {}) -> {}",
        args.count,
        cfg.sampling.patch_size,
        output.display()
    );
    Ok(())
}
