//! `isosr evaluate`: synthetic evaluation against isotropic ground truth.
//!
//! The ground truth is degraded axially by `rho`, restored, and compared
//! (PSNR/SSIM) against both the cubic baseline and the original. Outputs:
//! `<stem>.json` (machine-readable report), `<stem>.txt` (table), and
//! optional center-plane preview PNGs.

use std::path::PathBuf;

use clap::Args as ClapArgs;

use isosr_core::checkpoint::load_checkpoint;
use isosr_core::metrics::{evaluate_synthetic, save_xz_previews};
use isosr_core::reconstruct::{reconstruct_volume, IdentityPredictor, ModelPredictor, PlanePredictor};
use isosr_core::resample::downsample_volume_axial;
use isosr_core::{CoreError, Result};

use crate::config::RunConfig;
use crate::provenance::{write_provenance, FileStamp, Provenance};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Isotropic ground-truth volume.
    #[arg(long, short = 'i')]
    pub input: Option<PathBuf>,
    /// Trained checkpoint; omitted, the identity model is evaluated
    /// (its rows must then match the cubic baseline exactly).
    #[arg(long, short = 'c')]
    pub checkpoint: Option<PathBuf>,
    /// Output stem: writes `<stem>.json` and `<stem>.txt`.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Synthetic axial under-sampling factor (overrides degradation.rho).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Also save the restored volume to this path.
    #[arg(long)]
    pub save_restored: Option<PathBuf>,
}

pub fn run(cfg: &mut RunConfig, args: &Args) -> Result<()> {
    let input = super::resolve_path(&args.input, &cfg.io.input, "input")?;
    let stem = super::resolve_path(&args.output, &cfg.io.output, "output")?;
    if let Some(rho) = args.rho {
        cfg.degradation.rho = Some(rho);
    }

    let gt = super::load_input_volume(&input, &cfg.io)?;
    // The ground truth is isotropic, so rho cannot be inferred from it;
    // it must be configured explicitly.
    let degradation = cfg.degradation.resolve(None)?;
    cfg.degradation.pin(&degradation);

    let ckpt = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let predictor: Box<dyn PlanePredictor> = match &ckpt {
        Some(c) => Box::new(ModelPredictor {
            cfg: &c.meta.model,
            params: &c.params,
        }),
        None => Box::new(IdentityPredictor),
    };

    let (report, restored) = evaluate_synthetic(
        &gt,
        &degradation,
        predictor.as_ref(),
        &cfg.reconstruct,
        cfg.eval.axial_margin,
    )?;

    let dir = stem
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(|d| d.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    let stem_name = stem
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CoreError::config("output stem has no file name"))?
        .to_string();

    let json_path = dir.join(format!("{stem_name}.json"));
    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| CoreError::format(&json_path, e.to_string()))?;
    json.push('\n');
    std::fs::write(&json_path, &json).map_err(|e| CoreError::io(&json_path, e))?;

    let table = report.render_table();
    let txt_path = dir.join(format!("{stem_name}.txt"));
    std::fs::write(&txt_path, &table).map_err(|e| CoreError::io(&txt_path, e))?;

    if cfg.eval.previews {
        // The cubic baseline volume is re-derived for its preview; the
        // metric comparison above already used the identical pipeline.
        let down = downsample_volume_axial(&gt, degradation.rho.get(), degradation.kernel)?;
        let cubic = reconstruct_volume(&down, &IdentityPredictor, &cfg.reconstruct)?;
        save_xz_previews(
            &dir,
            &stem_name,
            &[("gt", &gt), ("cubic", &cubic), ("restored", &restored)],
        )?;
    }

    if let Some(path) = &args.save_restored {
        super::save_output_volume(&restored, path, &cfg.io)?;
    }

    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("ground_truth", FileStamp::of(&input)?);
    if let Some(ckpt_path) = &args.checkpoint {
        inputs.insert("checkpoint", FileStamp::of(ckpt_path)?);
    }
    let prov = Provenance {
        command: "evaluate",
        parameters: serde_json::json!({
            "predictor": if ckpt.is_some() { "model" } else { "identity" },
            "checkpoint_step": ckpt.as_ref().map(|c| c.meta.step),
            "axial_margin": cfg.eval.axial_margin,
        }),
        config: cfg,
        inputs,
    };
    write_provenance(&json_path, false, &prov)?;

    print!("{table}");
    println!("evaluate: report -> {}", json_path.display());
    Ok(())
}
