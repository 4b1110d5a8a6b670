//! `isosr train`: self-supervised training on one anisotropic volume.
//!
//! The validation stream is held out by construction: it synthesizes
//! pairs with the degradation seed + 1, so it never overlaps the
//! training stream no matter how long the run is.

use std::path::PathBuf;

use clap::Args as ClapArgs;

use isosr_core::checkpoint::load_checkpoint;
use isosr_core::degrade::PairSynthesizer;
use isosr_core::trainer::{train, TrainOptions};
use isosr_core::Result;

use crate::config::RunConfig;
use crate::provenance::{write_provenance, FileStamp, Provenance};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Input (anisotropic) volume to train on.
    #[arg(long, short = 'i')]
    pub input: Option<PathBuf>,
    /// Output directory: checkpoints plus `train_log.jsonl`.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override train.total_steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override train.batch_size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override train.lr.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override sampling.patch_size.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Override degradation.rho.
    #[arg(long)]
    pub rho: Option<f64>,
}

pub fn run(cfg: &mut RunConfig, args: &Args) -> Result<()> {
    let input = super::resolve_path(&args.input, &cfg.io.input, "input")?;
    let output = super::resolve_path(&args.output, &cfg.io.output, "output")?;
    if let Some(v) = args.steps {
        cfg.train.total_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.patch_size {
        cfg.sampling.patch_size = v;
    }
    if let Some(v) = args.rho {
        cfg.degradation.rho = Some(v);
    }
    cfg.train.validate()?;
    cfg.sampling.validate_for_window(cfg.model.window_size)?;

    let volume = super::load_input_volume(&input, &cfg.io)?;
    let volume_rho = volume.anisotropy_ratio().ok().map(|r| r.get());
    let degradation = cfg.degradation.resolve(volume_rho)?;
    cfg.degradation.pin(&degradation);

    let stream = PairSynthesizer::new(volume.clone(), cfg.sampling.clone(), degradation.clone())?;
    let mut val_degradation = degradation;
    val_degradation.seed = val_degradation.seed.wrapping_add(1);
    let val_stream = PairSynthesizer::new(volume, cfg.sampling.clone(), val_degradation)?;

    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;

    let outcome = train(
        &cfg.model,
        &cfg.loss,
        &cfg.train,
        &stream,
        TrainOptions {
            checkpoint_dir: Some(output.clone()),
            log_path: Some(output.join("train_log.jsonl")),
            resume,
            val_stream: Some(&val_stream),
        },
    )?;

    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("volume", FileStamp::of(&input)?);
    if let Some(resume_path) = &args.resume {
        inputs.insert("resume_checkpoint", FileStamp::of(resume_path)?);
    }
    let prov = Provenance {
        command: "train",
        parameters: serde_json::json!({
            "steps_completed": outcome.checkpoint.meta.step,
            "steps_this_run": outcome.history.len(),
        }),
        config: cfg,
        inputs,
    };
    write_provenance(&output, true, &prov)?;

    let final_loss = outcome.history.last().map(|r| r.loss);
    let last_val = outcome.validations.last();
    println!(
        "train: {} steps complete; final loss {}; checkpoint -> {}",
        outcome.checkpoint.meta.step,
        final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}")),
        output.join("final.ckpt").display()
    );
    if let Some(val) = last_val {
        println!(
            "train: validation at step {}: loss {:.6}, psnr {}",
            val.step,
            val.summary.loss,
            val.summary
                .psnr_db
                .map_or("inf".to_string(), |p| format!("{p:.2} dB"))
        );
    }
    Ok(())
}
