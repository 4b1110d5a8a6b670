//! Self-supervised training: Adam over synthesized (LR, GT) pairs.
//!
//! The loop is deterministic by construction: every random draw — which
//! pair feeds a batch slot and how that pair is augmented — comes from an
//! RNG stream keyed by the *global pair index*, and the index consumed at
//! step `t`, slot `i` is simply `t * batch_size + i`. Training state is
//! therefore a pure function of `(seed, configs, step)`, which is what
//! makes checkpoint resume bit-exact: a checkpoint stores the step count
//! and master seed, and the resumed run replays the identical stream.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use isosr_autograd::{Arr, Tape};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
use crate::degrade::{PairSynthesizer, TrainingPair};
use crate::error::{CoreError, Result};
use crate::losses::{l1_loss, pdl_loss, projection_directions, training_loss, LossConfig};
use crate::metrics::{psnr, DATA_RANGE};
use crate::model::{forward_batch, init_params, predict_plane, ModelConfig, ModelVars, ParamSet};

/// Decouples augmentation draws from the pair-synthesis streams that are
/// seeded with the same master seed.
const AUGMENT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Learning-rate schedule over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    /// The initial learning rate throughout.
    #[default]
    Constant,
    /// Half-cosine decay from the initial rate towards zero at the end of
    /// the run.
    CosineToZero,
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr_schedule: LrSchedule,
    /// Random flips / quarter-turn rotations of each pair (lateral planes
    /// carry no preferred orientation, so the symmetrized distribution is
    /// equally valid).
    pub augment: bool,
    /// Optional global-norm gradient clipping threshold. Off by default:
    /// a diverging run should abort visibly rather than be papered over.
    pub grad_clip: Option<f64>,
    /// Validate every this many steps; 0 disables periodic validation.
    pub val_every: u64,
    /// Held-out pairs per validation pass.
    pub val_pairs: u64,
    /// Write a checkpoint every this many steps; 0 keeps only the final
    /// state.
    pub checkpoint_every: u64,
    /// Master seed for parameter init, batch augmentation, and (via the
    /// caller's pair stream) data synthesis.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            total_steps: 50_000,
            lr_schedule: LrSchedule::Constant,
            augment: true,
            grad_clip: None,
            val_every: 500,
            val_pairs: 8,
            checkpoint_every: 5_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A small profile for smoke tests and quick experiments.
    pub fn tiny() -> Self {
        TrainConfig {
            batch_size: 4,
            total_steps: 500,
            val_every: 100,
            val_pairs: 4,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(CoreError::config(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(CoreError::config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("batch_size must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(CoreError::config("total_steps must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(CoreError::config(format!(
                    "grad_clip must be positive when set, got {c}"
                )));
            }
        }
        if self.val_every > 0 && self.val_pairs == 0 {
            return Err(CoreError::config(
                "val_pairs must be at least 1 when validation is enabled",
            ));
        }
        Ok(())
    }

    /// Learning rate applied at 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::CosineToZero => {
                let progress = step as f64 / self.total_steps as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

// ---- pair streams -----------------------------------------------------------

/// A reproducible, conceptually infinite source of training pairs. The
/// `index`-th pair must depend only on the stream's own configuration, so
/// that any slice of the stream can be recomputed independently (this is
/// what lets batches be synthesized concurrently and runs be resumed).
pub trait PairStream: Sync {
    fn pair(&self, index: u64) -> Result<TrainingPair>;
}

impl PairStream for PairSynthesizer {
    fn pair(&self, index: u64) -> Result<TrainingPair> {
        PairSynthesizer::pair(self, index)
    }
}

/// An in-memory pair list, either cycled indefinitely or treated as a
/// finite stream that errors on exhaustion.
pub struct CachedPairs {
    pairs: Vec<TrainingPair>,
    cycle: bool,
}

impl CachedPairs {
    pub fn cycling(pairs: Vec<TrainingPair>) -> Result<Self> {
        Self::new(pairs, true)
    }

    pub fn finite(pairs: Vec<TrainingPair>) -> Result<Self> {
        Self::new(pairs, false)
    }

    fn new(pairs: Vec<TrainingPair>, cycle: bool) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CoreError::config("pair cache is empty"));
        }
        let side = pairs[0].gt.dim();
        for p in &pairs {
            if p.gt.dim() != side || p.lr.dim() != side {
                return Err(CoreError::config(
                    "pair cache mixes patch sizes; all pairs must match",
                ));
            }
        }
        Ok(CachedPairs { pairs, cycle })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl PairStream for CachedPairs {
    fn pair(&self, index: u64) -> Result<TrainingPair> {
        let n = self.pairs.len() as u64;
        if self.cycle {
            Ok(self.pairs[(index % n) as usize].clone())
        } else if index < n {
            Ok(self.pairs[index as usize].clone())
        } else {
            Err(CoreError::config(format!(
                "pair stream exhausted at index {index}: {n} pairs available and cycling is disabled"
            )))
        }
    }
}

// ---- augmentation -----------------------------------------------------------

/// One of the eight axis-aligned symmetries of a square grid:
/// `k % 4` counter-clockwise quarter turns, then a horizontal mirror if
/// `k >= 4`. `k = 0` is the identity.
fn dihedral(a: &Array2<f64>, k: u8) -> Array2<f64> {
    debug_assert!(k < 8);
    let mut out = a.clone();
    for _ in 0..(k % 4) {
        // CCW quarter turn: transpose, then reverse rows.
        out = out
            .t()
            .slice(ndarray::s![..;-1, ..])
            .as_standard_layout()
            .into_owned();
    }
    if k >= 4 {
        out = out
            .slice(ndarray::s![.., ..;-1])
            .as_standard_layout()
            .into_owned();
    }
    out
}

/// Deterministic augmentation choice for the pair at `global_index`.
fn augmentation_for(seed: u64, global_index: u64) -> u8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SEED_SALT);
    rng.set_stream(global_index);
    rng.random_range(0..8)
}

/// Fetches and augments the batch for 0-based `step`. Slot `i` holds the
/// stream's pair `step * batch_size + i`; synthesis runs concurrently but
/// the result is identical for any worker count.
fn assemble_batch(
    stream: &dyn PairStream,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Array3<f64>, Array3<f64>, Vec<u64>)> {
    let b = cfg.batch_size;
    let start = step * b as u64;
    let indices: Vec<u64> = (0..b as u64).map(|i| start + i).collect();
    let pairs: Vec<(Array2<f64>, Array2<f64>)> = indices
        .par_iter()
        .map(|&idx| {
            let pair = stream.pair(idx)?;
            if cfg.augment {
                let k = augmentation_for(cfg.seed, idx);
                Ok((dihedral(&pair.lr, k), dihedral(&pair.gt, k)))
            } else {
                Ok((pair.lr, pair.gt))
            }
        })
        .collect::<Result<_>>()?;

    let side = pairs[0].0.dim();
    let mut lr = Array3::zeros((b, side.0, side.1));
    let mut gt = Array3::zeros((b, side.0, side.1));
    for (i, (l, g)) in pairs.iter().enumerate() {
        if l.dim() != side || g.dim() != side {
            return Err(CoreError::config(
                "pair stream yielded mixed patch sizes within one batch",
            ));
        }
        lr.index_axis_mut(Axis(0), i).assign(l);
        gt.index_axis_mut(Axis(0), i).assign(g);
    }
    Ok((lr, gt, indices))
}

// ---- Adam -------------------------------------------------------------------

/// First/second-moment accumulators, aligned with the parameter set by
/// name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, value) in params.iter() {
            m.insert(name, Arr::zeros(value.raw_dim()));
            v.insert(name, Arr::zeros(value.raw_dim()));
        }
        AdamState { m, v }
    }
}

/// One bias-corrected Adam update. `t` is the 1-based count of updates
/// including this one; `lr` is the already-scheduled rate for this step.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    grads: &[(String, Arr)],
    cfg: &TrainConfig,
    lr: f64,
    t: u64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in grads {
        let m = state.m.get_mut(name);
        m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
        let v = state.v.get_mut(name);
        v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);

        let p = params.get_mut(name);
        ndarray::Zip::from(p)
            .and(&*state.m.get(name))
            .and(&*state.v.get(name))
            .for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
            });
    }
}

/// Scales gradients in place so their global L2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm.
fn clip_global_norm(grads: &mut [(String, Arr)], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

// ---- training loop ---------------------------------------------------------

/// Per-step log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based count of completed updates.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub pdl: f64,
    /// Global gradient norm before any clipping.
    pub grad_norm: f64,
}

/// Validation summary: loss terms over the stacked held-out batch plus
/// PSNR of predictions against ground truth (`None` means infinite, i.e.
/// an exact match).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub pairs: u64,
    pub loss: f64,
    pub l1: f64,
    pub pdl: f64,
    pub psnr_db: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    #[serde(flatten)]
    pub summary: ValidationSummary,
}

/// Optional side outputs of a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for cadence checkpoints (`step_XXXXXX.ckpt`, plus
    /// `final.ckpt`) and non-finite-loss diagnostics.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSONL log: one `{"kind":"step",...}` line per update and one
    /// `{"kind":"val",...}` line per validation pass.
    pub log_path: Option<PathBuf>,
    /// Resume from a previously saved checkpoint; configs must match and
    /// the run continues at the recorded step.
    pub resume: Option<Checkpoint>,
    /// Held-out source for periodic validation; pairs `0..val_pairs` of
    /// this stream are used at every pass.
    pub val_stream: Option<&'a dyn PairStream>,
}

/// A finished (or fully resumed) training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One record per update performed by *this* call (a resumed run only
    /// holds the steps it ran itself).
    pub history: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
}

struct LogSink {
    writer: Option<BufWriter<File>>,
    path: PathBuf,
}

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(LogSink {
                writer: None,
                path: PathBuf::new(),
            }),
            Some(p) => {
                let file = File::create(p).map_err(|e| CoreError::io(p, e))?;
                Ok(LogSink {
                    writer: Some(BufWriter::new(file)),
                    path: p.to_path_buf(),
                })
            }
        }
    }

    fn record(&mut self, kind: &str, value: impl Serialize) -> Result<()> {
        let Some(w) = self.writer.as_mut() else {
            return Ok(());
        };
        let mut line = serde_json::json!({ "kind": kind });
        let body = serde_json::to_value(value).expect("log records serialize");
        line.as_object_mut()
            .expect("object literal")
            .extend(body.as_object().cloned().expect("record is an object"));
        writeln!(w, "{line}").map_err(|e| CoreError::io(&self.path, e))
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush().map_err(|e| CoreError::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Serialized alongside the error when a step produces a non-finite loss
/// or gradient, so the offending batch can be inspected offline.
#[derive(Serialize)]
struct BatchDump {
    step: u64,
    indices: Vec<u64>,
    reason: String,
    patch_size: usize,
    lr_min: f64,
    lr_max: f64,
    gt_min: f64,
    gt_max: f64,
    /// Row-major `[batch, h, w]` payloads.
    lr: Vec<f64>,
    gt: Vec<f64>,
}

fn dump_bad_batch(
    dir: Option<&Path>,
    step: u64,
    indices: &[u64],
    reason: &str,
    lr: &Array3<f64>,
    gt: &Array3<f64>,
) -> String {
    let span = |a: &Array3<f64>| {
        a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, &x| {
            (acc.0.min(x), acc.1.max(x))
        })
    };
    let (lr_min, lr_max) = span(lr);
    let (gt_min, gt_max) = span(gt);
    let Some(dir) = dir else {
        return format!(
            "{reason} at step {step} (pair indices {indices:?}; lr range [{lr_min}, {lr_max}], \
             gt range [{gt_min}, {gt_max}]; no checkpoint dir, batch not dumped)"
        );
    };
    let dump = BatchDump {
        step,
        indices: indices.to_vec(),
        reason: reason.to_string(),
        patch_size: lr.dim().1,
        lr_min,
        lr_max,
        gt_min,
        gt_max,
        lr: lr.iter().cloned().collect(),
        gt: gt.iter().cloned().collect(),
    };
    let path = dir.join(format!("bad_batch_step_{step:06}.json"));
    match File::create(&path)
        .map_err(|e| CoreError::io(&path, e))
        .and_then(|f| {
            serde_json::to_writer(BufWriter::new(f), &dump)
                .map_err(|e| CoreError::format(&path, e.to_string()))
        }) {
        Ok(()) => format!("{reason} at step {step}; offending batch dumped to {}", path.display()),
        Err(e) => format!("{reason} at step {step}; batch dump failed ({e})"),
    }
}

fn snapshot(
    model: &ModelConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    step: u64,
    params: &ParamSet,
    adam: &AdamState,
    directions: &Array2<f64>,
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: model.clone(),
            loss: loss.clone(),
            step,
            seed: cfg.seed,
        },
        params: params.clone(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
        directions: directions.clone(),
    }
}

/// Runs (or resumes) self-supervised training and returns the final
/// state. Deterministic for a fixed `(seed, configs)` regardless of
/// worker count; aborts with a diagnostic dump if the loss or any
/// gradient goes non-finite.
pub fn train(
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    stream: &dyn PairStream,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    loss_cfg.validate()?;
    cfg.validate()?;

    let (mut params, mut adam, start_step, directions) = match opts.resume {
        Some(ckpt) => {
            if ckpt.meta.model != *model_cfg {
                return Err(CoreError::config(
                    "resume checkpoint was trained with a different model configuration",
                ));
            }
            if ckpt.meta.loss != *loss_cfg {
                return Err(CoreError::config(
                    "resume checkpoint was trained with a different loss configuration",
                ));
            }
            if ckpt.meta.seed != cfg.seed {
                return Err(CoreError::config(format!(
                    "resume checkpoint records seed {} but the run is configured with seed {}",
                    ckpt.meta.seed, cfg.seed
                )));
            }
            if ckpt.meta.step >= cfg.total_steps {
                return Err(CoreError::config(format!(
                    "checkpoint already has {} completed steps; total_steps is {}",
                    ckpt.meta.step, cfg.total_steps
                )));
            }
            (
                ckpt.params,
                AdamState {
                    m: ckpt.adam_m,
                    v: ckpt.adam_v,
                },
                ckpt.meta.step,
                ckpt.directions,
            )
        }
        None => {
            let params = init_params(model_cfg, cfg.seed)?;
            let adam = AdamState::zeros_like(&params);
            (params, adam, 0, projection_directions(loss_cfg))
        }
    };

    if let Some(dir) = opts.checkpoint_dir.as_deref() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let mut log = LogSink::open(opts.log_path.as_deref())?;

    // Validation pairs are fixed for the whole run: always the head of the
    // held-out stream.
    let val_pairs: Option<Vec<TrainingPair>> = match (&opts.val_stream, cfg.val_every) {
        (Some(stream), every) if every > 0 => {
            let pairs: Vec<TrainingPair> = (0..cfg.val_pairs)
                .map(|i| stream.pair(i))
                .collect::<Result<_>>()?;
            Some(pairs)
        }
        _ => None,
    };

    let mut history = Vec::with_capacity((cfg.total_steps - start_step) as usize);
    let mut validations = Vec::new();

    for step in start_step..cfg.total_steps {
        let (lr_batch, gt_batch, indices) = assemble_batch(stream, cfg, step)?;

        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, &params, true);
        let pred = forward_batch(&tape, model_cfg, &vars, lr_batch.view());
        let terms = training_loss(&tape, pred, &gt_batch, loss_cfg, &directions);
        let loss = terms.total_value();
        if !loss.is_finite() {
            let msg = dump_bad_batch(
                opts.checkpoint_dir.as_deref(),
                step + 1,
                &indices,
                "non-finite loss",
                &lr_batch,
                &gt_batch,
            );
            return Err(CoreError::numeric(msg));
        }
        let (l1, pdl) = (terms.l1_value(), terms.pdl_value());

        let mut grads = tape.backward(terms.total);
        let mut named = vars.grads(&mut grads);
        if named
            .iter()
            .any(|(_, g)| g.iter().any(|x| !x.is_finite()))
        {
            let msg = dump_bad_batch(
                opts.checkpoint_dir.as_deref(),
                step + 1,
                &indices,
                "non-finite gradient",
                &lr_batch,
                &gt_batch,
            );
            return Err(CoreError::numeric(msg));
        }
        let grad_norm = match cfg.grad_clip {
            Some(max) => clip_global_norm(&mut named, max),
            None => named
                .iter()
                .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt(),
        };

        let eta = cfg.lr_at(step);
        adam_step(&mut params, &mut adam, &named, cfg, eta, step + 1);

        let completed = step + 1;
        let record = StepRecord {
            step: completed,
            lr: eta,
            loss,
            l1,
            pdl,
            grad_norm,
        };
        log.record("step", &record)?;
        history.push(record);

        if let Some(pairs) = &val_pairs {
            if completed % cfg.val_every == 0 || completed == cfg.total_steps {
                let summary = validate(
                    |pair| predict_plane(model_cfg, &params, pair.lr.view()),
                    pairs,
                    loss_cfg,
                )?;
                let record = ValidationRecord {
                    step: completed,
                    summary,
                };
                log.record("val", &record)?;
                validations.push(record);
            }
        }

        if cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0 {
            if let Some(dir) = opts.checkpoint_dir.as_deref() {
                let ckpt = snapshot(model_cfg, loss_cfg, cfg, completed, &params, &adam, &directions);
                save_checkpoint(&ckpt, &dir.join(format!("step_{completed:06}.ckpt")))?;
            }
        }
    }

    let checkpoint = snapshot(
        model_cfg,
        loss_cfg,
        cfg,
        cfg.total_steps,
        &params,
        &adam,
        &directions,
    );
    if let Some(dir) = opts.checkpoint_dir.as_deref() {
        save_checkpoint(&checkpoint, &dir.join("final.ckpt"))?;
    }
    log.finish()?;

    Ok(TrainOutcome {
        checkpoint,
        history,
        validations,
    })
}

/// Evaluates a predictor on held-out pairs without touching any training
/// state. The loss is computed over the stacked batch (matching how the
/// training loss pools distribution-loss patches), and PSNR pools squared
/// error across all pairs; `None` PSNR means every prediction was exact.
pub fn validate<F>(
    predict: F,
    pairs: &[TrainingPair],
    loss_cfg: &LossConfig,
) -> Result<ValidationSummary>
where
    F: Fn(&TrainingPair) -> Array2<f64>,
{
    if pairs.is_empty() {
        return Err(CoreError::config("validation set is empty"));
    }
    let side = pairs[0].gt.dim();
    let mut preds = Array3::zeros((pairs.len(), side.0, side.1));
    let mut gts = Array3::zeros((pairs.len(), side.0, side.1));
    for (i, pair) in pairs.iter().enumerate() {
        let p = predict(pair);
        if p.dim() != pair.gt.dim() || pair.gt.dim() != side {
            return Err(CoreError::config(
                "validation pairs and predictions must share one patch size",
            ));
        }
        preds.index_axis_mut(Axis(0), i).assign(&p);
        gts.index_axis_mut(Axis(0), i).assign(&pair.gt);
    }

    let l1 = l1_loss(preds.view(), gts.view());
    let pdl = if loss_cfg.alpha == 0.0 {
        0.0
    } else {
        let dirs = projection_directions(loss_cfg);
        pdl_loss(preds.view(), gts.view(), &dirs, loss_cfg.pdl_patch)
    };
    Ok(ValidationSummary {
        pairs: pairs.len() as u64,
        loss: l1 + loss_cfg.alpha * pdl,
        l1,
        pdl,
        psnr_db: psnr(preds.view(), gts.view(), DATA_RANGE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{
        DegradationConfig, PairMeta, PairOrientation, PatchSampler, PatchSamplingConfig,
    };
    use crate::phantom::generate_phantom_volume;
    use crate::resample::DownsampleKernel;
    use crate::volume::AnisotropyRatio;

    fn tiny_model() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn quick_loss() -> LossConfig {
        LossConfig {
            pdl_directions: 8,
            ..LossConfig::default()
        }
    }

    fn make_pair(seed: u64, side: usize) -> TrainingPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Array2::from_shape_fn((side, side), |_| rng.random_range(0.0..1.0));
        // A crude degradation stand-in: the pair's relationship does not
        // matter for optimizer tests, only its determinism.
        let lr = &gt * 0.5 + 0.25;
        TrainingPair {
            lr,
            gt,
            meta: PairMeta {
                plane_z: 0,
                origin: (0, 0),
                orientation: PairOrientation::Rows,
                index: seed,
            },
        }
    }

    fn quick_train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 1,
            total_steps: steps,
            val_every: 0,
            checkpoint_every: 0,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn synth_stream(seed: u64) -> PairSynthesizer {
        let vol = generate_phantom_volume((12, 48, 48), 12.0, seed).unwrap();
        let sampling = PatchSamplingConfig {
            patch_size: 16,
            patches_per_plane: 4,
            sampler: PatchSampler::UniformRandom,
            min_foreground_std: 0.0,
        };
        let degradation = DegradationConfig::clean(
            AnisotropyRatio::new(2.0).unwrap(),
            DownsampleKernel::BoxAverage,
            seed,
        );
        PairSynthesizer::new(vol, sampling, degradation).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.grad_clip = Some(0.0);
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn cosine_schedule_starts_at_lr_and_decays() {
        let cfg = TrainConfig {
            lr_schedule: LrSchedule::CosineToZero,
            total_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert!(cfg.lr_at(50) < cfg.lr);
        assert!(cfg.lr_at(99) < cfg.lr_at(50));
        assert!(cfg.lr_at(99) > 0.0);
        let constant = TrainConfig::default();
        assert_eq!(constant.lr_at(99), constant.lr);
    }

    #[test]
    fn dihedral_group_covers_all_symmetries_and_identity() {
        let a = Array2::from_shape_fn((5, 5), |(i, j)| (i * 5 + j) as f64);
        assert_eq!(dihedral(&a, 0), a);
        // Four quarter turns return to the start.
        let full = dihedral(&dihedral(&dihedral(&dihedral(&a, 1), 1), 1), 1);
        assert_eq!(full, a);
        // A mirror is an involution.
        let mirrored = dihedral(&dihedral(&a, 4), 4);
        assert_eq!(mirrored, a);
        // All eight variants are distinct for an asymmetric input.
        let variants: Vec<_> = (0..8).map(|k| dihedral(&a, k)).collect();
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_ne!(variants[i], variants[j], "k={i} vs k={j}");
            }
        }
    }

    #[test]
    fn adam_with_zero_rate_leaves_parameters_unchanged() {
        let model = tiny_model();
        let mut params = init_params(&model, 1).unwrap();
        let reference = params.clone();
        let mut adam = AdamState::zeros_like(&params);
        let grads: Vec<(String, Arr)> = params
            .iter()
            .map(|(n, p)| (n.to_string(), Arr::ones(p.raw_dim())))
            .collect();
        let cfg = TrainConfig::default();
        for t in 1..=5 {
            adam_step(&mut params, &mut adam, &grads, &cfg, 0.0, t);
        }
        for (name, p) in params.iter() {
            assert_eq!(p, reference.get(name), "{name} drifted");
        }
    }

    #[test]
    fn adam_matches_reference_formula_on_scalar() {
        // One parameter, constant gradient: check two hand-computed steps.
        let mut params = ParamSet::new();
        params.insert("w", Arr::from_elem(ndarray::IxDyn(&[1]), 1.0));
        let mut adam = AdamState::zeros_like(&params);
        let grads = vec![("w".to_string(), Arr::from_elem(ndarray::IxDyn(&[1]), 0.5))];
        let cfg = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };

        adam_step(&mut params, &mut adam, &grads, &cfg, cfg.lr, 1);
        // After bias correction the first update is lr * g / (|g| + eps).
        let expected1 = 1.0 - 0.1 * 0.5 / (0.5 + cfg.epsilon);
        assert!((params.get("w")[[0]] - expected1).abs() < 1e-12);

        adam_step(&mut params, &mut adam, &grads, &cfg, cfg.lr, 2);
        let m = 0.9 * (0.1 * 0.5) + 0.1 * 0.5;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 0.25;
        let expected2 =
            expected1 - 0.1 * (m / (1.0 - 0.9f64.powi(2))) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + cfg.epsilon);
        assert!((params.get("w")[[0]] - expected2).abs() < 1e-12);
    }

    #[test]
    fn cached_stream_cycles_or_exhausts() {
        let pairs = vec![make_pair(1, 8), make_pair(2, 8)];
        let cycling = CachedPairs::cycling(pairs.clone()).unwrap();
        assert_eq!(cycling.pair(5).unwrap().gt, pairs[1].gt);
        let finite = CachedPairs::finite(pairs).unwrap();
        assert!(finite.pair(1).is_ok());
        let err = finite.pair(2).unwrap_err();
        assert!(err.to_string().contains("exhausted"));
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let model = tiny_model();
        let loss = quick_loss();
        let cfg = quick_train_cfg(3);
        let stream = synth_stream(11);
        let run = || {
            train(&model, &loss, &cfg, &stream, TrainOptions::default())
                .unwrap()
                .checkpoint
        };
        let (a, b) = (run(), run());
        for (name, pa) in a.params.iter() {
            assert_eq!(pa, b.params.get(name), "{name} differs between runs");
        }
        assert_eq!(
            a.adam_m.iter().map(|(_, v)| v.sum()).sum::<f64>(),
            b.adam_m.iter().map(|(_, v)| v.sum()).sum::<f64>()
        );
    }

    #[test]
    fn resume_reproduces_uninterrupted_trajectory() {
        let model = tiny_model();
        let loss = quick_loss();
        let stream = synth_stream(13);

        let full_cfg = quick_train_cfg(6);
        let full = train(&model, &loss, &full_cfg, &stream, TrainOptions::default()).unwrap();

        let head_cfg = quick_train_cfg(3);
        let head = train(&model, &loss, &head_cfg, &stream, TrainOptions::default()).unwrap();
        let resumed = train(
            &model,
            &loss,
            &full_cfg,
            &stream,
            TrainOptions {
                resume: Some(head.checkpoint),
                ..TrainOptions::default()
            },
        )
        .unwrap();

        assert_eq!(resumed.checkpoint.meta.step, 6);
        assert_eq!(resumed.history.len(), 3);
        for (name, p) in full.checkpoint.params.iter() {
            assert_eq!(
                p,
                resumed.checkpoint.params.get(name),
                "{name} diverged after resume"
            );
        }
        for (name, m) in full.checkpoint.adam_m.iter() {
            assert_eq!(m, resumed.checkpoint.adam_m.get(name));
        }
        // The replayed tail reports the same losses as the original run.
        let tail: Vec<f64> = full.history[3..].iter().map(|r| r.loss).collect();
        let replay: Vec<f64> = resumed.history.iter().map(|r| r.loss).collect();
        assert_eq!(tail, replay);
    }

    #[test]
    fn resume_rejects_mismatched_configuration() {
        let model = tiny_model();
        let loss = quick_loss();
        let stream = synth_stream(17);
        let cfg = quick_train_cfg(2);
        let head = train(&model, &loss, &cfg, &stream, TrainOptions::default()).unwrap();

        let mut other_model = model.clone();
        other_model.base_channels *= 2;
        let longer = quick_train_cfg(4);
        let err = train(
            &other_model,
            &loss,
            &longer,
            &stream,
            TrainOptions {
                resume: Some(head.checkpoint.clone()),
                ..TrainOptions::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("model configuration"));

        let mut other_seed = longer.clone();
        other_seed.seed += 1;
        let err = train(
            &model,
            &loss,
            &other_seed,
            &stream,
            TrainOptions {
                resume: Some(head.checkpoint.clone()),
                ..TrainOptions::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("seed"));

        let err = train(
            &model,
            &loss,
            &cfg,
            &stream,
            TrainOptions {
                resume: Some(head.checkpoint),
                ..TrainOptions::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("total_steps"));
    }

    #[test]
    fn nan_input_aborts_with_diagnostic_dump() {
        let model = tiny_model();
        let loss = quick_loss();
        let cfg = quick_train_cfg(2);
        let mut pair = make_pair(3, 16);
        pair.gt[[0, 0]] = f64::NAN;
        let stream = CachedPairs::cycling(vec![pair]).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let err = train(
            &model,
            &loss,
            &cfg,
            &stream,
            TrainOptions {
                checkpoint_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        let dump = dir.path().join("bad_batch_step_000001.json");
        assert!(dump.exists(), "diagnostic dump missing: {err}");
        let text = std::fs::read_to_string(dump).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["step"], 1);
        assert_eq!(parsed["patch_size"], 16);
    }

    #[test]
    fn stream_exhaustion_is_reported() {
        let model = tiny_model();
        let loss = quick_loss();
        let cfg = quick_train_cfg(5);
        let stream = CachedPairs::finite(vec![make_pair(1, 16), make_pair(2, 16)]).unwrap();
        let err = train(&model, &loss, &cfg, &stream, TrainOptions::default()).unwrap_err();
        assert!(err.to_string().contains("exhausted"));
    }

    #[test]
    fn checkpoints_and_log_are_written_at_cadence() {
        let model = tiny_model();
        let loss = quick_loss();
        let mut cfg = quick_train_cfg(4);
        cfg.checkpoint_every = 2;
        cfg.val_every = 2;
        cfg.val_pairs = 2;
        let stream = synth_stream(19);
        let val_stream = synth_stream(20);

        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("train_log.jsonl");
        let out = train(
            &model,
            &loss,
            &cfg,
            &stream,
            TrainOptions {
                checkpoint_dir: Some(dir.path().to_path_buf()),
                log_path: Some(log_path.clone()),
                val_stream: Some(&val_stream),
                ..TrainOptions::default()
            },
        )
        .unwrap();

        assert!(dir.path().join("step_000002.ckpt").exists());
        assert!(dir.path().join("step_000004.ckpt").exists());
        assert!(dir.path().join("final.ckpt").exists());
        assert_eq!(out.validations.len(), 2);
        assert_eq!(out.validations[0].step, 2);

        let text = std::fs::read_to_string(&log_path).unwrap();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(
            lines.iter().filter(|l| l["kind"] == "step").count(),
            4
        );
        assert_eq!(lines.iter().filter(|l| l["kind"] == "val").count(), 2);
        // The returned checkpoint matches the one saved as final.ckpt.
        let reloaded = crate::checkpoint::load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(reloaded.meta.step, out.checkpoint.meta.step);
    }

    #[test]
    fn validation_stubs_behave_as_specified() {
        let pairs: Vec<TrainingPair> = (0..3).map(|i| make_pair(i, 16)).collect();
        let loss = quick_loss();

        // Perfect predictor: zero loss, infinite PSNR.
        let perfect = validate(|p| p.gt.clone(), &pairs, &loss).unwrap();
        assert_eq!(perfect.loss, 0.0);
        assert_eq!(perfect.psnr_db, None);

        // Identity predictor: PSNR agrees with the metrics module on the
        // stacked batch.
        let identity = validate(|p| p.lr.clone(), &pairs, &loss).unwrap();
        let side = pairs[0].gt.dim();
        let mut lrs = Array3::zeros((3, side.0, side.1));
        let mut gts = Array3::zeros((3, side.0, side.1));
        for (i, p) in pairs.iter().enumerate() {
            lrs.index_axis_mut(Axis(0), i).assign(&p.lr);
            gts.index_axis_mut(Axis(0), i).assign(&p.gt);
        }
        assert_eq!(identity.psnr_db, psnr(lrs.view(), gts.view(), DATA_RANGE));
        assert!(identity.loss > 0.0);

        // Repeated calls are identical.
        let again = validate(|p| p.lr.clone(), &pairs, &loss).unwrap();
        assert_eq!(identity, again);

        // Empty sets are rejected.
        assert!(validate(|p| p.gt.clone(), &[], &loss).is_err());
    }

    #[test]
    fn single_pair_overfit_drops_loss_an_order_of_magnitude() {
        let model = tiny_model();
        let loss = quick_loss();
        let pair = {
            let synth = synth_stream(23);
            PairStream::pair(&synth, 0).unwrap()
        };
        let stream = CachedPairs::cycling(vec![pair]).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 1,
            total_steps: 200,
            augment: false,
            val_every: 0,
            checkpoint_every: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&model, &loss, &cfg, &stream, TrainOptions::default()).unwrap();
        let first = out.history.first().unwrap().loss;
        let last = out.history.last().unwrap().loss;
        assert!(
            last < first / 10.0,
            "expected ≥10x loss drop, got {first} -> {last}"
        );
    }
}
