//! Training objective: pixel reconstruction plus a patch-distribution
//! term.
//!
//! The distribution term (PDL) compares the *population* of small patch
//! vectors in the prediction against the ground truth via a sliced
//! 1-Wasserstein distance: both populations are projected onto a fixed
//! set of random unit directions, each projected population is sorted,
//! and matching order statistics are compared. Its subgradient pairs
//! sorted samples, which is exactly what the tape's sort operation
//! routes.
//!
//! Every tape-side loss has a plain-array oracle used by the tests; the
//! two paths must agree to near machine precision.

use isosr_autograd::{Tape, Var};
use ndarray::{Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the patch-distribution term.
    pub alpha: f64,
    /// Side of the non-overlapping patches the distribution term works on.
    pub pdl_patch: usize,
    /// Number of random projection directions.
    pub pdl_directions: usize,
    /// Seed for the direction matrix. Directions are drawn once and
    /// travel with the checkpoint, so a resumed run keeps the same slice.
    pub direction_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.01,
            pdl_patch: 4,
            pdl_directions: 32,
            direction_seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(CoreError::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.pdl_patch == 0 {
            return Err(CoreError::config("pdl_patch must be >= 1"));
        }
        if self.pdl_directions == 0 {
            return Err(CoreError::config("pdl_directions must be >= 1"));
        }
        Ok(())
    }
}

/// Draws the `[directions, patch^2]` matrix of unit-norm projection
/// directions for the distribution loss. Deterministic in the seed.
pub fn projection_directions(cfg: &LossConfig) -> Array2<f64> {
    let p2 = cfg.pdl_patch * cfg.pdl_patch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.direction_seed);
    let mut dirs = Array2::<f64>::zeros((cfg.pdl_directions, p2));
    for mut row in dirs.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    dirs
}

/// Mean absolute error over a `[B, H, W]` batch.
pub fn l1_loss(pred: ArrayView3<'_, f64>, gt: ArrayView3<'_, f64>) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "l1_loss: shape mismatch");
    let n = pred.len() as f64;
    pred.iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n
}

/// Flattens a `[B, H, W]` batch into its non-overlapping `p x p` patch
/// vectors, `[N, p^2]`, pooled across the batch. Trailing rows/columns
/// that do not fill a patch are dropped.
pub fn patch_vectors(x: ArrayView3<'_, f64>, p: usize) -> Array2<f64> {
    let (b, h, w) = x.dim();
    let (ph, pw) = (h / p, w / p);
    assert!(ph > 0 && pw > 0, "patch_vectors: image smaller than patch");
    let n = b * ph * pw;
    let mut out = Array2::zeros((n, p * p));
    let mut row = 0;
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for iy in 0..p {
                    for ix in 0..p {
                        out[(row, iy * p + ix)] = x[(bi, py * p + iy, px * p + ix)];
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Sorted projections of the pooled patch population onto each
/// direction: `[R, N]` with ascending rows.
pub fn sorted_projections(
    x: ArrayView3<'_, f64>,
    dirs: &Array2<f64>,
    p: usize,
) -> Array2<f64> {
    let patches = patch_vectors(x, p); // [N, p^2]
    let mut proj = dirs.dot(&patches.t()); // [R, N]
    for mut row in proj.rows_mut() {
        let mut vals: Vec<f64> = row.to_vec();
        vals.sort_by(|a, b| a.total_cmp(b));
        for (dst, v) in row.iter_mut().zip(vals) {
            *dst = v;
        }
    }
    proj
}

/// Sliced 1-Wasserstein distance between the patch populations of
/// prediction and ground truth (plain-array oracle).
pub fn pdl_loss(
    pred: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    dirs: &Array2<f64>,
    p: usize,
) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "pdl_loss: shape mismatch");
    let a = sorted_projections(pred, dirs, p);
    let b = sorted_projections(gt, dirs, p);
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Combined objective (plain-array oracle): `l1 + alpha * pdl`.
pub fn total_loss(
    pred: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    cfg: &LossConfig,
    dirs: &Array2<f64>,
) -> f64 {
    let l1 = l1_loss(pred, gt);
    if cfg.alpha == 0.0 {
        return l1;
    }
    l1 + cfg.alpha * pdl_loss(pred, gt, dirs, cfg.pdl_patch)
}

/// The tape-side loss terms of one training step.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub l1: Var<'t>,
    pub pdl: Option<Var<'t>>,
}

impl LossTerms<'_> {
    pub fn l1_value(&self) -> f64 {
        scalar_value(self.l1)
    }

    pub fn pdl_value(&self) -> f64 {
        self.pdl.map(scalar_value).unwrap_or(0.0)
    }

    pub fn total_value(&self) -> f64 {
        scalar_value(self.total)
    }
}

fn scalar_value(v: Var<'_>) -> f64 {
    let arr = v.value();
    debug_assert_eq!(arr.len(), 1);
    *arr.iter().next().expect("loss is a scalar")
}

/// Crops `[B, H, W, 1]` to `p`-divisible extents and rearranges into the
/// pooled `[N, p^2]` patch matrix on the tape.
fn patch_vectors_var<'t>(x: Var<'t>, p: usize) -> Var<'t> {
    let sh = x.shape();
    let (b, h, w) = (sh[0], sh[1], sh[2]);
    let (ph, pw) = (h / p, w / p);
    assert!(ph > 0 && pw > 0, "patch_vectors: image smaller than patch");
    let mut v = x;
    if h % p != 0 || w % p != 0 {
        v = v.crop_hw(ph * p, pw * p);
    }
    v.reshape(&[b, ph, p, pw, p])
        .permute(&[0, 1, 3, 2, 4])
        .reshape(&[b * ph * pw, p * p])
}

/// Builds the combined training loss on the tape. `pred` is the network
/// output `[B, H, W, 1]`; `gt` is the matching ground-truth batch.
pub fn training_loss<'t>(
    tape: &'t Tape,
    pred: Var<'t>,
    gt: &Array3<f64>,
    cfg: &LossConfig,
    dirs: &Array2<f64>,
) -> LossTerms<'t> {
    let (b, h, w) = gt.dim();
    assert_eq!(pred.shape(), [b, h, w, 1], "training_loss: shape mismatch");
    let gt_var = tape.constant(
        gt.clone()
            .into_shape_with_order((b, h, w, 1))
            .expect("channel axis")
            .into_dyn(),
    );

    let l1 = pred.sub(gt_var).abs().mean_all();
    if cfg.alpha == 0.0 {
        return LossTerms {
            total: l1,
            l1,
            pdl: None,
        };
    }

    let p = cfg.pdl_patch;
    let dirs_t = tape.constant(dirs.t().as_standard_layout().into_owned().into_dyn()); // [p^2, R]
    let r = dirs.nrows();
    // [N, p^2] -> [N, R] -> [R, N], sort each population, compare order
    // statistics.
    let sorted = |v: Var<'t>| {
        patch_vectors_var(v, p)
            .matmul(dirs_t)
            .permute(&[1, 0])
            .sort_last()
    };
    let a = sorted(pred);
    let bpop = sorted(gt_var);
    debug_assert_eq!(a.shape()[0], r);
    let pdl = a.sub(bpop).abs().mean_all();
    let total = l1.add(pdl.scale(cfg.alpha));
    LossTerms {
        total,
        l1,
        pdl: Some(pdl),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use isosr_autograd::check::rel_err;
    use ndarray::Array1;
    use rand::Rng;

    fn rand_batch(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn directions_are_unit_norm_and_deterministic() {
        let cfg = LossConfig::default();
        let d1 = projection_directions(&cfg);
        let d2 = projection_directions(&cfg);
        assert_eq!(d1, d2);
        assert_eq!(d1.dim(), (32, 16));
        for row in d1.rows() {
            let norm = row.dot(&row).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let other = projection_directions(&LossConfig {
            direction_seed: 1,
            ..cfg
        });
        assert_ne!(d1, other);
    }

    #[test]
    fn l1_matches_hand_computation() {
        let a = Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let b = Array3::from_shape_vec((1, 2, 2), vec![0.5, 0.5, 0.0, 0.75]).unwrap();
        let expect = (0.5 + 0.0 + 1.0 + 0.5) / 4.0;
        assert!((l1_loss(a.view(), b.view()) - expect).abs() < 1e-15);
    }

    #[test]
    fn pdl_is_zero_iff_populations_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        let dirs = projection_directions(&cfg);
        let x = rand_batch(&mut rng, 2, 8, 8);

        assert_eq!(pdl_loss(x.view(), x.view(), &dirs, 4), 0.0);

        // Patch populations are compared as sets: permuting whole patches
        // leaves every projected population unchanged.
        let mut shuffled = x.clone();
        let tmp = shuffled.slice(ndarray::s![0, 0..4, 0..4]).to_owned();
        let other = shuffled.slice(ndarray::s![1, 4..8, 4..8]).to_owned();
        shuffled.slice_mut(ndarray::s![0, 0..4, 0..4]).assign(&other);
        shuffled.slice_mut(ndarray::s![1, 4..8, 4..8]).assign(&tmp);
        assert!(pdl_loss(x.view(), shuffled.view(), &dirs, 4) < 1e-14);

        let y = rand_batch(&mut rng, 2, 8, 8);
        assert!(pdl_loss(x.view(), y.view(), &dirs, 4) > 1e-3);
    }

    #[test]
    fn pdl_matches_direct_wasserstein_on_scalar_patches() {
        // With 1x1 patches and a single direction (+1), the sliced
        // distance reduces to the classic sorted-difference form.
        let a = Array3::from_shape_vec((1, 2, 2), vec![0.9, 0.1, 0.5, 0.3]).unwrap();
        let b = Array3::from_shape_vec((1, 2, 2), vec![0.2, 0.8, 0.4, 0.6]).unwrap();
        let dirs = Array2::from_elem((1, 1), 1.0);
        let mut sa: Vec<f64> = a.iter().cloned().collect();
        let mut sb: Vec<f64> = b.iter().cloned().collect();
        sa.sort_by(|x, y| x.total_cmp(y));
        sb.sort_by(|x, y| x.total_cmp(y));
        let expect: f64 =
            sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64;
        assert!((pdl_loss(a.view(), b.view(), &dirs, 1) - expect).abs() < 1e-15);
    }

    #[test]
    fn tape_loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = LossConfig::default();
        let dirs = projection_directions(&cfg);
        for (b, h, w) in [(2, 8, 8), (1, 12, 8), (3, 9, 10)] {
            let pred = rand_batch(&mut rng, b, h, w);
            let gt = rand_batch(&mut rng, b, h, w);
            let tape = Tape::new();
            let pv = tape.constant(
                pred.clone()
                    .into_shape_with_order((b, h, w, 1))
                    .unwrap()
                    .into_dyn(),
            );
            let terms = training_loss(&tape, pv, &gt, &cfg, &dirs);

            // The oracle truncates to patch multiples exactly like the
            // tape's crop.
            let p = cfg.pdl_patch;
            let (hc, wc) = ((h / p) * p, (w / p) * p);
            let pc = pred.slice(ndarray::s![.., 0..hc, 0..wc]);
            let gc = gt.slice(ndarray::s![.., 0..hc, 0..wc]);
            let l1 = l1_loss(pred.view(), gt.view());
            let pdl = pdl_loss(pc, gc, &dirs, p);
            assert!(
                (terms.l1_value() - l1).abs() < 1e-10,
                "l1 mismatch at ({b},{h},{w})"
            );
            assert!(
                (terms.pdl_value() - pdl).abs() < 1e-10,
                "pdl mismatch at ({b},{h},{w})"
            );
            assert!((terms.total_value() - (l1 + cfg.alpha * pdl)).abs() < 1e-10);
        }
    }

    #[test]
    fn alpha_zero_skips_the_distribution_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let dirs = projection_directions(&cfg);
        let pred = rand_batch(&mut rng, 1, 8, 8);
        let gt = rand_batch(&mut rng, 1, 8, 8);
        let tape = Tape::new();
        let pv = tape.constant(
            pred.clone()
                .into_shape_with_order((1, 8, 8, 1))
                .unwrap()
                .into_dyn(),
        );
        let terms = training_loss(&tape, pv, &gt, &cfg, &dirs);
        assert!(terms.pdl.is_none());
        assert!((terms.total_value() - l1_loss(pred.view(), gt.view())).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // End-to-end subgradient check of l1 + alpha * pdl with respect to
        // the prediction, away from sorting ties.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = LossConfig {
            alpha: 0.5,
            pdl_patch: 2,
            pdl_directions: 8,
            direction_seed: 4,
        };
        let dirs = projection_directions(&cfg);
        let (b, h, w) = (1, 4, 4);
        let pred = rand_batch(&mut rng, b, h, w);
        let gt = rand_batch(&mut rng, b, h, w);

        let tape = Tape::new();
        let pv = tape.var(
            pred.clone()
                .into_shape_with_order((b, h, w, 1))
                .unwrap()
                .into_dyn(),
        );
        let terms = training_loss(&tape, pv, &gt, &cfg, &dirs);
        let mut grads = tape.backward(terms.total);
        let g = grads.take(pv).unwrap();

        let eval = |p: &Array3<f64>| total_loss(p.view(), gt.view(), &cfg, &dirs);
        let hstep = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..pred.len() {
            let mut plus = pred.clone();
            let mut minus = pred.clone();
            plus.as_slice_mut().unwrap()[idx] += hstep;
            minus.as_slice_mut().unwrap()[idx] -= hstep;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * hstep);
            let ana = g.as_slice().unwrap()[idx];
            if num.abs() < 1e-8 && ana.abs() < 1e-8 {
                continue;
            }
            worst = worst.max(rel_err(ana, num));
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn sorted_projections_rows_are_ascending() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = LossConfig::default();
        let dirs = projection_directions(&cfg);
        let x = rand_batch(&mut rng, 2, 16, 16);
        let s = sorted_projections(x.view(), &dirs, 4);
        for row in s.rows() {
            let v: Array1<f64> = row.to_owned();
            for i in 1..v.len() {
                assert!(v[i] >= v[i - 1]);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = LossConfig::default();
        cfg.alpha = -0.1;
        assert!(cfg.validate().is_err());
        cfg = LossConfig::default();
        cfg.pdl_patch = 0;
        assert!(cfg.validate().is_err());
        cfg = LossConfig::default();
        cfg.pdl_directions = 0;
        assert!(cfg.validate().is_err());
    }
}
