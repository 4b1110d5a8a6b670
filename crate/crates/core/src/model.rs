//! U-shaped windowed-attention network for 2-D plane restoration.
//!
//! Topology: a conv stem lifts the grayscale plane to `base_channels`
//! feature maps (X0); `levels - 1` encoder stages alternate attention
//! blocks with 2x strided-conv downsampling (channels doubling); a stack
//! of bottleneck blocks sits at the coarsest level; the decoder mirrors
//! the encoder with 2x transposed-conv upsampling, skip concatenation and
//! pointwise reduction; a global residual adds X0 back before a 3x3 conv
//! head projects to one channel.
//!
//! Each block is `x' = x + W-MSA(LN(x))`, `x'' = GLEN(LN(x')) + x'`:
//! window-partitioned multi-head self-attention with learned relative
//! position bias, and a gated dual-path convolutional feed-forward
//! (two pointwise expansions, depthwise 3x3 on each, smooth GELU gate on
//! one path, elementwise product, pointwise projection back).
//!
//! All tensors are channels-last `[B, H, W, C]` in f64.

use std::collections::HashMap;
use std::sync::Arc;

use isosr_autograd::{Arr, Gradients, Tape, Var};
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width at the finest level; doubles at each coarser level.
    pub base_channels: usize,
    /// Number of resolution levels (1 = bottleneck only).
    pub levels: usize,
    /// Attention window side M; inputs are padded to multiples of
    /// `window_size << (levels - 1)`.
    pub window_size: usize,
    /// Attention heads per level; `heads[l]` must divide the channel
    /// count at level `l`.
    pub heads: Vec<usize>,
    /// Expansion ratio of the gated feed-forward.
    pub glen_expansion: usize,
    /// Attention blocks per encoder/decoder level and in the bottleneck.
    pub blocks_per_level: usize,
    /// Keep the residual around the attention operator. Disabling it
    /// isolates the attention path for ablation.
    pub wmsa_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            levels: 3,
            window_size: 8,
            heads: vec![2, 4, 8],
            glen_expansion: 2,
            blocks_per_level: 2,
            wmsa_residual: true,
        }
    }
}

impl ModelConfig {
    /// Small profile for desk-scale experiments and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            base_channels: 8,
            levels: 2,
            window_size: 4,
            heads: vec![2, 4],
            glen_expansion: 2,
            blocks_per_level: 2,
            wmsa_residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(CoreError::config("base_channels must be >= 1"));
        }
        if self.levels == 0 {
            return Err(CoreError::config("levels must be >= 1"));
        }
        if self.window_size < 2 {
            return Err(CoreError::config("window_size must be >= 2"));
        }
        if self.heads.len() != self.levels {
            return Err(CoreError::config(format!(
                "heads must list one entry per level: got {} entries for {} levels",
                self.heads.len(),
                self.levels
            )));
        }
        for (l, &h) in self.heads.iter().enumerate() {
            let ch = self.channels_at(l);
            if h == 0 || ch % h != 0 {
                return Err(CoreError::config(format!(
                    "level {l}: heads {h} must divide the channel count {ch}"
                )));
            }
        }
        if self.glen_expansion == 0 {
            return Err(CoreError::config("glen_expansion must be >= 1"));
        }
        if self.blocks_per_level == 0 {
            return Err(CoreError::config("blocks_per_level must be >= 1"));
        }
        Ok(())
    }

    /// Channel width at resolution level `l` (0 = finest).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input planes are padded so both sides divide this.
    pub fn size_divisor(&self) -> usize {
        self.window_size << (self.levels - 1)
    }

    /// Closed-form scalar parameter count of the full network.
    pub fn param_count(&self) -> usize {
        let conv3 = |ci: usize, co: usize| 9 * ci * co + co;
        let linear = |i: usize, o: usize| i * o + o;
        let m = self.window_size;
        let table_rows = (2 * m - 1) * (2 * m - 1);
        let block = |ch: usize, heads: usize| {
            let e = self.glen_expansion * ch;
            2 * (2 * ch)                      // two layer norms
                + 4 * linear(ch, ch)          // q, k, v, output projection
                + table_rows * heads          // relative position bias
                + 2 * linear(ch, e)           // dual expansion
                + 2 * (9 * e + e)             // two depthwise 3x3
                + linear(e, ch)               // projection back
        };
        let mut total = conv3(1, self.base_channels) + conv3(self.base_channels, 1);
        for l in 0..self.levels {
            total += self.blocks_per_level * block(self.channels_at(l), self.heads[l]);
        }
        for l in 0..self.levels.saturating_sub(1) {
            let ch = self.channels_at(l);
            total += linear(4 * ch, 2 * ch); // strided 2x2 down
            total += linear(2 * ch, 4 * ch); // transposed 2x2 up
            total += linear(2 * ch, ch); // post-concat reduction
            total += self.blocks_per_level * block(ch, self.heads[l]); // decoder blocks
        }
        total
    }
}

/// Ordered, name-addressed parameter store. Iteration order is insertion
/// order, which is fixed by the architecture — checkpoints and optimizer
/// state rely on it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Arr)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> &Arr {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Arr)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), &mut *v))
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

fn normal_arr(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Arr::from_shape_vec(IxDyn(shape), data).expect("shape/product match")
}

/// Deterministically initializes every parameter of the network.
///
/// Weights draw from a zero-mean normal with fan-in variance scaling
/// (`std = 1/sqrt(fan_in)`); biases and relative-position tables start at
/// zero; layer-norm scales start at one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let m = cfg.window_size;
    let table_rows = (2 * m - 1) * (2 * m - 1);

    let conv3 = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, ci: usize, co: usize| {
        let std = 1.0 / ((9 * ci) as f64).sqrt();
        p.insert(format!("{name}.weight"), normal_arr(rng, &[3, 3, ci, co], std));
        p.insert(format!("{name}.bias"), Arr::zeros(IxDyn(&[co])));
    };
    let linear = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
        let std = 1.0 / (i as f64).sqrt();
        p.insert(format!("{name}.weight"), normal_arr(rng, &[i, o], std));
        p.insert(format!("{name}.bias"), Arr::zeros(IxDyn(&[o])));
    };
    let block = |p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, ch: usize, heads: usize| {
        p.insert(format!("{prefix}.ln1.gamma"), Arr::ones(IxDyn(&[ch])));
        p.insert(format!("{prefix}.ln1.beta"), Arr::zeros(IxDyn(&[ch])));
        for nm in ["q", "k", "v", "proj"] {
            linear(p, rng, &format!("{prefix}.attn.{nm}"), ch, ch);
        }
        p.insert(
            format!("{prefix}.attn.rel_bias"),
            Arr::zeros(IxDyn(&[table_rows, heads])),
        );
        p.insert(format!("{prefix}.ln2.gamma"), Arr::ones(IxDyn(&[ch])));
        p.insert(format!("{prefix}.ln2.beta"), Arr::zeros(IxDyn(&[ch])));
        let e = cfg.glen_expansion * ch;
        linear(p, rng, &format!("{prefix}.glen.expand_a"), ch, e);
        linear(p, rng, &format!("{prefix}.glen.expand_b"), ch, e);
        for nm in ["dw_a", "dw_b"] {
            let std = 1.0 / 3.0; // depthwise fan-in is the 3x3 footprint
            p.insert(
                format!("{prefix}.glen.{nm}.weight"),
                normal_arr(rng, &[3, 3, e], std),
            );
            p.insert(format!("{prefix}.glen.{nm}.bias"), Arr::zeros(IxDyn(&[e])));
        }
        linear(p, rng, &format!("{prefix}.glen.project"), e, ch);
    };

    conv3(&mut p, &mut rng, "stem", 1, cfg.base_channels);
    for l in 0..cfg.levels.saturating_sub(1) {
        let ch = cfg.channels_at(l);
        for b in 0..cfg.blocks_per_level {
            block(&mut p, &mut rng, &format!("enc{l}.block{b}"), ch, cfg.heads[l]);
        }
        linear(&mut p, &mut rng, &format!("down{l}"), 4 * ch, 2 * ch);
    }
    {
        let l = cfg.levels - 1;
        let ch = cfg.channels_at(l);
        for b in 0..cfg.blocks_per_level {
            block(&mut p, &mut rng, &format!("bottleneck.block{b}"), ch, cfg.heads[l]);
        }
    }
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let ch = cfg.channels_at(l);
        linear(&mut p, &mut rng, &format!("up{l}"), 2 * ch, 4 * ch);
        linear(&mut p, &mut rng, &format!("dec{l}.reduce"), 2 * ch, ch);
        for b in 0..cfg.blocks_per_level {
            block(&mut p, &mut rng, &format!("dec{l}.block{b}"), ch, cfg.heads[l]);
        }
    }
    conv3(&mut p, &mut rng, "head", cfg.base_channels, 1);

    debug_assert_eq!(p.scalar_count(), cfg.param_count());
    Ok(p)
}

/// Tape-bound view of a `ParamSet`: one `Var` per tensor, same order.
pub struct ModelVars<'t> {
    list: Vec<(String, Var<'t>)>,
    index: HashMap<String, usize>,
}

impl<'t> ModelVars<'t> {
    /// Pushes every parameter onto the tape. `trainable` parameters are
    /// differentiable; frozen ones are constants (cheaper backward pass).
    pub fn bind(tape: &'t Tape, params: &ParamSet, trainable: bool) -> Self {
        let mut list = Vec::with_capacity(params.len());
        let mut index = HashMap::new();
        for (name, value) in params.iter() {
            let var = if trainable {
                tape.var(value.clone())
            } else {
                tape.constant(value.clone())
            };
            index.insert(name.to_string(), list.len());
            list.push((name.to_string(), var));
        }
        ModelVars { list, index }
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.list[i].1
    }

    /// Extracts this model's gradients from a backward pass, in parameter
    /// order. Parameters the loss never touched get zero gradients.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<(String, Arr)> {
        self.list
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .take(*var)
                    .unwrap_or_else(|| Arr::zeros(IxDyn(&var.shape())));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Relative-position lookup indices for an `m x m` window: entry
/// `(i, j)` addresses row `(dy + m - 1) * (2m - 1) + (dx + m - 1)` of the
/// bias table, `dy/dx` being the row/column offsets between cells i and j.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(m * m * m * m);
    for yi in 0..m {
        for xi in 0..m {
            for yj in 0..m {
                for xj in 0..m {
                    let dy = yi + m - 1 - yj;
                    let dx = xi + m - 1 - xj;
                    idx.push(dy * (2 * m - 1) + dx);
                }
            }
        }
    }
    idx
}

/// Splits `[B, H, W, C]` into `[B * (H/m) * (W/m), m*m, C]` windows.
/// Plain-array counterpart of the tape-side partition, used as an oracle.
pub fn window_partition(x: &ArrayView4<'_, f64>, m: usize) -> Array3<f64> {
    let (b, h, w, c) = x.dim();
    assert!(h % m == 0 && w % m == 0, "window_partition: size not divisible");
    let windows = b * (h / m) * (w / m);
    let mut out = Array3::zeros((windows, m * m, c));
    let mut wi = 0;
    for bi in 0..b {
        for wy in 0..h / m {
            for wx in 0..w / m {
                for iy in 0..m {
                    for ix in 0..m {
                        for ci in 0..c {
                            out[(wi, iy * m + ix, ci)] = x[(bi, wy * m + iy, wx * m + ix, ci)];
                        }
                    }
                }
                wi += 1;
            }
        }
    }
    out
}

/// Inverse of [`window_partition`].
pub fn window_merge(wins: &ArrayView3<'_, f64>, m: usize, b: usize, h: usize, w: usize) -> Array4<f64> {
    let c = wins.dim().2;
    assert_eq!(wins.dim().0, b * (h / m) * (w / m));
    assert_eq!(wins.dim().1, m * m);
    let mut out = Array4::zeros((b, h, w, c));
    let mut wi = 0;
    for bi in 0..b {
        for wy in 0..h / m {
            for wx in 0..w / m {
                for iy in 0..m {
                    for ix in 0..m {
                        for ci in 0..c {
                            out[(bi, wy * m + iy, wx * m + ix, ci)] = wins[(wi, iy * m + ix, ci)];
                        }
                    }
                }
                wi += 1;
            }
        }
    }
    out
}

fn linear_flat<'t>(x: Var<'t>, vars: &ModelVars<'t>, name: &str) -> Var<'t> {
    let w = vars.get(&format!("{name}.weight"));
    let b = vars.get(&format!("{name}.bias"));
    let o = w.shape()[1];
    x.matmul(w).add_bcast(b.reshape(&[1, o]))
}

/// Windowed multi-head self-attention with relative position bias.
/// `x` is `[B, H, W, C]` (already layer-normalized), H and W divisible
/// by the window size.
pub fn w_msa<'t>(x: Var<'t>, vars: &ModelVars<'t>, prefix: &str, heads: usize, m: usize) -> Var<'t> {
    let sh = x.shape();
    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let (nh, nw) = (h / m, w / m);
    let n = b * nh * nw;
    let m2 = m * m;
    let d = c / heads;

    // Partition into windows: [N, m^2, C], then flatten rows for the
    // pointwise projections.
    let wins = x
        .reshape(&[b, nh, m, nw, m, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[n * m2, c]);

    let split = |v: Var<'t>| {
        v.reshape(&[n, m2, heads, d])
            .permute(&[0, 2, 1, 3])
            .reshape(&[n * heads, m2, d])
    };
    let q = split(linear_flat(wins, vars, &format!("{prefix}.attn.q")));
    let k = split(linear_flat(wins, vars, &format!("{prefix}.attn.k")));
    let v = split(linear_flat(wins, vars, &format!("{prefix}.attn.v")));

    // Scores: Q K^T / sqrt(d) + relative position bias, softmax over keys.
    let scores = q.bmm(k.permute(&[0, 2, 1])).scale(1.0 / (d as f64).sqrt());
    let idx = Arc::new(relative_position_index(m));
    let bias = vars
        .get(&format!("{prefix}.attn.rel_bias"))
        .gather_rows(idx)
        .reshape(&[m2, m2, heads])
        .permute(&[2, 0, 1])
        .reshape(&[1, heads, m2, m2]);
    let probs = scores
        .reshape(&[n, heads, m2, m2])
        .add_bcast(bias)
        .softmax_last()
        .reshape(&[n * heads, m2, m2]);

    // Apply to values, undo the head split, project, merge windows.
    let ctx = probs
        .bmm(v)
        .reshape(&[n, heads, m2, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[n * m2, c]);
    linear_flat(ctx, vars, &format!("{prefix}.attn.proj"))
        .reshape(&[b, nh, nw, m, m, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[b, h, w, c])
}

/// Gated dual-path feed-forward. `x` is `[B, H, W, C]` post-LN.
fn glen<'t>(x: Var<'t>, vars: &ModelVars<'t>, prefix: &str) -> Var<'t> {
    let sh = x.shape();
    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let flat = x.reshape(&[b * h * w, c]);
    let e = vars.get(&format!("{prefix}.glen.expand_a.weight")).shape()[1];

    let a = linear_flat(flat, vars, &format!("{prefix}.glen.expand_a")).reshape(&[b, h, w, e]);
    let g = linear_flat(flat, vars, &format!("{prefix}.glen.expand_b")).reshape(&[b, h, w, e]);
    let a = a.dwconv3x3_same(
        vars.get(&format!("{prefix}.glen.dw_a.weight")),
        vars.get(&format!("{prefix}.glen.dw_a.bias")),
    );
    let g = g
        .dwconv3x3_same(
            vars.get(&format!("{prefix}.glen.dw_b.weight")),
            vars.get(&format!("{prefix}.glen.dw_b.bias")),
        )
        .gelu();
    linear_flat(a.mul(g).reshape(&[b * h * w, e]), vars, &format!("{prefix}.glen.project"))
        .reshape(&[b, h, w, c])
}

/// One attention block: attention sub-layer then gated feed-forward, each
/// pre-normalized with its own residual connection.
fn vit_block<'t>(
    x: Var<'t>,
    cfg: &ModelConfig,
    vars: &ModelVars<'t>,
    prefix: &str,
    heads: usize,
) -> Var<'t> {
    let y = x.layer_norm(
        vars.get(&format!("{prefix}.ln1.gamma")),
        vars.get(&format!("{prefix}.ln1.beta")),
        LN_EPS,
    );
    let attn = w_msa(y, vars, prefix, heads, cfg.window_size);
    let x1 = if cfg.wmsa_residual { x.add(attn) } else { attn };
    let y2 = x1.layer_norm(
        vars.get(&format!("{prefix}.ln2.gamma")),
        vars.get(&format!("{prefix}.ln2.beta")),
        LN_EPS,
    );
    glen(y2, vars, prefix).add(x1)
}

/// 2x downsampling as a strided 2x2 convolution, realized as
/// space-to-depth plus a pointwise projection (the two are equivalent).
fn down_2x<'t>(x: Var<'t>, vars: &ModelVars<'t>, name: &str) -> Var<'t> {
    let sh = x.shape();
    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let packed = x
        .reshape(&[b, h / 2, 2, w / 2, 2, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[b * (h / 2) * (w / 2), 4 * c]);
    linear_flat(packed, vars, name).reshape(&[b, h / 2, w / 2, 2 * c])
}

/// 2x upsampling as a 2x2 stride-2 transposed convolution, realized as a
/// pointwise projection plus depth-to-space.
fn up_2x<'t>(x: Var<'t>, vars: &ModelVars<'t>, name: &str) -> Var<'t> {
    let sh = x.shape();
    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let co = c / 2;
    linear_flat(x.reshape(&[b * h * w, c]), vars, name)
        .reshape(&[b, h, w, 2, 2, co])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[b, 2 * h, 2 * w, co])
}

/// Full forward pass on pre-padded input `x: [B, H, W, 1]` with both
/// sides divisible by [`ModelConfig::size_divisor`].
pub fn forward<'t>(x: Var<'t>, cfg: &ModelConfig, vars: &ModelVars<'t>) -> Var<'t> {
    let x0 = x.conv3x3_same(vars.get("stem.weight"), vars.get("stem.bias"));

    let mut feats = x0;
    let mut skips: Vec<Var<'t>> = Vec::new();
    for l in 0..cfg.levels - 1 {
        for bi in 0..cfg.blocks_per_level {
            feats = vit_block(feats, cfg, vars, &format!("enc{l}.block{bi}"), cfg.heads[l]);
        }
        skips.push(feats);
        feats = down_2x(feats, vars, &format!("down{l}"));
    }
    {
        let l = cfg.levels - 1;
        for bi in 0..cfg.blocks_per_level {
            feats = vit_block(feats, cfg, vars, &format!("bottleneck.block{bi}"), cfg.heads[l]);
        }
    }
    for l in (0..cfg.levels - 1).rev() {
        feats = up_2x(feats, vars, &format!("up{l}"));
        let skip = skips.pop().expect("one skip per encoder level");
        let sh = feats.shape();
        let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        feats = feats
            .concat_last(skip)
            .reshape(&[b * h * w, 2 * c]);
        feats = linear_flat(feats, vars, &format!("dec{l}.reduce")).reshape(&[b, h, w, c]);
        for bi in 0..cfg.blocks_per_level {
            feats = vit_block(feats, cfg, vars, &format!("dec{l}.block{bi}"), cfg.heads[l]);
        }
    }

    feats
        .add(x0)
        .conv3x3_same(vars.get("head.weight"), vars.get("head.bias"))
}

/// Pads a `[B, H, W]` batch to the divisor grid, runs the network, and
/// crops back: returns a `[B, H, W, 1]` output variable.
pub fn forward_batch<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    vars: &ModelVars<'t>,
    batch: ArrayView3<'_, f64>,
) -> Var<'t> {
    let (b, h, w) = batch.dim();
    let x = tape.constant(
        batch
            .to_owned()
            .into_shape_with_order((b, h, w, 1))
            .expect("adding a channel axis preserves length")
            .into_dyn(),
    );
    let div = cfg.size_divisor();
    let ph = h.next_multiple_of(div) - h;
    let pw = w.next_multiple_of(div) - w;
    let x = if ph > 0 || pw > 0 {
        x.reflect_pad_hw(ph, pw)
    } else {
        x
    };
    let y = forward(x, cfg, vars);
    if ph > 0 || pw > 0 {
        y.crop_hw(h, w)
    } else {
        y
    }
}

/// Applies the trained network to a single plane (inference only; no
/// gradient bookkeeping). The output is the raw network prediction.
pub fn predict_plane(
    cfg: &ModelConfig,
    params: &ParamSet,
    plane: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let (h, w) = plane.dim();
    let tape = Tape::new();
    let vars = ModelVars::bind(&tape, params, false);
    let batch = plane
        .to_owned()
        .into_shape_with_order((1, h, w))
        .expect("batch of one");
    let y = forward_batch(&tape, cfg, &vars, batch.view());
    let out = y.value();
    out.view()
        .to_shape((h, w))
        .expect("output matches input plane")
        .to_owned()
}
