//! Finite-difference verification for every differentiable operation.
//!
//! Each check builds `loss = mean(op(params) * probe)` with a fixed random
//! probe array, computes analytic gradients via the tape, and compares
//! every component against a central difference. All arithmetic is f64;
//! smooth ops are expected to agree to ~1e-6 relative error.

use std::sync::Arc;

use isosr_autograd::{check, Arr, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_arr(shape: &[usize], seed: u64) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Random values bounded away from zero (for kinked ops like `abs`).
fn rand_arr_nonzero(shape: &[usize], seed: u64) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Identity helper that pins the higher-ranked lifetime bound on closures.
fn builder<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    f
}

fn gradcheck<F>(name: &str, params: Vec<Arr>, build: F, h: f64, tol: f64)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    // Dry run to learn the output shape, then fix a probe so the scalar
    // under test is a smooth linear functional of the op output.
    let probe = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
        let out = build(&tape, &vars);
        rand_arr(&out.shape(), 0x9D0E)
    };

    let scalar = |ps: &[Arr]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.var(p.clone())).collect();
        let out = build(&tape, &vars);
        let loss = out.mul(tape.constant(probe.clone())).mean_all();
        loss.value()[IxDyn(&[])]
    };

    let analytic: Vec<Arr> = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
        let out = build(&tape, &vars);
        let loss = out.mul(tape.constant(probe.clone())).mean_all();
        let grads = tape.backward(loss);
        vars.iter()
            .zip(&params)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Arr::zeros(p.raw_dim()))
            })
            .collect()
    };

    let worst = check::assert_gradients_match(scalar, &params, &analytic, h, tol);
    eprintln!("gradcheck {name}: worst rel err {worst:.3e}");
}

#[test]
fn add_sub_mul_scale() {
    let a = rand_arr(&[3, 4], 1);
    let b = rand_arr(&[3, 4], 2);
    gradcheck("add", vec![a.clone(), b.clone()], builder(|_, v| v[0].add(v[1])), 1e-6, 1e-6);
    gradcheck("sub", vec![a.clone(), b.clone()], builder(|_, v| v[0].sub(v[1])), 1e-6, 1e-6);
    gradcheck("mul", vec![a.clone(), b], builder(|_, v| v[0].mul(v[1])), 1e-6, 1e-6);
    gradcheck("scale", vec![a], builder(|_, v| v[0].scale(-1.7)), 1e-6, 1e-6);
}

#[test]
fn broadcast_ops() {
    let a = rand_arr(&[2, 3, 4], 3);
    let b = rand_arr(&[1, 3, 1], 4);
    gradcheck(
        "add_bcast",
        vec![a.clone(), b.clone()],
        builder(|_, v| v[0].add_bcast(v[1])),
        1e-6,
        1e-6,
    );
    gradcheck(
        "mul_bcast",
        vec![a, b],
        builder(|_, v| v[0].mul_bcast(v[1])),
        1e-6,
        1e-6,
    );
}

#[test]
fn elementwise_nonlinearities() {
    gradcheck(
        "abs",
        vec![rand_arr_nonzero(&[3, 5], 5)],
        builder(|_, v| v[0].abs()),
        1e-6,
        1e-6,
    );
    gradcheck(
        "gelu",
        vec![rand_arr(&[3, 5], 6).mapv(|v| v * 2.0)],
        builder(|_, v| v[0].gelu()),
        1e-6,
        1e-5,
    );
    gradcheck(
        "tanh",
        vec![rand_arr(&[3, 5], 7)],
        builder(|_, v| v[0].tanh()),
        1e-6,
        1e-6,
    );
}

#[test]
fn reductions() {
    gradcheck(
        "mean_all",
        vec![rand_arr(&[4, 3], 8)],
        builder(|_, v| v[0].mean_all()),
        1e-6,
        1e-6,
    );
    gradcheck(
        "sum_all",
        vec![rand_arr(&[4, 3], 9)],
        builder(|_, v| v[0].sum_all()),
        1e-6,
        1e-6,
    );
}

#[test]
fn shape_ops() {
    gradcheck(
        "reshape",
        vec![rand_arr(&[2, 3, 4], 10)],
        builder(|_, v| v[0].reshape(&[4, 6]).gelu()),
        1e-6,
        1e-5,
    );
    gradcheck(
        "permute",
        vec![rand_arr(&[2, 3, 4], 11)],
        builder(|_, v| v[0].permute(&[2, 0, 1]).gelu()),
        1e-6,
        1e-5,
    );
    gradcheck(
        "concat_last",
        vec![rand_arr(&[2, 3], 12), rand_arr(&[2, 5], 13)],
        builder(|_, v| v[0].concat_last(v[1])),
        1e-6,
        1e-6,
    );
    let indices = Arc::new(vec![0usize, 4, 2, 2, 0]);
    gradcheck(
        "gather_rows",
        vec![rand_arr(&[5, 3], 14)],
        builder(move |_, v| v[0].gather_rows(Arc::clone(&indices))),
        1e-6,
        1e-6,
    );
}

#[test]
fn matrix_products() {
    gradcheck(
        "matmul",
        vec![rand_arr(&[3, 4], 15), rand_arr(&[4, 2], 16)],
        builder(|_, v| v[0].matmul(v[1])),
        1e-6,
        1e-5,
    );
    gradcheck(
        "bmm",
        vec![rand_arr(&[2, 3, 4], 17), rand_arr(&[2, 4, 2], 18)],
        builder(|_, v| v[0].bmm(v[1])),
        1e-6,
        1e-5,
    );
}

#[test]
fn softmax_and_layer_norm() {
    gradcheck(
        "softmax_last",
        vec![rand_arr(&[2, 5], 19).mapv(|v| v * 3.0)],
        builder(|_, v| v[0].softmax_last()),
        1e-6,
        1e-5,
    );
    gradcheck(
        "layer_norm",
        vec![
            rand_arr(&[2, 3, 6], 20),
            rand_arr(&[6], 21),
            rand_arr(&[6], 22),
        ],
        builder(|_, v| v[0].layer_norm(v[1], v[2], 1e-5)),
        1e-6,
        1e-4,
    );
}

#[test]
fn sort_routes_gradients_through_permutation() {
    // Values are spaced well apart so the finite-difference step cannot
    // reorder them; the subgradient is then exact.
    let x = Arr::from_shape_vec(
        IxDyn(&[2, 5]),
        vec![0.9, -0.3, 0.1, 0.5, -0.8, -0.2, 0.7, 0.3, -0.6, 0.0],
    )
    .unwrap();
    gradcheck("sort_last", vec![x], builder(|_, v| v[0].sort_last()), 1e-6, 1e-6);
}

#[test]
fn spatial_ops() {
    gradcheck(
        "reflect_pad_hw",
        vec![rand_arr(&[2, 5, 4, 3], 23)],
        builder(|_, v| v[0].reflect_pad_hw(3, 2)),
        1e-6,
        1e-6,
    );
    // Padding wider than the axis wraps the mirror period more than once.
    gradcheck(
        "reflect_pad_hw_wide",
        vec![rand_arr(&[1, 3, 3, 2], 24)],
        builder(|_, v| v[0].reflect_pad_hw(4, 4)),
        1e-6,
        1e-6,
    );
    gradcheck(
        "crop_hw",
        vec![rand_arr(&[2, 5, 6, 3], 25)],
        builder(|_, v| v[0].crop_hw(3, 4)),
        1e-6,
        1e-6,
    );
}

#[test]
fn convolutions() {
    gradcheck(
        "conv3x3_same",
        vec![
            rand_arr(&[2, 4, 5, 3], 26),
            rand_arr(&[3, 3, 3, 2], 27),
            rand_arr(&[2], 28),
        ],
        builder(|_, v| v[0].conv3x3_same(v[1], v[2])),
        1e-6,
        1e-5,
    );
    gradcheck(
        "dwconv3x3_same",
        vec![
            rand_arr(&[2, 4, 5, 3], 29),
            rand_arr(&[3, 3, 3], 30),
            rand_arr(&[3], 31),
        ],
        builder(|_, v| v[0].dwconv3x3_same(v[1], v[2])),
        1e-6,
        1e-5,
    );
}

#[test]
fn composite_attention_chain() {
    // A miniature attention computation touching bmm, softmax, permute and
    // reshape in one graph: scores = Q K^T / sqrt(d), attn = softmax, out =
    // attn V. Verifies the chain rule across op boundaries.
    let q = rand_arr(&[2, 3, 4], 32);
    let k = rand_arr(&[2, 3, 4], 33);
    let v = rand_arr(&[2, 3, 4], 34);
    gradcheck(
        "attention_chain",
        vec![q, k, v],
        builder(|_, vars| {
            let kt = vars[1].permute(&[0, 2, 1]);
            let scores = vars[0].bmm(kt).scale(0.5);
            scores.softmax_last().bmm(vars[2])
        }),
        1e-6,
        1e-5,
    );
}
