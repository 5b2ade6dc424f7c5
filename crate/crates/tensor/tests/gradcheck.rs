//! Autodiff against five-point central finite differences.

mod common;

use common::{best_global_error, max_rel_error};
use fedsparse_tensor::{BatchNormMode, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random fixed weights turn any output into a scalar with a generic gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = randn(tape.shape(y), seed ^ 0x5eed);
    let wv = tape.leaf(&w);
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}

#[test]
fn elementwise_and_broadcast() {
    let inputs = [randn(&[3, 4], 1), randn(&[4], 2), randn(&[3, 1], 3)];
    let err = max_rel_error(&inputs, |tape, v| {
        let a = tape.add(v[0], v[1]).unwrap();
        let b = tape.mul(a, v[2]).unwrap();
        let c = tape.sub(b, v[1]).unwrap();
        let d = tape.scale(c, 0.7);
        let e = tape.add_scalar(d, 0.3);
        weighted_sum(tape, e, 4)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn batched_matmul_with_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [5, 4] } else { [4, 5] };
        let inputs = [randn(&a_shape, 10), randn(&b_shape, 11)];
        let err = max_rel_error(&inputs, |tape, v| {
            let y = tape.matmul_t(v[0], v[1], ta, tb).unwrap();
            weighted_sum(tape, y, 12)
        });
        assert!(err < TOL, "ta={ta} tb={tb}: {err}");
    }
}

#[test]
fn softmax_gelu_exp_relu() {
    let inputs = [randn(&[3, 5], 20)];
    let err = max_rel_error(&inputs, |tape, v| {
        let s = tape.softmax(v[0], 1).unwrap();
        let s0 = tape.softmax(v[0], 0).unwrap();
        let g = tape.gelu(v[0]);
        let e = tape.exp(v[0]);
        let a = tape.add(s, g).unwrap();
        let b = tape.add(a, s0).unwrap();
        let c = tape.mul(b, e).unwrap();
        weighted_sum(tape, c, 21)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn norms_and_reductions() {
    let inputs = [randn(&[4, 6], 30), randn(&[6], 31), randn(&[6], 32)];
    let err = max_rel_error(&inputs, |tape, v| {
        let ln = tape.layer_norm(v[0], v[1], v[2]).unwrap();
        let (bn, _) = tape.batch_norm(v[0], v[1], v[2], BatchNormMode::Train).unwrap();
        let sum = tape.add(ln, bn).unwrap();
        let pooled = tape.mean_axis(sum, 0).unwrap();
        let unit = tape.l2_normalize(sum).unwrap();
        let a = weighted_sum(tape, pooled, 33);
        let b = weighted_sum(tape, unit, 34);
        let m = tape.mean(sum);
        let ab = tape.add(a, b).unwrap();
        tape.add(ab, m).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn eval_batch_norm() {
    let inputs = [randn(&[3, 4], 35), randn(&[4], 36), randn(&[4], 37)];
    let err = max_rel_error(&inputs, |tape, v| {
        let mode = BatchNormMode::Eval { running_mean: &[0.1, -0.2, 0.3, 0.0], running_var: &[1.5, 0.5, 2.0, 1.0] };
        let (bn, _) = tape.batch_norm(v[0], v[1], v[2], mode).unwrap();
        weighted_sum(tape, bn, 38)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn cross_entropy_embedding_narrow_permute() {
    let inputs = [randn(&[5, 3], 40), randn(&[2, 3, 4], 41)];
    let err = max_rel_error(&inputs, |tape, v| {
        let rows = tape.embedding(v[0], &[1, 4, 1, 0]).unwrap();
        let loss = tape.cross_entropy(rows, &[0, 2, 1, 1]).unwrap();
        let p = tape.permute(v[1], &[2, 0, 1]).unwrap();
        let n = tape.narrow(p, 0, 1, 2).unwrap();
        let r = tape.reshape(n, &[12]).unwrap();
        let w = weighted_sum(tape, r, 42);
        tape.add(loss, w).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_block_composite() {
    // Single-head self-attention with a residual and layer norm.
    let inputs = [randn(&[2, 3, 4], 50), randn(&[4, 4], 51), randn(&[4, 4], 52), randn(&[4, 4], 53)];
    let err = max_rel_error(&inputs, |tape, v| {
        let x = v[0];
        let q = tape.linear(x, v[1], None).unwrap();
        let k = tape.linear(x, v[2], None).unwrap();
        let val = tape.linear(x, v[3], None).unwrap();
        let scores = tape.matmul_t(q, k, false, true).unwrap();
        let scores = tape.scale(scores, 0.5);
        let attn = tape.softmax(scores, 2).unwrap();
        let out = tape.matmul(attn, val).unwrap();
        let res = tape.add(out, x).unwrap();
        let ones = tape.leaf(&Tensor::ones(&[4]));
        let zeros = tape.leaf(&Tensor::zeros(&[4]));
        let y = tape.layer_norm(res, ones, zeros).unwrap();
        weighted_sum(tape, y, 54)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn repeated_use_of_one_tensor_sums_contributions() {
    let x = randn(&[3], 60).with_requires_grad(true);
    let mut tape = Tape::new();
    let a = tape.leaf(&x);
    let b = tape.leaf(&x);
    let y = tape.mul(a, b).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let expected: Vec<f32> = x.data().iter().map(|v| 2.0 * v).collect();
    for (g, e) in grads.get(&x).unwrap().iter().zip(expected) {
        assert!((g - e).abs() < 1e-6);
    }
}

/// A random chain of differentiable ops on tensors of at most 64 elements.
fn random_graph(ops: &[u8], seed: u64) -> f64 {
    let inputs = [randn(&[4, 4], seed), randn(&[4, 4], seed + 1), randn(&[4], seed + 2)];
    best_global_error(&inputs, &[3e-2, 1e-2, 3e-3, 1e-3], |tape, v| {
        let mut x = v[0];
        for (i, op) in ops.iter().enumerate() {
            x = match op % 8 {
                0 => tape.matmul(x, v[1]).unwrap(),
                1 => tape.softmax(x, 1).unwrap(),
                2 => tape.gelu(x),
                3 => tape.add(x, v[2]).unwrap(),
                4 => tape.mul(x, v[1]).unwrap(),
                5 => {
                    let ones = tape.leaf(&Tensor::ones(&[4]));
                    tape.layer_norm(x, ones, v[2]).unwrap()
                }
                6 => tape.matmul_t(v[1], x, true, false).unwrap(),
                _ => {
                    let s = tape.scale(x, 0.5 + i as f32 * 0.1);
                    tape.sub(s, v[0]).unwrap()
                }
            };
        }
        weighted_sum(tape, x, seed + 3)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn random_graphs_match_finite_differences(ops in prop::collection::vec(0u8..8, 1..6), seed in 0u64..10_000) {
        let err = random_graph(&ops, seed);
        prop_assert!(err < TOL, "ops {:?} seed {}: {}", ops, seed, err);
    }

    #[test]
    // Logit spreads up to 16 keep every probability representable inside (0, 1) in f32.
    fn softmax_rows_are_distributions(data in prop::collection::vec(-8.0f32..8.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3, 4], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).chunks(4) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

