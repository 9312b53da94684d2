mod common;

use common::gradsuite::{primitive_errors, TOL};
use common::rng;
use favae::tensor::{kernels, Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..20 {
        for (name, err) in primitive_errors(seed) {
            assert!(err < TOL, "{name} (seed {seed}): relative gradient error {err:e}");
        }
    }
}

#[test]
fn stop_gradient_passes_values_and_blocks_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_fn(&[3], |i| i as f64 + 1.0));
    let s = t.stop_gradient(x);
    assert_eq!(t.value(s), t.value(x));
    let sq = t.mul(s, x).unwrap();
    let loss = t.sum(sq);
    let g = t.backward(loss).unwrap().wrt(&t, x);
    // Only the direct path contributes: d/dx (stop(x)·x) = stop(x).
    assert_eq!(g.data(), [1.0, 2.0, 3.0]);
}

#[test]
fn conv_adjoint_identity() {
    for seed in 0..20 {
        let mut r = rng(700 + seed);
        let stride = 1 + (seed % 3) as usize;
        let pad = (seed % 2) as usize;
        let x = Tensor::randn(&[2, 3, 9, 9], &mut r);
        let k = Tensor::randn(&[4, 3, 3, 3], &mut r);
        let (cx, _) = kernels::conv2d(&x, &k, None, stride, pad).unwrap();
        let y = Tensor::randn(cx.dims(), &mut r);
        // output_padding recovers the input size lost to the strided floor.
        let [_, _, oh, _] = cx.dims4("test").unwrap();
        let lost = (9 + 2 * pad - 3) - (oh - 1) * stride;
        let (ty, _) = kernels::conv_transpose2d(&y, &k, None, stride, pad, lost).unwrap();
        assert_eq!(ty.dims(), x.dims());
        let (lhs, rhs) = (cx.dot(&y), x.dot(&ty));
        assert!(
            (lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()),
            "adjoint mismatch {lhs} vs {rhs}"
        );
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut r = rng(9);
        let x = Tensor::randn(&[2, 3, 8, 8], &mut r);
        let k = Tensor::randn(&[5, 3, 3, 3], &mut r);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let kv = t.constant(k);
        let c = t.conv2d(xv, kv, None, 1, 1).unwrap();
        t.value(c).clone()
    };
    assert_eq!(run().data(), run().data());
}
