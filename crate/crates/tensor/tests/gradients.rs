//! Every differentiable op against central finite differences.

use gpmseg_tensor::gradcheck::{check_gradients, GradCheck};
use gpmseg_tensor::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weights the output so the scalar depends on every element differently.
fn probe<'t>(tape: &'t Tape, y: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.constant(random(y.shape(), seed ^ 0xabcdef));
    Ok(y.mul(&w)?.sum())
}

fn assert_close<F>(inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = check_gradients(GradCheck::default(), inputs, f).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn elementwise_ops() {
    let a = random(&[2, 3, 4, 4], 1);
    let b = random(&[2, 3, 4, 4], 2);
    assert_close(&[a.clone(), b.clone()], |t, v| {
        let y = v[0].add(&v[1])?.mul(&v[0])?.sub(&v[1].scale(0.3))?;
        probe(t, &y, 3)
    });
    assert_close(std::slice::from_ref(&a), |t, v| probe(t, &v[0].sigmoid(), 4));
    assert_close(&[a], |t, v| probe(t, &v[0].relu(), 5));
}

#[test]
fn broadcast_multiply_all_kinds() {
    let x = random(&[2, 3, 4, 5], 10);
    for gate_shape in [[2, 1, 4, 5], [2, 3, 1, 1], [2, 1, 1, 1], [2, 3, 4, 5]] {
        let g = random(&gate_shape, 11);
        assert_close(&[x.clone(), g], |t, v| probe(t, &v[0].mul_broadcast(&v[1])?, 12));
    }
}

#[test]
fn convolution_with_and_without_bias() {
    let x = random(&[2, 3, 5, 6], 20);
    let w = random(&[4, 3, 3, 3], 21);
    let b = random(&[4], 22);
    assert_close(&[x.clone(), w.clone(), b], |t, v| {
        probe(t, &v[0].conv2d(&v[1], Some(&v[2]), 1)?, 23)
    });
    let w7 = random(&[1, 3, 7, 7], 24);
    assert_close(&[x.clone(), w7], |t, v| probe(t, &v[0].conv2d(&v[1], None, 3)?, 25));
    let w1 = random(&[2, 3, 1, 1], 26);
    assert_close(&[x, w1], |t, v| probe(t, &v[0].conv2d(&v[1], None, 0)?, 27));
}

#[test]
fn transposed_convolution() {
    let x = random(&[2, 3, 3, 2], 30);
    let w = random(&[3, 2, 2, 2], 31);
    let b = random(&[2], 32);
    assert_close(&[x, w, b], |t, v| {
        probe(t, &v[0].conv_transpose2d(&v[1], Some(&v[2]))?, 33)
    });
}

#[test]
fn pooling_ops() {
    let x = random(&[2, 3, 4, 6], 40);
    assert_close(std::slice::from_ref(&x), |t, v| probe(t, &v[0].max_pool2d(2)?, 41));
    assert_close(std::slice::from_ref(&x), |t, v| probe(t, &v[0].avg_pool2d(2)?, 42));
    assert_close(std::slice::from_ref(&x), |t, v| probe(t, &v[0].channel_mean()?, 43));
    assert_close(std::slice::from_ref(&x), |t, v| probe(t, &v[0].channel_max()?, 44));
    assert_close(std::slice::from_ref(&x), |t, v| probe(t, &v[0].global_avg_pool()?, 45));
    assert_close(&[x], |t, v| probe(t, &v[0].global_max_pool()?, 46));
}

#[test]
fn bilinear_resize_up_and_down() {
    let x = random(&[1, 2, 3, 4], 50);
    assert_close(std::slice::from_ref(&x), |t, v| probe(t, &v[0].upsample_bilinear(2)?, 51));
    assert_close(std::slice::from_ref(&x), |t, v| probe(t, &v[0].resize_bilinear(2, 7)?, 52));
    assert_close(&[x], |t, v| probe(t, &v[0].resize_bilinear(1, 1)?, 53));
}

#[test]
fn batch_norm_both_modes() {
    let x = random(&[3, 2, 3, 3], 60);
    let g = random(&[2], 61);
    let b = random(&[2], 62);
    assert_close(&[x.clone(), g.clone(), b.clone()], |t, v| {
        let (y, _) = v[0].batch_norm_train(&v[1], &v[2], 1e-5)?;
        probe(t, &y, 63)
    });
    let rm = random(&[2], 64);
    let rv = random(&[2], 65).map(|v| v.abs() + 0.5);
    assert_close(&[x, g, b], move |t, v| {
        let y = v[0].batch_norm_eval(&v[1], &v[2], &rm, &rv, 1e-5)?;
        probe(t, &y, 66)
    });
}

#[test]
fn matmul_all_transposes_and_softmax() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = random(if ta { &[2, 3, 4] } else { &[2, 4, 3] }, 70);
        let b = random(if tb { &[2, 5, 3] } else { &[2, 3, 5] }, 71);
        assert_close(&[a, b], |t, v| probe(t, &v[0].matmul(&v[1], ta, tb)?, 72));
    }
    let x = random(&[2, 3, 5], 73).map(|v| v * 3.0);
    assert_close(&[x], |t, v| probe(t, &v[0].softmax_last()?, 74));
}

#[test]
fn fused_token_attention() {
    // 70 tokens: one full block of 64 plus a partial block
    let f = random(&[1, 3, 70], 100);
    let g = random(&[1, 3, 70], 101);
    assert_close(&[f, g], |t, v| probe(t, &v[0].token_attention(&v[1], 0.7)?, 102));
}

#[test]
fn shape_ops() {
    let a = random(&[2, 1, 3, 3], 80);
    let b = random(&[2, 2, 3, 3], 81);
    assert_close(&[a, b], |t, v| {
        let y = Var::concat_channels(&[&v[0], &v[1]])?;
        probe(t, &y.reshape(&[2, 3, 9])?, 82)
    });
}

#[test]
fn reused_values_accumulate_gradients() {
    let x = random(&[1, 2, 3, 3], 90);
    assert_close(&[x], |t, v| {
        let s = v[0].sigmoid();
        let y = s.mul(&s)?.add(&v[0])?;
        probe(t, &y, 91)
    });
}
