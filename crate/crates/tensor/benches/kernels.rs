use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gpmseg_tensor::{par, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv_step(x: &Tensor, w: &Tensor) -> f64 {
    let tape = Tape::new();
    let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
    let y = xv.conv2d(&wv, None, 1).unwrap().sum();
    tape.backward(&y).unwrap();
    y.value().data()[0]
}

fn attention_step(f: &Tensor, g: &Tensor) -> f64 {
    let tape = Tape::new();
    let (fv, gv) = (tape.leaf(f.clone()), tape.leaf(g.clone()));
    let y = fv.token_attention(&gv, 0.25).unwrap().sum();
    tape.backward(&y).unwrap();
    y.value().data()[0]
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[4, 16, 32, 32], &mut rng);
    let w = random(&[16, 16, 3, 3], &mut rng);
    let f = random(&[4, 8, 512], &mut rng);
    let g = random(&[4, 8, 512], &mut rng);

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for parallel in [false, true] {
        let mode = if parallel { "parallel" } else { "sequential" };
        par::set_parallel(parallel);
        group.bench_with_input(BenchmarkId::new("conv3x3_fwd_bwd", mode), &(), |b, _| b.iter(|| conv_step(&x, &w)));
        group.bench_with_input(BenchmarkId::new("token_attention_fwd_bwd", mode), &(), |b, _| {
            b.iter(|| attention_step(&f, &g))
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
