use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gpmseg::backbone::{BackboneConfig, GpmSettings, ModelConfig, SegModel};
use gpmseg::dataset::{make_batch, synth_dataset, SceneConfig};
use gpmseg::gpm::{GpmStage, StageConfig};
use gpmseg::nn::Ctx;
use gpmseg::tensor::{par, Tape, Tensor};
use gpmseg::train::{train_step, AdamW, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stage_step(stage: &GpmStage, f: &Tensor, d: &Tensor) -> f64 {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, true);
    let (fe, de) = stage.forward(&ctx, &tape.constant(f.clone()), &tape.constant(d.clone())).unwrap();
    let loss = fe.sum().add(&de.sum()).unwrap();
    tape.backward(&loss).unwrap();
    loss.value().data()[0]
}

fn gpm_parallel(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stage = GpmStage::new("s", StageConfig::for_channels(16), &mut rng).unwrap();
    let f = Tensor::from_fn(&[4, 16, 32, 32], |_| rng.random_range(-1.0..1.0));
    let d = Tensor::from_fn(&[4, 8, 16, 16], |_| rng.random_range(-1.0..1.0));

    let samples = synth_dataset(4, &SceneConfig::new(32), 0).unwrap();
    let batch = make_batch(&samples.iter().collect::<Vec<_>>()).unwrap();
    let config = ModelConfig {
        backbone: BackboneConfig::new(8),
        gpm: Some(GpmSettings::default()),
        init_seed: 0,
    };

    let mut group = c.benchmark_group("gpm");
    group.sample_size(10);
    for parallel in [false, true] {
        let mode = if parallel { "parallel" } else { "sequential" };
        par::set_parallel(parallel);
        group.bench_with_input(BenchmarkId::new("stage_fwd_bwd", mode), &(), |b, _| {
            b.iter(|| stage_step(&stage, &f, &d))
        });
        let mut model = SegModel::new(config).unwrap();
        let mut opt = AdamW::new(5e-3);
        group.bench_with_input(BenchmarkId::new("model_train_step", mode), &(), |b, _| {
            b.iter(|| train_step(&mut model, &mut opt, &batch, LossKind::DiceBce, 1e-3).unwrap())
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, gpm_parallel);
criterion_main!(benches);
