use std::collections::HashMap;

use gpmseg::backbone::{BackboneConfig, GpmSettings, ModelConfig, SegModel};
use gpmseg::checkpoint;
use gpmseg::dataset::split_by_hash;
use gpmseg::gpm::{attend, enhance, similarity, Ordering, SimilarityScale};
use gpmseg::metrics::dice_iou;
use gpmseg::nn::Ctx;
use gpmseg::tensor::{Module, Tape, Tensor};
use gpmseg::train::{lr_at, seg_loss, LossKind, Schedule};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, range: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-range..range, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn pair(max_c: usize, max_side: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=2usize, 1..=max_c, 1..=max_side, 1..=max_side)
        .prop_flat_map(|(b, c, h, w)| (tensor(vec![b, c, h, w], 20.0), tensor(vec![b, c, h, w], 20.0)))
}

fn mask(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, n)
        .prop_map(move |v| Tensor::new(&[1, 1, 1, n], v.into_iter().map(|b| b as u8 as f64).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_rows_sum_to_one((f, g) in pair(6, 5), tokens in any::<bool>()) {
        let scale = if tokens { SimilarityScale::Tokens } else { SimilarityScale::Channels };
        let tape = Tape::inference();
        let map = similarity(&tape.constant(f.clone()), &tape.constant(g), scale).unwrap();
        let t = f.shape()[2] * f.shape()[3];
        for row in map.values.value().data().chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn fused_attention_matches_explicit((f, g) in pair(6, 5)) {
        let tape = Tape::inference();
        let (f, g) = (tape.constant(f), tape.constant(g));
        let map = similarity(&f, &g, SimilarityScale::Channels).unwrap();
        let explicit = enhance(&f, &g, &map).unwrap();
        let fused = attend(&f, &g, SimilarityScale::Channels).unwrap();
        prop_assert!(fused.value().max_abs_diff(explicit.value()).unwrap() < 1e-10);
    }

    #[test]
    fn dice_iou_identity_and_symmetry((p, g) in (4..64usize).prop_flat_map(|n| (mask(n), mask(n)))) {
        let (d, j) = dice_iou(&p, &g).unwrap();
        let (d2, j2) = dice_iou(&g, &p).unwrap();
        prop_assert_eq!((d, j), (d2, j2));
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d) && j <= d);
    }

    #[test]
    fn hash_split_is_a_stable_partition(n in 0..200usize, frac in 0.0..0.9f64) {
        let ids: Vec<String> = (0..n).map(|i| format!("img{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let (train, val) = split_by_hash(&refs, frac);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let (train2, _) = split_by_hash(&refs[..n / 2], frac);
        let expected: Vec<usize> = train.iter().copied().filter(|&i| i < n / 2).collect();
        prop_assert_eq!(train2, expected);
    }

    #[test]
    fn cosine_decays_between_bounds(lr in 1e-4..1e-1f64, ratio in 1e-3..0.5f64, t_max in 1..200usize) {
        let lr_min = lr * ratio;
        let mut prev = f64::INFINITY;
        for e in 0..=t_max {
            let v = lr_at(e, lr, lr_min, t_max, Schedule::Cosine);
            prop_assert!(v <= prev + 1e-18 && v >= lr_min - 1e-15 && v <= lr + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn loss_is_finite_and_nonnegative(logits in tensor(vec![1, 1, 4, 4], 50.0), target in mask(16)) {
        let target = target.reshape(&[1, 1, 4, 4]).unwrap();
        for kind in [LossKind::DiceBce, LossKind::Dice, LossKind::Bce] {
            let tape = Tape::new();
            let l = seg_loss(&tape.leaf(logits.clone()), &target, kind).unwrap();
            let v = l.value().data()[0];
            prop_assert!(v.is_finite() && v >= 0.0);
            let grads = tape.backward(&l).unwrap();
            prop_assert!(grads.into_param_map().is_empty());
        }
    }
}

fn model(gpm: Option<GpmSettings>) -> SegModel {
    SegModel::new(ModelConfig {
        backbone: BackboneConfig::new(4),
        gpm,
        init_seed: 5,
    })
    .unwrap()
}

fn inputs() -> (Tensor, Tensor) {
    let image = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 7919) % 101) as f64 / 101.0);
    let depth = Tensor::from_fn(&[2, 1, 32, 32], |i| ((i * 104_729) % 97) as f64 / 97.0);
    (image, depth)
}

#[test]
fn gpm_insertion_keeps_backbone_layer_shapes() {
    let (image, depth) = inputs();
    let trace = |m: &SegModel, d: Option<&Tensor>| {
        let tape = Tape::inference();
        let ctx = Ctx::tracing(&tape, false);
        let d = d.map(|d| tape.constant(d.clone()));
        m.forward(&ctx, &tape.constant(image.clone()), d.as_ref()).unwrap();
        ctx.take_trace()
            .into_iter()
            .filter(|(name, _)| name.starts_with("unet."))
            .collect::<Vec<_>>()
    };
    let plain = trace(&model(None), None);
    assert!(plain.len() >= 10);
    for ordering in [Ordering::BottomToTop, Ordering::TopToBottom] {
        let with = model(Some(GpmSettings { ordering, ..GpmSettings::default() }));
        assert_eq!(trace(&with, Some(&depth)), plain);
    }
}

/// A parameter passes if any of a few initializations gives it a nonzero
/// gradient; a single dead bottleneck unit can zero it for one draw.
#[test]
fn every_parameter_receives_gradient() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let image = Tensor::from_fn(&[4, 3, 32, 32], |_| rng.random_range(-2.0..2.0));
    let depth = Tensor::from_fn(&[4, 1, 32, 32], |_| rng.random_range(-1.0..2.0));
    let mask = Tensor::from_fn(&[4, 1, 32, 32], |i| ((i / 32) % 32 > 12 && i % 32 > 9) as u8 as f64);
    for ordering in [Ordering::BottomToTop, Ordering::TopToBottom] {
        let settings = Some(GpmSettings { ordering, ..GpmSettings::default() });
        let mut reached: HashMap<String, bool> = HashMap::new();
        for init_seed in 0..8 {
            let m = SegModel::new(ModelConfig { backbone: BackboneConfig::new(4), gpm: settings, init_seed }).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, true);
            let logits = m
                .forward(&ctx, &tape.constant(image.clone()), Some(&tape.constant(depth.clone())))
                .unwrap();
            let loss = seg_loss(&logits, &mask, LossKind::DiceBce).unwrap();
            let grads = tape.backward(&loss).unwrap().into_param_map();
            m.visit_params(&mut |p| {
                if p.is_trainable() {
                    let hit = grads.get(p.name()).is_some_and(|g| g.max_abs() > 0.0);
                    *reached.entry(p.name().to_string()).or_default() |= hit;
                }
            });
        }
        // The depth stream leaving the final stage feeds nothing.
        let unused = format!("gpm.stage{}.tex_", ordering.visit_order()[3]);
        let mut dead: Vec<_> = reached
            .into_iter()
            .filter(|(name, hit)| !hit && !name.starts_with(&unused))
            .map(|(name, _)| name)
            .collect();
        dead.sort();
        assert!(dead.is_empty(), "{ordering:?}: no gradient for {dead:?}");
    }
}

#[test]
fn checkpoint_round_trip_restores_predictions() {
    let (image, depth) = inputs();
    let a = model(Some(GpmSettings::default()));
    let bytes = checkpoint::encode(&serde_json::json!({ "note": "x" }), &a);
    let ckpt = checkpoint::decode(&bytes).unwrap();
    assert_eq!(ckpt.manifest["note"], "x");
    let mut b = SegModel::new(ModelConfig { init_seed: 99, ..a.config }).unwrap();
    checkpoint::restore(&mut b, &ckpt).unwrap();
    let pa = a.predict(&image, Some(&depth)).unwrap();
    let pb = b.predict(&image, Some(&depth)).unwrap();
    assert_eq!(pa.data(), pb.data());
}
