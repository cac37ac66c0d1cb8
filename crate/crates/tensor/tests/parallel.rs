//! Parallel and sequential execution must agree bit for bit.

use gpmseg_tensor::{par, Tape, Tensor};
use proptest::prelude::*;
use std::sync::Mutex;

// `set_parallel` is process-wide; serialize the tests that flip it.
static SWITCH: Mutex<()> = Mutex::new(());

fn pipeline(x: &Tensor, w: &Tensor) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let y = xv
        .conv2d(&wv, None, 1)
        .unwrap()
        .max_pool2d(2)
        .unwrap()
        .upsample_bilinear(2)
        .unwrap();
    let (b, c, h, ww) = y.value().dims4().unwrap();
    let tokens = y.reshape(&[b, c, h * ww]).unwrap();
    let attn = tokens.matmul(&tokens, true, false).unwrap().softmax_last().unwrap();
    let out = tokens.matmul(&attn, false, true).unwrap();
    let value = out.value().clone();
    let grads = tape.backward(&out.sum()).unwrap();
    (value, grads.wrt(&wv).unwrap().clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn parallel_equals_sequential(seed in 0u64..1000, batch in 1usize..4) {
        let _guard = SWITCH.lock().unwrap();
        let x = Tensor::from_fn(&[batch, 3, 12, 12], |i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0 - 0.5);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i as u64 * 40503 + seed) % 31) as f64 / 31.0 - 0.5);
        par::set_parallel(true);
        let (y_par, g_par) = pipeline(&x, &w);
        par::set_parallel(false);
        let (y_seq, g_seq) = pipeline(&x, &w);
        par::set_parallel(true);
        prop_assert_eq!(y_par.data(), y_seq.data());
        prop_assert_eq!(g_par.data(), g_seq.data());
    }
}
