//! Layer primitives shared by the backbone and the GPM blocks.

use std::cell::RefCell;
use std::collections::HashMap;

use gpmseg_tensor::ops::BatchStats;
use gpmseg_tensor::{join_name, Module, Param, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-forward state: the tape, the train/eval switch, batch-norm statistics
/// waiting to be folded into the running buffers, and an optional shape trace.
type ShapeTrace = RefCell<Vec<(String, Vec<usize>)>>;

pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub train: bool,
    stats: RefCell<Vec<(String, BatchStats)>>,
    trace: Option<ShapeTrace>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, train: bool) -> Self {
        Self {
            tape,
            train,
            stats: RefCell::new(Vec::new()),
            trace: None,
        }
    }

    /// Like [`Ctx::new`] but records the output shape of every traced block.
    pub fn tracing(tape: &'t Tape, train: bool) -> Self {
        Self {
            trace: Some(RefCell::new(Vec::new())),
            ..Self::new(tape, train)
        }
    }

    pub fn trace(&self, name: &str, v: &Var<'_>) {
        if let Some(t) = &self.trace {
            t.borrow_mut().push((name.to_string(), v.shape().to_vec()));
        }
    }

    pub fn take_trace(&self) -> Vec<(String, Vec<usize>)> {
        self.trace
            .as_ref()
            .map(|t| std::mem::take(&mut *t.borrow_mut()))
            .unwrap_or_default()
    }

    pub fn take_stats(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    fn push_stats(&self, name: &str, s: BatchStats) {
        self.stats.borrow_mut().push((name.to_string(), s));
    }
}

/// Normal init with `std = gain / sqrt(fan_in)`.
pub fn kaiming_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Gain for layers followed by a ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
/// Gain for linear maps.
pub const LINEAR_GAIN: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    weight: Param,
    bias: Option<Param>,
}

impl Conv2d {
    /// Stride-1 convolution with "same" padding (`kernel` must be odd).
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        let weight = kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, gain, rng);
        Self {
            in_channels,
            out_channels,
            kernel,
            pad: kernel / 2,
            weight: Param::new(join_name(prefix, "weight"), weight),
            bias: bias.then(|| Param::new(join_name(prefix, "bias"), Tensor::zeros(&[out_channels]))),
        }
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Param {
        &mut self.weight
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = x.value().dims4()?;
        if c != self.in_channels {
            return Err(invalid(format!(
                "{}: expected {} input channels, got {c}",
                self.weight.name(),
                self.in_channels
            )));
        }
        let w = ctx.tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.tape.param(b));
        Ok(x.conv2d(&w, b.as_ref(), self.pad)?)
    }
}

impl Module for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Transposed convolution with kernel equal to stride (exact `k`x upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    weight: Param,
    bias: Param,
}

impl ConvTranspose2d {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel sees exactly one tap per input channel
        let weight = kaiming_normal(
            &[in_channels, out_channels, kernel, kernel],
            in_channels,
            LINEAR_GAIN,
            rng,
        );
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::new(join_name(prefix, "weight"), weight),
            bias: Param::new(join_name(prefix, "bias"), Tensor::zeros(&[out_channels])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let w = ctx.tape.param(&self.weight);
        let b = ctx.tape.param(&self.bias);
        Ok(x.conv_transpose2d(&w, Some(&b))?)
    }
}

impl Module for ConvTranspose2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    prefix: String,
    weight: Param,
    bias: Param,
    running_mean: Param,
    running_var: Param,
}

impl BatchNorm2d {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            channels,
            prefix: prefix.to_string(),
            weight: Param::new(join_name(prefix, "weight"), Tensor::ones(&[channels])),
            bias: Param::new(join_name(prefix, "bias"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(join_name(prefix, "running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(join_name(prefix, "running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let g = ctx.tape.param(&self.weight);
        let b = ctx.tape.param(&self.bias);
        if ctx.train {
            let (y, stats) = x.batch_norm_train(&g, &b, BN_EPS)?;
            ctx.push_stats(&self.prefix, stats);
            Ok(y)
        } else {
            Ok(x.batch_norm_eval(
                &g,
                &b,
                self.running_mean.value(),
                self.running_var.value(),
                BN_EPS,
            )?)
        }
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Folds batch statistics into the running buffers of `model`. The running
/// variance uses the unbiased estimate.
pub fn apply_batch_stats(model: &mut dyn Module, stats: &[(String, BatchStats)]) {
    let by_name: HashMap<&str, &BatchStats> = stats.iter().map(|(n, s)| (n.as_str(), s)).collect();
    model.visit_params_mut(&mut |p| {
        let name = p.name().to_string();
        let (prefix, field) = match name.rsplit_once('.') {
            Some(x) => x,
            None => return,
        };
        let Some(s) = by_name.get(prefix) else { return };
        let m = BN_MOMENTUM;
        match field {
            "running_mean" => {
                for (r, &v) in p.value_mut().data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
            "running_var" => {
                let n = s.count as f64;
                let corr = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
                for (r, &v) in p.value_mut().data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - m) * *r + m * v * corr;
                }
            }
            _ => {}
        }
    });
}

/// Copies every parameter into a name-indexed map.
pub fn state_dict(model: &dyn Module) -> Vec<Param> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.push(p.clone()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_std_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = kaiming_normal(&[20000], 8, RELU_GAIN, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - 0.25).abs() < 0.01, "{var}");
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&ctx, &x).unwrap();
        apply_batch_stats(&mut bn, &ctx.take_stats());
        assert!((bn.running_mean.value().data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        let expect = 0.9 + 0.1 * 5.0 / 3.0;
        assert!((bn.running_var.value().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new("c", 3, 4, 3, true, RELU_GAIN, &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(conv.forward(&ctx, &x).is_err());
        assert_eq!(conv.num_trainable(), 4 * 3 * 9 + 4);
    }
}
