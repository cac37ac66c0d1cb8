//! CBAM-style spatial and channel attention gates.

use gpmseg_tensor::{join_name, Module, Param, Var};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, Ctx, LINEAR_GAIN, RELU_GAIN};

pub const DEFAULT_KERNEL: usize = 7;
pub const DEFAULT_REDUCTION: usize = 16;
/// Reduction used when the channel count is below [`DEFAULT_REDUCTION`].
pub const SMALL_REDUCTION: usize = 4;

/// Bottleneck width for `channels` at reduction `r`, with the small-channel fallback.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    let r = if channels < reduction {
        SMALL_REDUCTION.min(reduction)
    } else {
        reduction
    };
    (channels / r).max(1)
}

fn rank4(x: &Var<'_>, what: &str) -> Result<(usize, usize, usize, usize)> {
    x.value()
        .dims4()
        .map_err(|_| invalid(format!("{what}: expected a rank-4 tensor, got shape {:?}", x.shape())))
}

/// Gate `sigmoid(conv([mean_c(x); max_c(x)]))` broadcast over channels.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub kernel_size: usize,
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(prefix: &str, kernel_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(invalid(format!("spatial attention kernel must be odd, got {kernel_size}")));
        }
        Ok(Self {
            kernel_size,
            conv: Conv2d::new(&join_name(prefix, "conv"), 2, 1, kernel_size, true, LINEAR_GAIN, rng),
        })
    }

    /// The (B, 1, H, W) gate in (0, 1).
    pub fn gate<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = rank4(x, "spatial attention")?;
        if c == 0 {
            return Err(invalid("spatial attention: input has no channels"));
        }
        let pooled = Var::concat_channels(&[&x.channel_mean()?, &x.channel_max()?])?;
        Ok(self.conv.forward(ctx, &pooled)?.sigmoid())
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let g = self.gate(ctx, x)?;
        Ok(x.mul_broadcast(&g)?)
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }
}

impl Module for SpatialAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
    }
}

/// Gate `sigmoid(mlp(avg(x)) + mlp(max(x)))` with a shared two-layer bottleneck.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new(prefix: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(invalid("channel attention needs positive channels and reduction"));
        }
        let hidden = hidden_width(channels, reduction);
        Ok(Self {
            channels,
            hidden,
            fc1: Conv2d::new(&join_name(prefix, "fc1"), channels, hidden, 1, true, RELU_GAIN, rng),
            fc2: Conv2d::new(&join_name(prefix, "fc2"), hidden, channels, 1, true, LINEAR_GAIN, rng),
        })
    }

    fn mlp<'t>(&self, ctx: &Ctx<'t>, v: &Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, v)?.relu();
        self.fc2.forward(ctx, &h)
    }

    /// The (B, C, 1, 1) gate in (0, 1).
    pub fn gate<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = rank4(x, "channel attention")?;
        if c != self.channels {
            return Err(invalid(format!(
                "channel attention: expected {} channels, got {c}",
                self.channels
            )));
        }
        let a = self.mlp(ctx, &x.global_avg_pool()?)?;
        let m = self.mlp(ctx, &x.global_max_pool()?)?;
        Ok(a.add(&m)?.sigmoid())
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let g = self.gate(ctx, x)?;
        Ok(x.mul_broadcast(&g)?)
    }

    pub fn layers(&self) -> [&Conv2d; 2] {
        [&self.fc1, &self.fc2]
    }
}

impl Module for ChannelAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// Spatial attention followed by channel attention.
#[derive(Clone, Debug)]
pub struct Sca {
    pub spatial: SpatialAttention,
    pub channel: ChannelAttention,
}

impl Sca {
    pub fn new(
        prefix: &str,
        channels: usize,
        kernel_size: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            spatial: SpatialAttention::new(&join_name(prefix, "spatial"), kernel_size, rng)?,
            channel: ChannelAttention::new(&join_name(prefix, "channel"), channels, reduction, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel.channels
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let s = self.spatial.forward(ctx, x)?;
        self.channel.forward(ctx, &s)
    }
}

impl Module for Sca {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.spatial.visit_params(f);
        self.channel.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.spatial.visit_params_mut(f);
        self.channel.visit_params_mut(f);
    }
}
