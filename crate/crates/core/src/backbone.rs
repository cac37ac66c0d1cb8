//! Reference 4-level U-Net with optional GPM chain on the skip connections.

use gpmseg_tensor::{join_name, Module, Param, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gpm::{ChainConfig, GpmChain, Ordering, SimilarityScale, NUM_STAGES};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, LINEAR_GAIN, RELU_GAIN};

pub const DEPTH_LEVELS: usize = NUM_STAGES;
/// Input height and width must be multiples of this.
pub const SIZE_DIVISOR: usize = 1 << DEPTH_LEVELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub out_classes: usize,
}

impl BackboneConfig {
    pub fn new(base_channels: usize) -> Self {
        Self {
            in_channels: 3,
            base_channels,
            out_classes: 1,
        }
    }

    /// Skip channels, shallow to deep.
    pub fn skip_channels(&self) -> [usize; DEPTH_LEVELS] {
        std::array::from_fn(|k| self.base_channels << k)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << DEPTH_LEVELS
    }
}

/// (conv3x3 -> BN -> ReLU) twice.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub(crate) conv1: Conv2d,
    pub(crate) bn1: BatchNorm2d,
    pub(crate) conv2: Conv2d,
    pub(crate) bn2: BatchNorm2d,
}

impl DoubleConv {
    fn new(prefix: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(&join_name(prefix, "conv1"), cin, cout, 3, false, RELU_GAIN, rng),
            bn1: BatchNorm2d::new(&join_name(prefix, "bn1"), cout),
            conv2: Conv2d::new(&join_name(prefix, "conv2"), cout, cout, 3, false, RELU_GAIN, rng),
            bn2: BatchNorm2d::new(&join_name(prefix, "bn2"), cout),
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.bn1.forward(ctx, &self.conv1.forward(ctx, x)?)?.relu();
        Ok(self.bn2.forward(ctx, &self.conv2.forward(ctx, &h)?)?.relu())
    }
}

impl Module for DoubleConv {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct UpBlock {
    pub(crate) up: ConvTranspose2d,
    pub(crate) conv: DoubleConv,
}

/// Encoder skip taps, shallow to deep.
#[derive(Clone, Debug)]
pub struct SkipBundle<'t> {
    pub features: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: BackboneConfig,
    pub(crate) inc: DoubleConv,
    pub(crate) downs: Vec<DoubleConv>,
    pub(crate) ups: Vec<UpBlock>,
    pub(crate) outc: Conv2d,
}

impl UNet {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.base_channels == 0 || config.in_channels == 0 || config.out_classes == 0 {
            return Err(invalid("backbone channels must be positive"));
        }
        let ch = |k: usize| config.base_channels << k;
        let inc = DoubleConv::new("unet.inc", config.in_channels, ch(0), rng);
        let downs = (1..=DEPTH_LEVELS)
            .map(|k| DoubleConv::new(&format!("unet.down{k}"), ch(k - 1), ch(k), rng))
            .collect();
        let ups = (1..=DEPTH_LEVELS)
            .map(|i| {
                let cin = ch(DEPTH_LEVELS + 1 - i);
                let cout = ch(DEPTH_LEVELS - i);
                let prefix = format!("unet.up{i}");
                UpBlock {
                    up: ConvTranspose2d::new(&join_name(&prefix, "up"), cin, cin / 2, 2, rng),
                    conv: DoubleConv::new(&join_name(&prefix, "conv"), cin, cout, rng),
                }
            })
            .collect();
        let outc = Conv2d::new("unet.outc", ch(0), config.out_classes, 1, true, LINEAR_GAIN, rng);
        Ok(Self {
            config,
            inc,
            downs,
            ups,
            outc,
        })
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t>, image: &Var<'t>) -> Result<(SkipBundle<'t>, Var<'t>)> {
        let (_, c, h, w) = image
            .value()
            .dims4()
            .map_err(|_| invalid(format!("image must be rank 4, got {:?}", image.shape())))?;
        if c != self.config.in_channels {
            return Err(invalid(format!(
                "image has {c} channels, backbone expects {}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
            return Err(invalid(format!(
                "image size {h}x{w} must be a positive multiple of {SIZE_DIVISOR}"
            )));
        }
        let mut x = self.inc.forward(ctx, image)?;
        ctx.trace("unet.inc", &x);
        let mut features = Vec::with_capacity(DEPTH_LEVELS);
        for (k, down) in self.downs.iter().enumerate() {
            let pooled = x.max_pool2d(2)?;
            features.push(x);
            x = down.forward(ctx, &pooled)?;
            ctx.trace(&format!("unet.down{}", k + 1), &x);
        }
        Ok((SkipBundle { features }, x))
    }

    pub fn decode<'t>(&self, ctx: &Ctx<'t>, skips: &SkipBundle<'t>, bottleneck: &Var<'t>) -> Result<Var<'t>> {
        if skips.features.len() != DEPTH_LEVELS {
            return Err(invalid(format!(
                "expected {DEPTH_LEVELS} skips, got {}",
                skips.features.len()
            )));
        }
        let mut x = bottleneck.clone();
        for (i, block) in self.ups.iter().enumerate() {
            let skip = &skips.features[DEPTH_LEVELS - 1 - i];
            let up = block.up.forward(ctx, &x)?;
            if up.shape() != skip.shape() {
                return Err(invalid(format!(
                    "decoder stage {}: upsampled {:?} does not match skip {:?}",
                    i + 1,
                    up.shape(),
                    skip.shape()
                )));
            }
            x = block.conv.forward(ctx, &Var::concat_channels(&[skip, &up])?)?;
            ctx.trace(&format!("unet.up{}", i + 1), &x);
        }
        let logits = self.outc.forward(ctx, &x)?;
        ctx.trace("unet.outc", &logits);
        Ok(logits)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: &Var<'t>) -> Result<Var<'t>> {
        let (skips, bottleneck) = self.encode(ctx, image)?;
        self.decode(ctx, &skips, &bottleneck)
    }

    /// With a chain the skips are replaced by their enhanced versions before
    /// decoding; without one the depth prior is ignored.
    pub fn forward_with_gpm<'t>(
        &self,
        ctx: &Ctx<'t>,
        image: &Var<'t>,
        depth: Option<&Var<'t>>,
        chain: Option<&GpmChain>,
    ) -> Result<Var<'t>> {
        let (skips, bottleneck) = self.encode(ctx, image)?;
        let skips = match chain {
            None => skips,
            Some(chain) => {
                let depth = depth.ok_or_else(|| invalid("a depth prior is required when GPMs are enabled"))?;
                SkipBundle {
                    features: chain.forward(ctx, &skips.features, depth)?,
                }
            }
        };
        self.decode(ctx, &skips, &bottleneck)
    }
}

impl Module for UNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.inc.visit_params(f);
        for d in &self.downs {
            d.visit_params(f);
        }
        for u in &self.ups {
            u.up.visit_params(f);
            u.conv.visit_params(f);
        }
        self.outc.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.inc.visit_params_mut(f);
        for d in &mut self.downs {
            d.visit_params_mut(f);
        }
        for u in &mut self.ups {
            u.up.visit_params_mut(f);
            u.conv.visit_params_mut(f);
        }
        self.outc.visit_params_mut(f);
    }
}

/// Settings for the optional GPM chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpmSettings {
    pub ordering: Ordering,
    pub scale_factor: usize,
    pub kernel_size: usize,
    pub reduction: usize,
    pub similarity_scale: SimilarityScale,
}

impl Default for GpmSettings {
    fn default() -> Self {
        let c = ChainConfig::new([1; NUM_STAGES], Ordering::BottomToTop);
        Self {
            ordering: c.ordering,
            scale_factor: c.scale_factor,
            kernel_size: c.kernel_size,
            reduction: c.reduction,
            similarity_scale: c.similarity_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gpm: Option<GpmSettings>,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn chain_config(&self) -> Option<ChainConfig> {
        self.gpm.map(|g| ChainConfig {
            feature_channels: self.backbone.skip_channels(),
            ordering: g.ordering,
            scale_factor: g.scale_factor,
            kernel_size: g.kernel_size,
            reduction: g.reduction,
            similarity_scale: g.similarity_scale,
        })
    }
}

/// U-Net plus optional GPM chain, built from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ModelConfig,
    pub unet: UNet,
    pub chain: Option<GpmChain>,
}

impl SegModel {
    /// Backbone weights depend only on `init_seed`, so models with and without
    /// GPMs built from the same seed share identical backbone weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let unet = UNet::new(config.backbone, &mut rng)?;
        let chain = match config.chain_config() {
            Some(cc) => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0x6770_6d5f_6368_6e00);
                Some(GpmChain::new("gpm", cc, &mut rng)?)
            }
            None => None,
        };
        Ok(Self { config, unet, chain })
    }

    pub fn uses_depth(&self) -> bool {
        self.chain.is_some()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: &Var<'t>, depth: Option<&Var<'t>>) -> Result<Var<'t>> {
        self.unet.forward_with_gpm(ctx, image, depth, self.chain.as_ref())
    }

    /// Inference on raw tensors with batch-norm running statistics.
    pub fn predict(&self, image: &Tensor, depth: Option<&Tensor>) -> Result<Tensor> {
        let tape = gpmseg_tensor::Tape::inference();
        let ctx = Ctx::new(&tape, false);
        let x = tape.constant(image.clone());
        let d = depth.map(|d| tape.constant(d.clone()));
        Ok(self.forward(&ctx, &x, d.as_ref())?.value().clone())
    }
}

impl Module for SegModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.unet.visit_params(f);
        if let Some(c) = &self.chain {
            c.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.unet.visit_params_mut(f);
        if let Some(c) = &mut self.chain {
            c.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gpmseg_tensor::Tape;

    fn tiny(gpm: bool) -> SegModel {
        SegModel::new(ModelConfig {
            backbone: BackboneConfig::new(4),
            gpm: gpm.then(GpmSettings::default),
            init_seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn skip_shapes_follow_levels() {
        let m = tiny(false);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let (skips, bottleneck) = m.unet.encode(&ctx, &x).unwrap();
        let shapes: Vec<_> = skips.features.iter().map(|s| s.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 4, 32, 32], vec![2, 8, 16, 16], vec![2, 16, 8, 8], vec![2, 32, 4, 4]]
        );
        assert_eq!(bottleneck.shape(), &[2, 64, 2, 2]);
        let y = m.unet.decode(&ctx, &skips, &bottleneck).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let m = tiny(false);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, false);
        assert!(m.unet.encode(&ctx, &tape.constant(Tensor::zeros(&[1, 3, 24, 32]))).is_err());
    }

    #[test]
    fn gpm_requires_depth() {
        let m = tiny(true);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(m.forward(&ctx, &x, None).is_err());
        let d = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let y = m.forward(&ctx, &x, Some(&d)).unwrap();
        assert!(y.value().all_finite());
    }

    #[test]
    fn shared_seed_gives_shared_backbone() {
        let a = tiny(false);
        let b = tiny(true);
        let mut pa = Vec::new();
        a.unet.visit_params(&mut |p| pa.push(p.clone()));
        let mut pb = Vec::new();
        b.unet.visit_params(&mut |p| pb.push(p.clone()));
        assert_eq!(pa, pb);
    }
}
