//! Geometric prior-guided module: one stage per skip level and the 4-stage chain.
//!
//! A stage holds a skip feature map `F_o` (B, C, H, W) and a depth stream
//! `D_o` (B, C_d, H/s, W/s). The self-update block refines the depth stream,
//! the cross-update block attends from refined features to a geometry
//! embedding of the depth, and the enhanced features are pooled back into the
//! depth stream.

use gpmseg_tensor::{join_name, Module, Param, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Sca, DEFAULT_KERNEL, DEFAULT_REDUCTION};
use crate::error::{invalid, Result};
use crate::nn::{Conv2d, Ctx, LINEAR_GAIN};

pub const NUM_STAGES: usize = 4;

/// Order in which the chain visits the skip levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// Deepest (lowest resolution) skip first.
    BottomToTop,
    /// Shallowest skip first.
    TopToBottom,
}

impl Ordering {
    /// Level indices (0 = shallowest) in visiting order.
    pub fn visit_order(self) -> [usize; NUM_STAGES] {
        match self {
            Ordering::BottomToTop => [3, 2, 1, 0],
            Ordering::TopToBottom => [0, 1, 2, 3],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ordering::BottomToTop => "bottom_to_top",
            Ordering::TopToBottom => "top_to_bottom",
        }
    }
}

impl std::str::FromStr for Ordering {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bottom_to_top" | "bottom" => Ok(Ordering::BottomToTop),
            "top_to_bottom" | "top" => Ok(Ordering::TopToBottom),
            _ => Err(format!("expected bottom_to_top or top_to_bottom, got `{s}`")),
        }
    }
}

/// Length used in the `1/sqrt(N)` logit scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityScale {
    /// N = C, the dot-product length.
    Channels,
    /// N = H * W.
    Tokens,
}

impl std::str::FromStr for SimilarityScale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "channels" => Ok(SimilarityScale::Channels),
            "tokens" => Ok(SimilarityScale::Tokens),
            _ => Err(format!("expected channels or tokens, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub feature_channels: usize,
    pub depth_channels: usize,
    pub scale_factor: usize,
    pub kernel_size: usize,
    pub reduction: usize,
    pub similarity_scale: SimilarityScale,
}

impl StageConfig {
    /// Defaults for a skip level with `c` channels: `C_d = C / 2`, scale 2.
    pub fn for_channels(c: usize) -> Self {
        Self {
            feature_channels: c,
            depth_channels: (c / 2).max(1),
            scale_factor: 2,
            kernel_size: DEFAULT_KERNEL,
            reduction: DEFAULT_REDUCTION,
            similarity_scale: SimilarityScale::Channels,
        }
    }
}

/// Row-stochastic (B, T, T) token affinity.
#[derive(Clone, Debug)]
pub struct SimilarityMap<'t> {
    pub values: Var<'t>,
}

impl SimilarityMap<'_> {
    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct GpmStage {
    pub config: StageConfig,
    sub_refine: Sca,
    geo_sca: Sca,
    geo_proj: Conv2d,
    cub_sca1: Sca,
    cub_sca2: Sca,
    tex_sca: Sca,
    tex_proj: Conv2d,
}

impl GpmStage {
    pub fn new(prefix: &str, config: StageConfig, rng: &mut impl Rng) -> Result<Self> {
        let StageConfig {
            feature_channels: c,
            depth_channels: cd,
            kernel_size: k,
            reduction: r,
            scale_factor,
            ..
        } = config;
        if c == 0 || cd == 0 || scale_factor == 0 {
            return Err(invalid("GPM stage needs positive channels and scale factor"));
        }
        let sca = |name: &str, ch: usize, rng: &mut _| Sca::new(&join_name(prefix, name), ch, k, r, rng);
        Ok(Self {
            config,
            sub_refine: sca("sub_refine", cd, rng)?,
            geo_sca: sca("geo_sca", cd, rng)?,
            geo_proj: Conv2d::new(&join_name(prefix, "geo_proj"), cd, c, 1, false, LINEAR_GAIN, rng),
            cub_sca1: sca("cub_sca1", c, rng)?,
            cub_sca2: sca("cub_sca2", c, rng)?,
            tex_sca: sca("tex_sca", c, rng)?,
            tex_proj: Conv2d::new(&join_name(prefix, "tex_proj"), c, cd, 1, false, LINEAR_GAIN, rng),
        })
    }

    pub fn sub_refine_unit(&self) -> &Sca {
        &self.sub_refine
    }
    pub fn geometry_units(&self) -> (&Sca, &Conv2d) {
        (&self.geo_sca, &self.geo_proj)
    }
    pub fn cub_units(&self) -> (&Sca, &Sca) {
        (&self.cub_sca1, &self.cub_sca2)
    }
    pub fn texture_units(&self) -> (&Sca, &Conv2d) {
        (&self.tex_sca, &self.tex_proj)
    }

    fn check_depth(&self, d: &Var<'_>) -> Result<(usize, usize, usize, usize)> {
        let dims = d
            .value()
            .dims4()
            .map_err(|_| invalid(format!("depth stream must be rank 4, got {:?}", d.shape())))?;
        if dims.1 != self.config.depth_channels {
            return Err(invalid(format!(
                "depth stream has {} channels, stage expects {}",
                dims.1, self.config.depth_channels
            )));
        }
        Ok(dims)
    }

    fn check_features(&self, f: &Var<'_>) -> Result<(usize, usize, usize, usize)> {
        let dims = f
            .value()
            .dims4()
            .map_err(|_| invalid(format!("skip features must be rank 4, got {:?}", f.shape())))?;
        if dims.1 != self.config.feature_channels {
            return Err(invalid(format!(
                "skip features have {} channels, stage expects {}",
                dims.1, self.config.feature_channels
            )));
        }
        Ok(dims)
    }

    /// `D'_o = sca(D_o)`.
    pub fn sub_refine_depth<'t>(&self, ctx: &Ctx<'t>, d_o: &Var<'t>) -> Result<Var<'t>> {
        self.check_depth(d_o)?;
        self.sub_refine.forward(ctx, d_o)
    }

    /// Geometry embedding `proj(sca(upsample(D'_o)))` at skip resolution.
    pub fn geometry_embedding<'t>(&self, ctx: &Ctx<'t>, d_refined: &Var<'t>) -> Result<Var<'t>> {
        self.check_depth(d_refined)?;
        let up = d_refined.upsample_bilinear(self.config.scale_factor)?;
        let s = self.geo_sca.forward(ctx, &up)?;
        self.geo_proj.forward(ctx, &s)
    }

    /// `F'_o = sca2(sca1(F_o))`.
    pub fn cub_refine_features<'t>(&self, ctx: &Ctx<'t>, f_o: &Var<'t>) -> Result<Var<'t>> {
        self.check_features(f_o)?;
        let s = self.cub_sca1.forward(ctx, f_o)?;
        self.cub_sca2.forward(ctx, &s)
    }

    /// Softmax over key tokens of `F'^T G / sqrt(N)`.
    pub fn cub_similarity<'t>(&self, f_refined: &Var<'t>, g_embed: &Var<'t>) -> Result<SimilarityMap<'t>> {
        similarity(f_refined, g_embed, self.config.similarity_scale)
    }

    /// `F_e = G C^T + F'_o` in token layout, i.e. each output token is the
    /// `C_map`-weighted mix of geometry tokens plus the refined feature.
    pub fn cub_enhance<'t>(
        &self,
        f_refined: &Var<'t>,
        g_embed: &Var<'t>,
        c_map: &SimilarityMap<'t>,
    ) -> Result<Var<'t>> {
        enhance(f_refined, g_embed, c_map)
    }

    /// `D_e = D'_o + proj(sca(avgpool(F_e)))`.
    pub fn sub_fuse_depth<'t>(&self, ctx: &Ctx<'t>, d_refined: &Var<'t>, f_e: &Var<'t>) -> Result<Var<'t>> {
        self.check_depth(d_refined)?;
        self.check_features(f_e)?;
        let pooled = f_e.avg_pool2d(self.config.scale_factor)?;
        let tex = self.tex_proj.forward(ctx, &self.tex_sca.forward(ctx, &pooled)?)?;
        if tex.shape() != d_refined.shape() {
            return Err(invalid(format!(
                "downsampled features {:?} do not match depth stream {:?}",
                tex.shape(),
                d_refined.shape()
            )));
        }
        Ok(d_refined.add(&tex)?)
    }

    /// Full stage: returns `(F_e, D_e)` with the shapes of `(f_o, d_o)`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, f_o: &Var<'t>, d_o: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (fb, _, fh, fw) = self.check_features(f_o)?;
        let (db, _, dh, dw) = self.check_depth(d_o)?;
        let s = self.config.scale_factor;
        if fb != db || dh * s != fh || dw * s != fw {
            return Err(invalid(format!(
                "depth stream {:?} is not skip {:?} downscaled by {s}",
                d_o.shape(),
                f_o.shape()
            )));
        }
        let d_ref = self.sub_refine_depth(ctx, d_o)?;
        let g = self.geometry_embedding(ctx, &d_ref)?;
        let f_ref = self.cub_refine_features(ctx, f_o)?;
        let f_e = attend(&f_ref, &g, self.config.similarity_scale)?;
        let d_e = self.sub_fuse_depth(ctx, &d_ref, &f_e)?;
        Ok((f_e, d_e))
    }
}

/// `enhance(f, g, similarity(f, g))` without materializing the map.
pub fn attend<'t>(f: &Var<'t>, g: &Var<'t>, scale: SimilarityScale) -> Result<Var<'t>> {
    if f.shape() != g.shape() || f.shape().len() != 4 {
        return Err(invalid(format!(
            "attention inputs must share a rank-4 shape, got {:?} and {:?}",
            f.shape(),
            g.shape()
        )));
    }
    let (b, c, h, w) = f.value().dims4()?;
    let t = h * w;
    let n = match scale {
        SimilarityScale::Channels => c,
        SimilarityScale::Tokens => t,
    };
    let ft = f.reshape(&[b, c, t])?;
    let gt = g.reshape(&[b, c, t])?;
    let mixed = ft.token_attention(&gt, 1.0 / (n as f64).sqrt())?;
    Ok(mixed.reshape(&[b, c, h, w])?.add(f)?)
}

/// Row-stochastic affinity between the tokens of `f` (queries) and `g` (keys).
pub fn similarity<'t>(f: &Var<'t>, g: &Var<'t>, scale: SimilarityScale) -> Result<SimilarityMap<'t>> {
    if f.shape() != g.shape() || f.shape().len() != 4 {
        return Err(invalid(format!(
            "similarity inputs must share a rank-4 shape, got {:?} and {:?}",
            f.shape(),
            g.shape()
        )));
    }
    let (b, c, h, w) = f.value().dims4()?;
    let t = h * w;
    let ft = f.reshape(&[b, c, t])?;
    let gt = g.reshape(&[b, c, t])?;
    let n = match scale {
        SimilarityScale::Channels => c,
        SimilarityScale::Tokens => t,
    };
    let logits = ft.matmul(&gt, true, false)?.scale(1.0 / (n as f64).sqrt());
    Ok(SimilarityMap {
        values: logits.softmax_last()?,
    })
}

pub fn enhance<'t>(f_refined: &Var<'t>, g_embed: &Var<'t>, c_map: &SimilarityMap<'t>) -> Result<Var<'t>> {
    if f_refined.shape() != g_embed.shape() || f_refined.shape().len() != 4 {
        return Err(invalid(format!(
            "enhance inputs must share a rank-4 shape, got {:?} and {:?}",
            f_refined.shape(),
            g_embed.shape()
        )));
    }
    let (b, c, h, w) = f_refined.value().dims4()?;
    let t = h * w;
    if c_map.values.shape() != [b, t, t] {
        return Err(invalid(format!(
            "similarity map {:?} does not match {t} tokens",
            c_map.values.shape()
        )));
    }
    let gt = g_embed.reshape(&[b, c, t])?;
    let attended = gt.matmul(&c_map.values, false, true)?.reshape(&[b, c, h, w])?;
    Ok(attended.add(f_refined)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Skip channels, shallow to deep.
    pub feature_channels: [usize; NUM_STAGES],
    pub ordering: Ordering,
    pub scale_factor: usize,
    pub kernel_size: usize,
    pub reduction: usize,
    pub similarity_scale: SimilarityScale,
}

impl ChainConfig {
    pub fn new(feature_channels: [usize; NUM_STAGES], ordering: Ordering) -> Self {
        Self {
            feature_channels,
            ordering,
            scale_factor: 2,
            kernel_size: DEFAULT_KERNEL,
            reduction: DEFAULT_REDUCTION,
            similarity_scale: SimilarityScale::Channels,
        }
    }

    pub fn stage(&self, level: usize) -> StageConfig {
        StageConfig {
            scale_factor: self.scale_factor,
            kernel_size: self.kernel_size,
            reduction: self.reduction,
            similarity_scale: self.similarity_scale,
            ..StageConfig::for_channels(self.feature_channels[level])
        }
    }
}

/// Four stages plus the 1x1 adapters that lift the incoming depth stream to
/// each stage's width.
#[derive(Clone, Debug)]
pub struct GpmChain {
    pub config: ChainConfig,
    /// Indexed by level, shallow to deep.
    stages: Vec<GpmStage>,
    adapters: Vec<Conv2d>,
    bypass: bool,
}

impl GpmChain {
    pub fn new(prefix: &str, config: ChainConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for level in 0..NUM_STAGES {
            stages.push(GpmStage::new(&join_name(prefix, &format!("stage{level}")), config.stage(level), rng)?);
        }
        let mut adapters: Vec<Option<Conv2d>> = vec![None; NUM_STAGES];
        let mut incoming = 1;
        for level in config.ordering.visit_order() {
            let cd = stages[level].config.depth_channels;
            let name = join_name(prefix, &format!("adapter{level}"));
            adapters[level] = Some(Conv2d::new(&name, incoming, cd, 1, false, LINEAR_GAIN, rng));
            incoming = cd;
        }
        Ok(Self {
            config,
            stages,
            adapters: adapters.into_iter().map(|a| a.expect("every level visited")).collect(),
            bypass: false,
        })
    }

    pub fn stage(&self, level: usize) -> &GpmStage {
        &self.stages[level]
    }

    pub fn adapter(&self, level: usize) -> &Conv2d {
        &self.adapters[level]
    }

    /// When set, [`GpmChain::forward`] returns the skips unchanged.
    pub fn set_bypass(&mut self, bypass: bool) {
        self.bypass = bypass;
    }

    pub fn is_bypassed(&self) -> bool {
        self.bypass
    }

    /// Enhances the four skips (shallow to deep) using the depth prior `d0`
    /// (B, 1, H, W); returns them in the same order.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, skips: &[Var<'t>], d0: &Var<'t>) -> Result<Vec<Var<'t>>> {
        if skips.len() != NUM_STAGES {
            return Err(invalid(format!("expected {NUM_STAGES} skips, got {}", skips.len())));
        }
        let (db, dc, _, _) = d0
            .value()
            .dims4()
            .map_err(|_| invalid(format!("depth prior must be rank 4, got {:?}", d0.shape())))?;
        if dc != 1 {
            return Err(invalid(format!("depth prior must have 1 channel, got {dc}")));
        }
        if self.bypass {
            return Ok(skips.to_vec());
        }
        let mut out: Vec<Option<Var<'t>>> = vec![None; NUM_STAGES];
        let mut depth = d0.clone();
        for level in self.config.ordering.visit_order() {
            let f = &skips[level];
            let (fb, _, fh, fw) = f.value().dims4()?;
            if fb != db {
                return Err(invalid(format!("skip batch {fb} differs from depth batch {db}")));
            }
            let s = self.config.scale_factor;
            if fh % s != 0 || fw % s != 0 {
                return Err(invalid(format!(
                    "skip level {level} size {fh}x{fw} is not divisible by {s}"
                )));
            }
            let resized = depth.resize_bilinear(fh / s, fw / s)?;
            let d_in = self.adapters[level].forward(ctx, &resized)?;
            let (f_e, d_e) = self.stages[level].forward(ctx, f, &d_in)?;
            ctx.trace(&format!("gpm.stage{level}.features"), &f_e);
            ctx.trace(&format!("gpm.stage{level}.depth"), &d_e);
            out[level] = Some(f_e);
            depth = d_e;
        }
        Ok(out.into_iter().map(|o| o.expect("every level visited")).collect())
    }
}

macro_rules! visit_all {
    ($self:ident, $f:ident, $method:ident, [$($field:ident),*]) => {
        $( $self.$field.$method($f); )*
    };
}

impl Module for GpmStage {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        visit_all!(self, f, visit_params, [sub_refine, geo_sca, geo_proj, cub_sca1, cub_sca2, tex_sca, tex_proj]);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        visit_all!(self, f, visit_params_mut, [sub_refine, geo_sca, geo_proj, cub_sca1, cub_sca2, tex_sca, tex_proj]);
    }
}

impl Module for GpmChain {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for (a, s) in self.adapters.iter().zip(&self.stages) {
            a.visit_params(f);
            s.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (a, s) in self.adapters.iter_mut().zip(&mut self.stages) {
            a.visit_params_mut(f);
            s.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gpmseg_tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn stage(c: usize, seed: u64) -> GpmStage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GpmStage::new("g", StageConfig::for_channels(c), &mut rng).unwrap()
    }

    #[test]
    fn enhance_matches_token_loop() {
        let tape = Tape::inference();
        let f = random(&[1, 3, 2, 2], 1);
        let g = random(&[1, 3, 2, 2], 2);
        let fv = tape.constant(f.clone());
        let gv = tape.constant(g.clone());
        let c_map = similarity(&fv, &gv, SimilarityScale::Channels).unwrap();
        let out = enhance(&fv, &gv, &c_map).unwrap();
        let cm = c_map.values.value();
        for ch in 0..3 {
            for i in 0..4 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += cm.get(&[0, i, j]) * g.data()[ch * 4 + j];
                }
                let expect = acc + f.data()[ch * 4 + i];
                assert!((out.value().data()[ch * 4 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_attention_matches_explicit_map() {
        let tape = Tape::inference();
        let f = tape.constant(random(&[2, 4, 9, 9], 5));
        let g = tape.constant(random(&[2, 4, 9, 9], 6));
        for scale in [SimilarityScale::Channels, SimilarityScale::Tokens] {
            let c_map = similarity(&f, &g, scale).unwrap();
            let explicit = enhance(&f, &g, &c_map).unwrap();
            let fused = attend(&f, &g, scale).unwrap();
            assert!(fused.value().max_abs_diff(explicit.value()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn constant_embedding_gives_uniform_rows() {
        let tape = Tape::inference();
        let f = tape.constant(random(&[2, 4, 3, 3], 3));
        let g = tape.constant(Tensor::full(&[2, 4, 3, 3], 0.7));
        let c_map = similarity(&f, &g, SimilarityScale::Channels).unwrap();
        for v in c_map.values.value().data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_inputs_stay_zero() {
        let st = stage(8, 4);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, false);
        let f = tape.constant(Tensor::zeros(&[1, 8, 8, 8]));
        let d = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let (fe, de) = st.forward(&ctx, &f, &d).unwrap();
        assert_eq!(fe.shape(), &[1, 8, 8, 8]);
        assert_eq!(de.shape(), &[1, 4, 4, 4]);
        assert!(fe.value().data().iter().all(|&v| v == 0.0));
        assert!(de.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stage_rejects_misaligned_depth() {
        let st = stage(8, 5);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, false);
        let f = tape.constant(Tensor::zeros(&[1, 8, 8, 8]));
        assert!(st.forward(&ctx, &f, &tape.constant(Tensor::zeros(&[1, 4, 8, 8]))).is_err());
        assert!(st.forward(&ctx, &f, &tape.constant(Tensor::zeros(&[1, 3, 4, 4]))).is_err());
    }

    #[test]
    fn adapters_follow_visit_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let chain = GpmChain::new("gpm", ChainConfig::new([4, 8, 16, 32], Ordering::BottomToTop), &mut rng).unwrap();
        assert_eq!(chain.adapter(3).in_channels, 1);
        assert_eq!(chain.adapter(2).in_channels, 16);
        assert_eq!(chain.adapter(0).in_channels, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let chain = GpmChain::new("gpm", ChainConfig::new([4, 8, 16, 32], Ordering::TopToBottom), &mut rng).unwrap();
        assert_eq!(chain.adapter(0).in_channels, 1);
        assert_eq!(chain.adapter(3).in_channels, 8);
    }

    #[test]
    fn chain_needs_four_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chain = GpmChain::new("gpm", ChainConfig::new([4, 8, 16, 32], Ordering::BottomToTop), &mut rng).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, false);
        let d = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let skip = tape.constant(Tensor::zeros(&[1, 4, 16, 16]));
        assert!(chain.forward(&ctx, &[skip], &d).is_err());
    }
}
