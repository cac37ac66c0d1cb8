//! Parameter and FLOP accounting.
//!
//! FLOPs are counted at batch 1: two per multiply-accumulate for
//! convolutions and token products, one per element for pooling, activations,
//! normalization, resizing and elementwise arithmetic. Concatenation is free.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gpmseg_tensor::Module;
use serde::Serialize;

use crate::attention::Sca;
use crate::backbone::{DoubleConv, SegModel, SIZE_DIVISOR};
use crate::error::{invalid, GpmError, Result};
use crate::gpm::{GpmChain, NUM_STAGES};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d};

pub const FLOP_CONVENTION: &str = "FLOPs at batch 1: 2 per multiply-accumulate (convolutions, token products); \
1 per element for pooling, activations, normalization, resizing and elementwise ops";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize, kernel: usize, bias: bool },
    /// Stride equals kernel.
    ConvTranspose { cin: usize, cout: usize, kernel: usize },
    BatchNorm { channels: usize },
    Relu,
    Sigmoid,
    Softmax,
    /// Pooling window over `window` input elements per output element.
    Pool { window: usize },
    /// Mean and max over channels, or over space (global).
    Reduce,
    Resize,
    Concat,
    Add,
    Mul,
    /// `F^T G` over `tokens` tokens of width `channels`.
    Similarity { channels: usize, tokens: usize },
    /// `G C^T` mixing `tokens` tokens of width `channels`.
    Mix { channels: usize, tokens: usize },
    Other(String),
}

/// One layer application. `elements` is the output element count for
/// elementwise kinds and the input count for reductions and pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub module: String,
    pub name: String,
    pub kind: LayerKind,
    pub elements: u64,
    /// Learnable scalars owned here; zero when the weights were counted at
    /// an earlier application.
    pub params: u64,
}

pub fn layer_flops(layer: &LayerSpec) -> Result<u64> {
    let n = layer.elements;
    Ok(match &layer.kind {
        LayerKind::Conv { cin, kernel, bias, .. } => {
            2 * n * (*cin * kernel * kernel) as u64 + if *bias { n } else { 0 }
        }
        // `elements` is the output count; each output sees cin * 1 taps
        LayerKind::ConvTranspose { cin, .. } => 2 * n * *cin as u64 + n,
        LayerKind::Similarity { channels, tokens } | LayerKind::Mix { channels, tokens } => {
            2 * (*tokens as u64).pow(2) * *channels as u64
        }
        LayerKind::Concat => 0,
        LayerKind::Other(kind) => {
            return Err(GpmError::UnsupportedLayer {
                module: layer.module.clone(),
                layer: format!("{} ({kind})", layer.name),
            })
        }
        _ => n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub model: String,
    /// (C, H, W); absent for parameter-only reports.
    pub input: Option<[usize; 3]>,
    pub params: u64,
    pub flops: Option<u64>,
    pub per_module: Vec<ModuleCost>,
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }
    pub fn flops_giga(&self) -> Option<f64> {
        self.flops.map(|f| f as f64 / 1e9)
    }
    pub fn input_label(&self) -> String {
        self.input
            .map(|[c, h, w]| format!("({c}, {h}, {w})"))
            .unwrap_or_else(|| "-".into())
    }
}

pub fn model_label(model: &SegModel) -> String {
    match &model.chain {
        None => "U-Net".into(),
        Some(c) => format!("U-Net + {NUM_STAGES} GPMs ({})", c.config.ordering.as_str()),
    }
}

/// Module group of a parameter name: its first two dotted components.
fn group_of(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

/// Learnable scalars grouped per module.
pub fn count_params(model: &SegModel) -> ComplexityReport {
    let mut groups: BTreeMap<String, u64> = BTreeMap::new();
    let mut order = Vec::new();
    model.visit_params(&mut |p| {
        if p.is_trainable() {
            let g = group_of(p.name());
            if !groups.contains_key(&g) {
                order.push(g.clone());
            }
            *groups.entry(g).or_default() += p.value().numel() as u64;
        }
    });
    let per_module: Vec<ModuleCost> = order
        .into_iter()
        .map(|name| ModuleCost {
            params: groups[&name],
            name,
            flops: 0,
        })
        .collect();
    ComplexityReport {
        model: model_label(model),
        params: per_module.iter().map(|m| m.params).sum(),
        input: None,
        flops: None,
        per_module,
    }
}

struct Planner {
    layers: Vec<LayerSpec>,
    module: String,
}

impl Planner {
    fn push(&mut self, name: &str, kind: LayerKind, elements: usize, params: usize) {
        self.layers.push(LayerSpec {
            module: self.module.clone(),
            name: name.to_string(),
            kind,
            elements: elements as u64,
            params: params as u64,
        });
    }

    /// Convolution with same padding at `hw` output pixels.
    fn conv(&mut self, name: &str, conv: &Conv2d, hw: usize) {
        let (cin, cout, k) = (conv.in_channels, conv.out_channels, conv.kernel);
        let bias = conv.has_bias();
        let params = cout * cin * k * k + if bias { cout } else { 0 };
        self.push(name, LayerKind::Conv { cin, cout, kernel: k, bias }, cout * hw, params);
    }

    fn bn(&mut self, name: &str, bn: &BatchNorm2d, hw: usize) {
        let c = bn.channels;
        self.push(name, LayerKind::BatchNorm { channels: c }, c * hw, 2 * c);
    }

    fn double_conv(&mut self, dc: &DoubleConv, hw: usize) {
        let c1 = dc.conv1.out_channels;
        self.conv("conv1", &dc.conv1, hw);
        self.bn("bn1", &dc.bn1, hw);
        self.push("relu1", LayerKind::Relu, c1 * hw, 0);
        self.conv("conv2", &dc.conv2, hw);
        self.bn("bn2", &dc.bn2, hw);
        self.push("relu2", LayerKind::Relu, dc.conv2.out_channels * hw, 0);
    }

    fn up(&mut self, up: &ConvTranspose2d, out_hw: usize) {
        let (cin, cout, k) = (up.in_channels, up.out_channels, up.kernel);
        self.push(
            "up",
            LayerKind::ConvTranspose { cin, cout, kernel: k },
            cout * out_hw,
            cin * cout * k * k + cout,
        );
    }

    fn sca(&mut self, prefix: &str, sca: &Sca, c: usize, hw: usize) {
        let n = |s: &str| format!("{prefix}.{s}");
        let sp = &sca.spatial;
        self.push(&n("spatial.pool"), LayerKind::Reduce, 2 * c * hw, 0);
        self.push(&n("spatial.concat"), LayerKind::Concat, 2 * hw, 0);
        self.conv(&n("spatial.conv"), sp.conv(), hw);
        self.push(&n("spatial.sigmoid"), LayerKind::Sigmoid, hw, 0);
        self.push(&n("spatial.gate"), LayerKind::Mul, c * hw, 0);
        let ch = &sca.channel;
        let [fc1, fc2] = ch.layers();
        self.push(&n("channel.pool"), LayerKind::Reduce, 2 * c * hw, 0);
        // the bottleneck runs on the average and the max descriptor with shared weights
        for (branch, first) in [("avg", true), ("max", false)] {
            let before = self.layers.len();
            self.conv(&n(&format!("channel.{branch}.fc1")), fc1, 1);
            self.push(&n(&format!("channel.{branch}.relu")), LayerKind::Relu, ch.hidden, 0);
            self.conv(&n(&format!("channel.{branch}.fc2")), fc2, 1);
            if !first {
                for l in &mut self.layers[before..] {
                    l.params = 0;
                }
            }
        }
        self.push(&n("channel.add"), LayerKind::Add, c, 0);
        self.push(&n("channel.sigmoid"), LayerKind::Sigmoid, c, 0);
        self.push(&n("channel.gate"), LayerKind::Mul, c * hw, 0);
    }

    fn chain(&mut self, chain: &GpmChain, h: usize, w: usize) {
        let s = chain.config.scale_factor;
        let mut incoming = 1;
        for level in chain.config.ordering.visit_order() {
            let (fh, fw) = (h >> level, w >> level);
            let (dh, dw) = (fh / s, fw / s);
            let (hw, dhw) = (fh * fw, dh * dw);
            let stage = chain.stage(level);
            let (c, cd) = (stage.config.feature_channels, stage.config.depth_channels);

            self.module = format!("gpm.adapter{level}");
            self.push("resize", LayerKind::Resize, incoming * dhw, 0);
            self.conv("proj", chain.adapter(level), dhw);

            self.module = format!("gpm.stage{level}");
            self.sca("sub_refine", stage.sub_refine_unit(), cd, dhw);
            self.push("geo_upsample", LayerKind::Resize, cd * hw, 0);
            let (geo_sca, geo_proj) = stage.geometry_units();
            self.sca("geo_sca", geo_sca, cd, hw);
            self.conv("geo_proj", geo_proj, hw);
            let (cub1, cub2) = stage.cub_units();
            self.sca("cub_sca1", cub1, c, hw);
            self.sca("cub_sca2", cub2, c, hw);
            self.push("similarity", LayerKind::Similarity { channels: c, tokens: hw }, hw * hw, 0);
            self.push("softmax", LayerKind::Softmax, hw * hw, 0);
            self.push("enhance", LayerKind::Mix { channels: c, tokens: hw }, c * hw, 0);
            self.push("residual", LayerKind::Add, c * hw, 0);
            self.push("tex_pool", LayerKind::Pool { window: s * s }, c * hw, 0);
            let (tex_sca, tex_proj) = stage.texture_units();
            self.sca("tex_sca", tex_sca, c, dhw);
            self.conv("tex_proj", tex_proj, dhw);
            self.push("fuse", LayerKind::Add, cd * dhw, 0);
            incoming = cd;
        }
    }
}

/// Every layer application of one forward pass at batch 1 on a `(C, H, W)` input.
pub fn layer_plan(model: &SegModel, input: [usize; 3]) -> Result<Vec<LayerSpec>> {
    let [c, h, w] = input;
    let cfg = model.unet.config;
    if c != cfg.in_channels {
        return Err(invalid(format!("input has {c} channels, model expects {}", cfg.in_channels)));
    }
    if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
        return Err(invalid(format!("input size {h}x{w} must be a positive multiple of {SIZE_DIVISOR}")));
    }
    if let Some(chain) = &model.chain {
        let s = chain.config.scale_factor;
        if s == 0 || !(h >> (NUM_STAGES - 1)).is_multiple_of(s) || !(w >> (NUM_STAGES - 1)).is_multiple_of(s) {
            return Err(invalid(format!("deepest skip of {h}x{w} is not divisible by scale {s}")));
        }
    }
    let unet = &model.unet;
    let mut p = Planner {
        layers: Vec::new(),
        module: "unet.inc".into(),
    };
    p.double_conv(&unet.inc, h * w);
    for (k, down) in unet.downs.iter().enumerate() {
        let level = k + 1;
        p.module = format!("unet.down{level}");
        let cin = down.conv1.in_channels;
        p.push("maxpool", LayerKind::Pool { window: 4 }, cin * (h >> k) * (w >> k), 0);
        p.double_conv(down, (h >> level) * (w >> level));
    }
    if let Some(chain) = &model.chain {
        if !chain.is_bypassed() {
            p.chain(chain, h, w);
        }
    }
    let levels = unet.ups.len();
    for (i, block) in unet.ups.iter().enumerate() {
        let level = levels - 1 - i;
        let hw = (h >> level) * (w >> level);
        p.module = format!("unet.up{}", i + 1);
        p.up(&block.up, hw);
        p.push("concat", LayerKind::Concat, block.conv.conv1.in_channels * hw, 0);
        p.double_conv(&block.conv, hw);
    }
    p.module = "unet.outc".into();
    p.conv("conv", &unet.outc, h * w);
    Ok(p.layers)
}

/// Sums a layer plan per module, in first-seen order.
pub fn summarize(model: String, input: [usize; 3], plan: &[LayerSpec]) -> Result<ComplexityReport> {
    let mut per_module: Vec<ModuleCost> = Vec::new();
    for layer in plan {
        let flops = layer_flops(layer)?;
        match per_module.iter_mut().find(|m| m.name == layer.module) {
            Some(m) => {
                m.params += layer.params;
                m.flops += flops;
            }
            None => per_module.push(ModuleCost {
                name: layer.module.clone(),
                params: layer.params,
                flops,
            }),
        }
    }
    Ok(ComplexityReport {
        model,
        input: Some(input),
        params: per_module.iter().map(|m| m.params).sum(),
        flops: Some(per_module.iter().map(|m| m.flops).sum()),
        per_module,
    })
}

/// Parameters and FLOPs of one forward pass on a `(C, H, W)` input.
pub fn count_flops(model: &SegModel, input: [usize; 3]) -> Result<ComplexityReport> {
    summarize(model_label(model), input, &layer_plan(model, input)?)
}

/// Rows `Model,Input size,Params(M),FLOPs(G)`.
pub fn reports_csv(reports: &[ComplexityReport]) -> String {
    let mut s = String::from("Model,Input size,Params(M),FLOPs(G)\n");
    for r in reports {
        let flops = r.flops_giga().map(|f| format!("{f:.2}")).unwrap_or_default();
        writeln!(s, "{},\"{}\",{:.2},{flops}", r.model, r.input_label(), r.params_millions()).unwrap();
    }
    s
}

/// Aligned table with one line per module and a total line.
pub fn report_table(r: &ComplexityReport) -> String {
    let mut s = format!("# {FLOP_CONVENTION}\n# {} at {}\n", r.model, r.input_label());
    let width = r.per_module.iter().map(|m| m.name.len()).max().unwrap_or(0).max(6);
    writeln!(s, "{:<width$}  {:>12}  {:>14}", "module", "params", "FLOPs").unwrap();
    for m in &r.per_module {
        writeln!(s, "{:<width$}  {:>12}  {:>14}", m.name, m.params, m.flops).unwrap();
    }
    let flops = r.flops.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
    writeln!(s, "{:<width$}  {:>12}  {:>14}", "total", r.params, flops).unwrap();
    writeln!(
        s,
        "{:<width$}  {:>11.2}M  {:>13}",
        "",
        r.params_millions(),
        r.flops_giga().map(|f| format!("{f:.2}G")).unwrap_or_default()
    )
    .unwrap();
    s
}
