//! The ink-detection network: a 3D residual encoder, a residual bottleneck
//! (none, plain 3D conv, stFFC or vFFC), depth-averaged skip connections and
//! a 2D decoder that emits ink logits at a quarter of the input resolution.
//!
//! Spatial stride bookkeeping: the stem downsamples by the first stage's
//! stride and every later stage by its own, for a total of
//! `product(spatial_strides)`. The decoder upsamples 2x once per skip
//! connection (`stages - 1` times) and finishes with one more conv block at
//! constant resolution, so the output sits at `1 / out_downscale`.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{Error, Result};
use crate::ffc::{FfcResidualBlock, Variant};
use crate::kv;
use crate::nnops::{self, bilinear_up2, depth_mean, RunningStats};
use crate::params::{BatchNorm, Conv, Ctx, Param, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BottleneckKind {
    None,
    Conv3d,
    Stffc,
    Vffc,
}

impl BottleneckKind {
    pub const ALL: [BottleneckKind; 4] = [
        BottleneckKind::None,
        BottleneckKind::Conv3d,
        BottleneckKind::Stffc,
        BottleneckKind::Vffc,
    ];
}

impl fmt::Display for BottleneckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BottleneckKind::None => "none",
            BottleneckKind::Conv3d => "conv3d",
            BottleneckKind::Stffc => "stffc",
            BottleneckKind::Vffc => "vffc",
        })
    }
}

impl FromStr for BottleneckKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(BottleneckKind::None),
            "conv3d" => Ok(BottleneckKind::Conv3d),
            "stffc" => Ok(BottleneckKind::Stffc),
            "vffc" => Ok(BottleneckKind::Vffc),
            other => Err(format!("unknown bottleneck `{other}` (none, conv3d, stffc, vffc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Depth of the subvolumes the network is built for.
    pub in_depth: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub spatial_strides: Vec<usize>,
    pub depth_strides: Vec<usize>,
    pub bottleneck: BottleneckKind,
    pub bottleneck_blocks: usize,
    pub decoder_widths: Vec<usize>,
    pub out_downscale: usize,
    /// Share of bottleneck channels routed to the global (spectral) branch.
    pub global_ratio: f64,
    pub drop_path: f64,
}

impl NetworkConfig {
    /// Thin ResNet-shaped encoder used for CPU-scale experiments.
    pub fn desk() -> NetworkConfig {
        NetworkConfig {
            in_depth: 16,
            widths: vec![16, 32, 64, 128],
            blocks: vec![2, 2, 2, 2],
            spatial_strides: vec![4, 2, 2, 2],
            depth_strides: vec![2, 2, 2, 1],
            bottleneck: BottleneckKind::Vffc,
            bottleneck_blocks: 3,
            decoder_widths: vec![64, 32, 16, 16],
            out_downscale: 4,
            global_ratio: 0.5,
            drop_path: 0.1,
        }
    }

    /// Full-width 3D ResNet-34 layout.
    pub fn resnet34() -> NetworkConfig {
        NetworkConfig {
            widths: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            decoder_widths: vec![256, 128, 64, 64],
            ..NetworkConfig::desk()
        }
    }

    /// Two-stage network for gradient checks and quick tests.
    pub fn tiny() -> NetworkConfig {
        NetworkConfig {
            in_depth: 4,
            widths: vec![4, 8],
            blocks: vec![1, 1],
            spatial_strides: vec![4, 2],
            depth_strides: vec![2, 2],
            bottleneck: BottleneckKind::Vffc,
            bottleneck_blocks: 1,
            decoder_widths: vec![8, 4],
            out_downscale: 4,
            global_ratio: 0.5,
            drop_path: 0.0,
        }
    }

    pub fn preset(name: &str) -> Option<NetworkConfig> {
        match name {
            "desk" => Some(NetworkConfig::desk()),
            "resnet34" => Some(NetworkConfig::resnet34()),
            "tiny" => Some(NetworkConfig::tiny()),
            _ => None,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn total_stride(&self) -> usize {
        self.spatial_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        let bad = |msg: String| Err(Error::invalid("network config", msg));
        if s == 0 {
            return bad("at least one encoder stage is required".into());
        }
        for (name, len) in [
            ("blocks", self.blocks.len()),
            ("spatial_strides", self.spatial_strides.len()),
            ("depth_strides", self.depth_strides.len()),
            ("decoder_widths", self.decoder_widths.len()),
        ] {
            if len != s {
                return bad(format!("{name} has {len} entries for {s} stages"));
            }
        }
        if self.widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return bad("widths must be positive".into());
        }
        if self.spatial_strides.iter().chain(&self.depth_strides).any(|&v| v == 0) {
            return bad("strides must be positive".into());
        }
        if self.spatial_strides[1..].iter().any(|&v| v != 2) {
            return bad("stages after the stem must have spatial stride 2 (one 2x upsampling each)".into());
        }
        if self.total_stride() != self.out_downscale << (s - 1) {
            return bad(format!(
                "total spatial stride {} != out_downscale {} x 2^{}",
                self.total_stride(),
                self.out_downscale,
                s - 1
            ));
        }
        if self.in_depth == 0 {
            return bad("in_depth must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        if !(self.global_ratio > 0.0 && self.global_ratio < 1.0) {
            return bad(format!("global_ratio {} outside (0, 1)", self.global_ratio));
        }
        if self.bottleneck != BottleneckKind::None && self.widths[s - 1] < 2 {
            return bad("FFC bottleneck needs at least 2 channels".into());
        }
        Ok(())
    }

    /// Depth after the stem and after each stage, for an `in_depth` input.
    pub fn depths(&self) -> Vec<usize> {
        let mut d = self.in_depth;
        self.depth_strides
            .iter()
            .map(|&s| {
                d = (d - 1) / s + 1;
                d
            })
            .collect()
    }

    pub fn deep_depth(&self) -> usize {
        *self.depths().last().unwrap()
    }

    pub fn to_text(&self) -> String {
        format!(
            "in_depth = {}\nwidths = {}\nblocks = {}\nspatial_strides = {}\ndepth_strides = {}\n\
             bottleneck = {}\nbottleneck_blocks = {}\ndecoder_widths = {}\nout_downscale = {}\n\
             global_ratio = {:?}\ndrop_path = {:?}\n",
            self.in_depth,
            kv::join(&self.widths),
            kv::join(&self.blocks),
            kv::join(&self.spatial_strides),
            kv::join(&self.depth_strides),
            self.bottleneck,
            self.bottleneck_blocks,
            kv::join(&self.decoder_widths),
            self.out_downscale,
            self.global_ratio,
            self.drop_path,
        )
    }

    /// Applies one `key = value` entry; returns `false` for keys that are
    /// not network fields.
    pub fn apply(&mut self, e: &kv::Entry) -> Result<bool> {
        match e.key.as_str() {
            "preset" => {
                let keep = self.bottleneck;
                *self = NetworkConfig::preset(&e.value).ok_or_else(|| e.invalid("unknown preset"))?;
                self.bottleneck = keep;
            }
            "in_depth" => self.in_depth = e.usize()?,
            "widths" => self.widths = e.usize_list()?,
            "blocks" => self.blocks = e.usize_list()?,
            "spatial_strides" => self.spatial_strides = e.usize_list()?,
            "depth_strides" => self.depth_strides = e.usize_list()?,
            "bottleneck" => self.bottleneck = e.value.parse().map_err(|m: String| e.invalid(m))?,
            "bottleneck_blocks" => self.bottleneck_blocks = e.usize()?,
            "decoder_widths" => self.decoder_widths = e.usize_list()?,
            "out_downscale" => self.out_downscale = e.usize()?,
            "global_ratio" => self.global_ratio = e.f64()?,
            "drop_path" => self.drop_path = e.f64()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::desk();
        for e in kv::parse(text)? {
            if !cfg.apply(&e)? {
                return Err(e.invalid("unknown network key"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

/// conv -> BN -> ReLU -> conv -> BN, plus identity or projected skip, then ReLU.
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    projection: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new(name: &str, in_c: usize, out_c: usize, stride: [usize; 3]) -> BasicBlock {
        let mut conv1 = Conv::same3(format!("{name}.conv1"), in_c, out_c, 3);
        conv1.stride = stride;
        let projection = (in_c != out_c || stride != [1; 3]).then(|| {
            let mut p = Conv::same3(format!("{name}.proj"), in_c, out_c, 1);
            p.stride = stride;
            (p, BatchNorm::new(format!("{name}.proj_bn"), out_c))
        });
        BasicBlock {
            conv1,
            bn1: BatchNorm::new(format!("{name}.bn1"), out_c),
            conv2: Conv::same3(format!("{name}.conv2"), out_c, out_c, 3),
            bn2: BatchNorm::new(format!("{name}.bn2"), out_c),
            projection,
        }
    }

    fn declare(&self, store: &mut ParamStore) -> Result<()> {
        self.conv1.declare(store)?;
        self.bn1.declare(store)?;
        self.conv2.declare(store)?;
        self.bn2.declare(store)?;
        if let Some((c, b)) = &self.projection {
            c.declare(store)?;
            b.declare(store)?;
        }
        Ok(())
    }

    fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, &h)?;
        let h = ctx.relu(&h)?;
        let h = self.conv2.forward(ctx, &h)?;
        let h = self.bn2.forward(ctx, &h)?;
        let skip = match &self.projection {
            Some((c, b)) => {
                let s = c.forward(ctx, x)?;
                b.forward(ctx, &s)?
            }
            None => x.clone(),
        };
        ctx.relu(&h.add(&skip)?)
    }
}

/// Plain 3D residual block used by the `conv3d` bottleneck:
/// `x + drop_path(relu(bn(conv(relu(bn(conv(x)))))))`.
#[derive(Debug, Clone)]
struct ConvResidualBlock {
    convs: [Conv; 2],
    bns: [BatchNorm; 2],
    drop_path: f64,
}

impl ConvResidualBlock {
    fn new(name: &str, c: usize, drop_path: f64) -> ConvResidualBlock {
        ConvResidualBlock {
            convs: [Conv::same3(format!("{name}.conv1"), c, c, 3), Conv::same3(format!("{name}.conv2"), c, c, 3)],
            bns: [BatchNorm::new(format!("{name}.bn1"), c), BatchNorm::new(format!("{name}.bn2"), c)],
            drop_path,
        }
    }

    fn declare(&self, store: &mut ParamStore) -> Result<()> {
        for (c, b) in self.convs.iter().zip(&self.bns) {
            c.declare(store)?;
            b.declare(store)?;
        }
        Ok(())
    }

    fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            h = c.forward(ctx, &h)?;
            h = b.forward(ctx, &h)?;
            h = ctx.relu(&h)?;
        }
        let training = ctx.training();
        let h = nnops::drop_path(&h, self.drop_path, training, &mut ctx.rng)?;
        x.add(&h)
    }
}

#[derive(Debug, Clone)]
enum Residual {
    Conv(ConvResidualBlock),
    Ffc(FfcResidualBlock),
}

/// conv3x3 -> BN -> ReLU on 2D features.
#[derive(Debug, Clone)]
struct DecoderBlock {
    upsample: bool,
    conv: Conv,
    bn: BatchNorm,
}

/// Intermediate 3D activations of one forward pass, kept for probing.
#[derive(Debug, Clone)]
pub struct Activations {
    pub stem: Tensor,
    pub stages: Vec<Tensor>,
    pub bottleneck: Tensor,
    pub logits: Tensor,
}

/// Layers whose activations the depth sweep can probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeLayer {
    Input,
    Stem,
    Stage(usize),
    Bottleneck,
}

impl FromStr for ProbeLayer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "input" => Ok(ProbeLayer::Input),
            "stem" => Ok(ProbeLayer::Stem),
            "bottleneck" => Ok(ProbeLayer::Bottleneck),
            _ => s
                .strip_prefix("stage")
                .and_then(|i| i.parse().ok())
                .map(ProbeLayer::Stage)
                .ok_or_else(|| format!("unknown layer `{s}` (input, stem, stageN, bottleneck)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    stem: Conv,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
    bottleneck: Vec<Residual>,
    decoder: Vec<DecoderBlock>,
    head: Conv,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let s0 = config.spatial_strides[0];
        let stem = Conv {
            name: "enc.stem".into(),
            rank: 3,
            in_c: 1,
            out_c: config.widths[0],
            kernel: [3, 2 * s0 - 1, 2 * s0 - 1],
            stride: [config.depth_strides[0], s0, s0],
            pad: [1, s0 - 1, s0 - 1],
            bias: false,
        };
        let mut stages = Vec::new();
        let mut in_c = config.widths[0];
        for (i, (&w, &n)) in config.widths.iter().zip(&config.blocks).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n.max(1) {
                let stride = if i > 0 && b == 0 {
                    [config.depth_strides[i], config.spatial_strides[i], config.spatial_strides[i]]
                } else {
                    [1; 3]
                };
                blocks.push(BasicBlock::new(&format!("enc.stage{i}.block{b}"), in_c, w, stride));
                in_c = w;
            }
            stages.push(blocks);
        }
        let deep_c = *config.widths.last().unwrap();
        let deep_d = config.deep_depth();
        let mut bottleneck = Vec::new();
        for b in 0..config.bottleneck_blocks {
            let name = format!("neck.block{b}");
            let variant = match config.bottleneck {
                BottleneckKind::None => break,
                BottleneckKind::Conv3d => {
                    bottleneck.push(Residual::Conv(ConvResidualBlock::new(&name, deep_c, config.drop_path)));
                    continue;
                }
                BottleneckKind::Stffc => Variant::SpatioTemporal { depth: deep_d },
                BottleneckKind::Vffc => Variant::Volumetric,
            };
            bottleneck.push(Residual::Ffc(FfcResidualBlock::new(
                &name,
                deep_c,
                config.global_ratio,
                variant,
                config.drop_path,
            )?));
        }
        let s = config.stages();
        let mut decoder = Vec::new();
        let mut c = deep_c;
        for j in 0..s {
            let upsample = j + 1 < s;
            let in_c = if upsample { c + config.widths[s - 2 - j] } else { c };
            let out_c = config.decoder_widths[j];
            decoder.push(DecoderBlock {
                upsample,
                conv: Conv::same2(format!("dec.block{j}.conv"), in_c, out_c, 3),
                bn: BatchNorm::new(format!("dec.block{j}.bn"), out_c),
            });
            c = out_c;
        }
        let head = Conv::same2("head", c, 1, 1).with_bias();
        let stem_bn = BatchNorm::new("enc.stem_bn", config.widths[0]);
        Ok(Network {
            config,
            stem,
            stem_bn,
            stages,
            bottleneck,
            decoder,
            head,
        })
    }

    /// Fresh parameters for this network, deterministic in `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        self.declare(&mut store)?;
        Ok(store)
    }

    pub fn declare(&self, store: &mut ParamStore) -> Result<()> {
        self.stem.declare(store)?;
        self.stem_bn.declare(store)?;
        for block in self.stages.iter().flatten() {
            block.declare(store)?;
        }
        for block in &self.bottleneck {
            match block {
                Residual::Conv(b) => b.declare(store)?,
                Residual::Ffc(b) => b.declare(store)?,
            }
        }
        for block in &self.decoder {
            block.conv.declare(store)?;
            block.bn.declare(store)?;
        }
        self.head.declare(store)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[4] != 1 {
            return Err(Error::invalid("network", format!("expected (N, D, H, W, 1), got {shape:?}")));
        }
        let t = self.config.total_stride();
        if !shape[2].is_multiple_of(t) || !shape[3].is_multiple_of(t) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::invalid(
                "network",
                format!("H and W must be positive multiples of {t}, got {}x{}", shape[2], shape[3]),
            ));
        }
        if shape[1] != self.config.in_depth {
            return Err(Error::invalid(
                "network",
                format!("network built for depth {}, input has depth {}", self.config.in_depth, shape[1]),
            ));
        }
        Ok(())
    }

    /// Encoder: stem output followed by one feature map per stage.
    pub fn encode3d(&self, ctx: &mut Ctx, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(x.shape())?;
        let h = self.stem.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, &h)?;
        let stem = ctx.relu(&h)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = stem.clone();
        for stage in &self.stages {
            for block in stage {
                h = block.forward(ctx, &h)?;
            }
            feats.push(h.clone());
        }
        Ok((stem, feats))
    }

    pub fn bottleneck(&self, ctx: &mut Ctx, deep: &Tensor) -> Result<Tensor> {
        let mut h = deep.clone();
        for block in &self.bottleneck {
            h = match block {
                Residual::Conv(b) => b.forward(ctx, &h)?,
                Residual::Ffc(b) => b.forward(ctx, &h)?,
            };
        }
        Ok(h)
    }

    pub fn forward_full(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Activations> {
        let (stem, stages) = self.encode3d(ctx, x)?;
        let neck = self.bottleneck(ctx, stages.last().unwrap())?;
        let s = stages.len();
        let mut h = depth_mean(&neck)?;
        for (j, block) in self.decoder.iter().enumerate() {
            if block.upsample {
                let skip = depth_mean(&stages[s - 2 - j])?;
                h = Tensor::concat(&[bilinear_up2(&h)?, skip], 3)?;
            }
            h = block.conv.forward(ctx, &h)?;
            h = block.bn.forward(ctx, &h)?;
            h = ctx.relu(&h)?;
        }
        let logits = self.head.forward(ctx, &h)?;
        Ok(Activations {
            stem,
            stages,
            bottleneck: neck,
            logits,
        })
    }

    /// Ink logits of shape `(N, H/4, W/4, 1)`.
    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_full(ctx, x)?.logits)
    }

    /// Eval-mode ink probabilities for a batch, without recording gradients.
    pub fn predict(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(store, crate::params::Mode::Eval, 0);
        self.forward(&mut ctx, x)?.sigmoid()
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VFFCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R, limit: usize) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > limit {
        return Err(Error::invalid("checkpoint", format!("string of {len} bytes exceeds limit")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::invalid("checkpoint", "string is not UTF-8"))
}

/// Serializes `config` and every parameter and running statistic.
///
/// ```text
/// b"VFFCCKPT" | version u32 | sha256(config text) 32 bytes
/// | config text (u32 length + UTF-8) | tensor count u32
/// | count x (name: u32 length + UTF-8 | tensor container)
/// ```
///
/// Batch-norm statistics are stored as `<name>.mean` / `<name>.var`.
pub fn write_checkpoint<W: Write>(w: &mut W, config: &NetworkConfig, store: &ParamStore) -> Result<()> {
    let text = config.to_text();
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    w.write_all(&config.digest())?;
    write_name(w, &text)?;
    write_u32(w, (store.params.len() + 2 * store.buffers.len()) as u32)?;
    for (name, p) in &store.params {
        write_name(w, name)?;
        container::write_raw(w, &p.shape, &p.value)?;
    }
    for (name, s) in &store.buffers {
        let c = s.mean.len();
        write_name(w, &format!("{name}.mean"))?;
        container::write_raw(w, &[c], &s.mean)?;
        write_name(w, &format!("{name}.var"))?;
        container::write_raw(w, &[c], &s.var)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(NetworkConfig, ParamStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::invalid("checkpoint", "bad magic"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::invalid("checkpoint", format!("unsupported version {version}")));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    let text = read_string(r, 1 << 16)?;
    let config = NetworkConfig::from_text(&text)?;
    if config.digest() != digest {
        return Err(Error::invalid("checkpoint", "config digest mismatch"));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new(0);
    let mut pending: std::collections::BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = Default::default();
    for _ in 0..count {
        let name = read_string(r, 1 << 12)?;
        let (shape, data) = container::read_raw(r)?;
        if let Some(base) = name.strip_suffix(".stats.mean") {
            pending.entry(format!("{base}.stats")).or_default().0 = Some(data);
        } else if let Some(base) = name.strip_suffix(".stats.var") {
            pending.entry(format!("{base}.stats")).or_default().1 = Some(data);
        } else {
            store.params.insert(name, Param::new(&shape, data));
        }
    }
    for (name, (mean, var)) in pending {
        match (mean, var) {
            (Some(mean), Some(var)) if mean.len() == var.len() => {
                store.buffers.insert(name, RunningStats { mean, var });
            }
            _ => return Err(Error::invalid("checkpoint", format!("incomplete statistics for {name}"))),
        }
    }
    // Every parameter the architecture needs must be present with the right shape.
    let net = Network::new(config.clone())?;
    let mut reference = ParamStore::new(0);
    net.declare(&mut reference)?;
    for (name, p) in &reference.params {
        let got = store
            .params
            .get(name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing parameter {name}")))?;
        if got.shape != p.shape {
            return Err(Error::invalid("checkpoint", format!("{name}: shape {:?}, expected {:?}", got.shape, p.shape)));
        }
    }
    if reference.params.len() != store.params.len() || reference.buffers.len() != store.buffers.len() {
        return Err(Error::invalid("checkpoint", "unexpected extra tensors"));
    }
    Ok((config, store))
}

pub fn save_checkpoint(path: &Path, config: &NetworkConfig, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, store)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkConfig, ParamStore)> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice()).map_err(|e| match e {
        Error::Io(io) => Error::format(path, format!("truncated checkpoint ({io})")),
        Error::InvalidArgument { msg, .. } => Error::format(path, msg),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffc::zero_params;
    use crate::params::Mode;
    use crate::tensor::{grad_check, numel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn desk_shapes() {
        let net = Network::new(NetworkConfig::desk()).unwrap();
        let mut store = net.init(0).unwrap();
        let x = random(&[1, 16, 128, 128, 1], 1);
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let act = net.forward_full(&mut ctx, &x).unwrap();
        assert_eq!(act.stages.last().unwrap().shape(), &[1, 2, 4, 4, 128]);
        assert_eq!(act.logits.shape(), &[1, 32, 32, 1]);
        assert_eq!(NetworkConfig::desk().depths(), vec![8, 4, 2, 2]);
    }

    /// Parameter count of the desk layout worked out layer by layer.
    #[test]
    fn desk_parameter_count() {
        let conv = |i: usize, o: usize, k: usize| i * o * k;
        let bn = |c: usize| 2 * c;
        let mut n = conv(1, 16, 3 * 7 * 7) + bn(16);
        let widths = [16, 32, 64, 128];
        let mut prev = 16;
        for &w in &widths {
            // First block of each stage (projection where the width changes).
            n += conv(prev, w, 27) + bn(w) + conv(w, w, 27) + bn(w);
            if prev != w {
                n += conv(prev, w, 1) + bn(w);
            }
            // Second block.
            n += 2 * (conv(w, w, 27) + bn(w));
            prev = w;
        }
        // Three vFFC residual blocks, two FFC layers each, 64/64 split.
        let ffc = 3 * conv(64, 64, 27) + conv(128, 128, 1) + bn(128) + 2 * bn(64);
        n += 3 * 2 * ffc;
        // Decoder: 3x3 convs on concatenated inputs, then the 1x1 head.
        n += conv(128 + 64, 64, 9) + bn(64);
        n += conv(64 + 32, 32, 9) + bn(32);
        n += conv(32 + 16, 16, 9) + bn(16);
        n += conv(16, 16, 9) + bn(16);
        n += 16 + 1;
        let store = Network::new(NetworkConfig::desk()).unwrap().init(0).unwrap();
        assert_eq!(store.count(), n);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let net = Network::new(NetworkConfig::tiny()).unwrap();
        let mut store = net.init(0).unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let (stem, feats) = net.encode3d(&mut ctx, &Tensor::zeros(&[1, 4, 32, 32, 1])).unwrap();
        assert!(stem.data().iter().chain(feats.iter().flat_map(|f| f.data())).all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let net = Network::new(NetworkConfig::tiny()).unwrap();
        let mut store = net.init(0).unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        assert!(net.forward(&mut ctx, &Tensor::zeros(&[1, 4, 30, 32, 1])).is_err());
        assert!(net.forward(&mut ctx, &Tensor::zeros(&[1, 5, 32, 32, 1])).is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.spatial_strides = vec![4, 2, 2, 1];
        assert!(Network::new(cfg).is_err());
    }

    #[test]
    fn bottleneck_kinds_preserve_shape_and_share_the_rest() {
        let deep = random(&[1, 2, 8, 8, 128], 3);
        let mut outside: Option<Vec<(String, Vec<f64>)>> = None;
        for kind in BottleneckKind::ALL {
            let cfg = NetworkConfig {
                bottleneck: kind,
                ..NetworkConfig::desk()
            };
            let net = Network::new(cfg).unwrap();
            let mut store = net.init(42).unwrap();
            let rest: Vec<_> = store
                .params
                .iter()
                .filter(|(k, _)| !k.starts_with("neck."))
                .map(|(k, p)| (k.clone(), p.value.clone()))
                .collect();
            match &outside {
                None => outside = Some(rest),
                Some(first) => assert!(first == &rest, "{kind}"),
            }
            let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
            let y = net.bottleneck(&mut ctx, &deep).unwrap();
            assert_eq!(y.shape(), deep.shape());
            if kind == BottleneckKind::None {
                assert_eq!(y.data(), deep.data());
            }
        }
        let net = Network::new(NetworkConfig::desk()).unwrap();
        let mut store = net.init(1).unwrap();
        zero_params(&mut store, "neck.");
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        assert_eq!(net.bottleneck(&mut ctx, &deep).unwrap().data(), deep.data());
    }

    #[test]
    fn tiny_network_gradient() {
        let net = Network::new(NetworkConfig::tiny()).unwrap();
        let store = net.init(5).unwrap();
        let x = random(&[1, 4, 32, 32, 1], 6);
        let err = grad_check(
            |t| {
                let mut s = store.clone();
                let mut ctx = Ctx::new(&mut s, Mode::Train, 0);
                net.forward(&mut ctx, t)?.sigmoid()?.sum_all()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        for kind in BottleneckKind::ALL {
            let cfg = NetworkConfig {
                bottleneck: kind,
                ..NetworkConfig::tiny()
            };
            let net = Network::new(cfg).unwrap();
            let mut store = net.init(7).unwrap();
            let x = random(&[2, 4, 32, 32, 1], 8);
            let target = random(&[2, 8, 8, 1], 9);
            let mut ctx = Ctx::new(&mut store, Mode::Train, 0);
            let loss = net.forward(&mut ctx, &x).unwrap().sub(&target).unwrap().square().unwrap().sum_all().unwrap();
            loss.backward().unwrap();
            let grads = ctx.grads();
            assert_eq!(grads.len(), store.params.len());
            for (name, g) in grads {
                assert!(g.iter().any(|&v| v != 0.0), "{kind}: dead parameter {name}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = NetworkConfig {
            bottleneck: BottleneckKind::Stffc,
            ..NetworkConfig::tiny()
        };
        let net = Network::new(cfg.clone()).unwrap();
        let mut store = net.init(11).unwrap();
        let x = random(&[2, 4, 32, 32, 1], 12);
        // One training-mode pass so the running statistics are non-trivial.
        net.forward(&mut Ctx::new(&mut store, Mode::Train, 0), &x).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &store).unwrap();
        let (cfg2, mut store2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(store2.buffers, store.buffers);
        let a = net.predict(&mut store, &x).unwrap();
        let b = Network::new(cfg2).unwrap().predict(&mut store2, &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

        let mut corrupt = buf.clone();
        corrupt[20] ^= 1;
        assert!(read_checkpoint(&mut corrupt.as_slice()).is_err());
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn config_text_roundtrip() {
        for cfg in [NetworkConfig::desk(), NetworkConfig::tiny(), NetworkConfig::resnet34()] {
            assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
        assert!(NetworkConfig::from_text("bogus = 1").is_err());
    }
}
