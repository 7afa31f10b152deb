//! Desk-scale encoder-decoder: stem, entry block, middle flow and exit
//! block with optional MRFM replacement, mini-ASPP, decoder, classifier,
//! and self-describing checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, StateDict};
use crate::mrfm::{
    census, push_bn, push_conv, receptive_field, remove_atrous_path, BasicModule, Layer, LayerSpec,
    MrfmState, SepStage,
};
use crate::tensor::{
    read_tensors, write_tensors, BatchNormState, BnMode, ConvParams, Param, ParamKind, Tape, Var,
};

const FORMAT: &str = "mrfseg-model";
const VERSION: &str = "1";
const ATROUS_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrfmMode {
    None,
    Lite,
    Standard,
}

impl fmt::Display for MrfmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MrfmMode::None => "none",
            MrfmMode::Lite => "lite",
            MrfmMode::Standard => "standard",
        })
    }
}

impl FromStr for MrfmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(MrfmMode::None),
            "lite" => Ok(MrfmMode::Lite),
            "standard" => Ok(MrfmMode::Standard),
            other => Err(Error::config(format!(
                "unknown mrfm mode '{other}' (none|lite|standard)"
            ))),
        }
    }
}

/// Where MRFM replaces basic modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placement {
    MiddleFlow,
    ExitBlock1,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::MiddleFlow => "middle_flow",
            Placement::ExitBlock1 => "exit_flow_block1",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "middle_flow" => Ok(Placement::MiddleFlow),
            "exit_flow_block1" => Ok(Placement::ExitBlock1),
            other => Err(Error::config(format!(
                "unknown mrfm placement '{other}' (middle_flow|exit_flow_block1)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub num_classes: usize,
    pub stem_channels: [usize; 2],
    pub middle_blocks: usize,
    pub middle_channels: usize,
    pub exit_channels: usize,
    pub output_stride: usize,
    pub mrfm_mode: MrfmMode,
    pub mrfm_dilation: usize,
    pub mrfm_placement: BTreeSet<Placement>,
    /// Lite model whose atrous paths and path weights have been removed.
    pub mrfm_pruned: bool,
    pub use_aspp: bool,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub aspp_pool: bool,
    pub use_decoder: bool,
    pub low_level_channels: usize,
    pub decoder_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            num_classes: 4,
            stem_channels: [16, 32],
            middle_blocks: 4,
            middle_channels: 64,
            exit_channels: 96,
            output_stride: 16,
            mrfm_mode: MrfmMode::None,
            mrfm_dilation: 4,
            mrfm_placement: [Placement::MiddleFlow, Placement::ExitBlock1]
                .into_iter()
                .collect(),
            mrfm_pruned: false,
            use_aspp: true,
            aspp_rates: vec![1, 2, 4],
            aspp_channels: 32,
            aspp_pool: true,
            use_decoder: true,
            low_level_channels: 16,
            decoder_channels: 24,
        }
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| {
        Error::config(format!(
            "{key}: expected a non-negative integer, got '{value}'"
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::config(format!(
            "{key}: expected true or false, got '{other}'"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_usize(key, s))
        .collect()
}

impl NetConfig {
    pub const KEYS: [&'static str; 17] = [
        "num_classes",
        "stem_channels",
        "middle_blocks",
        "middle_channels",
        "exit_channels",
        "output_stride",
        "mrfm_mode",
        "mrfm_dilation",
        "mrfm_placement",
        "mrfm_pruned",
        "use_aspp",
        "aspp_rates",
        "aspp_channels",
        "aspp_pool",
        "use_decoder",
        "low_level_channels",
        "decoder_channels",
    ];

    /// `key=value` pairs in a fixed order; [`NetConfig::set`] accepts them back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.num_classes.to_string(),
            join(self.stem_channels),
            self.middle_blocks.to_string(),
            self.middle_channels.to_string(),
            self.exit_channels.to_string(),
            self.output_stride.to_string(),
            self.mrfm_mode.to_string(),
            self.mrfm_dilation.to_string(),
            join(&self.mrfm_placement),
            self.mrfm_pruned.to_string(),
            self.use_aspp.to_string(),
            join(&self.aspp_rates),
            self.aspp_channels.to_string(),
            self.aspp_pool.to_string(),
            self.use_decoder.to_string(),
            self.low_level_channels.to_string(),
            self.decoder_channels.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse_usize(key, value)?,
            "stem_channels" => {
                let v = parse_list(key, value)?;
                self.stem_channels = v.try_into().map_err(|_| {
                    Error::config(format!("stem_channels: expected two widths, got '{value}'"))
                })?;
            }
            "middle_blocks" => self.middle_blocks = parse_usize(key, value)?,
            "middle_channels" => self.middle_channels = parse_usize(key, value)?,
            "exit_channels" => self.exit_channels = parse_usize(key, value)?,
            "output_stride" => self.output_stride = parse_usize(key, value)?,
            "mrfm_mode" => self.mrfm_mode = value.parse()?,
            "mrfm_dilation" => self.mrfm_dilation = parse_usize(key, value)?,
            "mrfm_placement" => {
                self.mrfm_placement = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "mrfm_pruned" => self.mrfm_pruned = parse_bool(key, value)?,
            "use_aspp" => self.use_aspp = parse_bool(key, value)?,
            "aspp_rates" => self.aspp_rates = parse_list(key, value)?,
            "aspp_channels" => self.aspp_channels = parse_usize(key, value)?,
            "aspp_pool" => self.aspp_pool = parse_bool(key, value)?,
            "use_decoder" => self.use_decoder = parse_bool(key, value)?,
            "low_level_channels" => self.low_level_channels = parse_usize(key, value)?,
            "decoder_channels" => self.decoder_channels = parse_usize(key, value)?,
            other => return Err(Error::config(format!("unknown net key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!(
                "num_classes must be in [2, 255), got {}",
                self.num_classes
            )));
        }
        let widths = [
            ("stem_channels", self.stem_channels[0]),
            ("stem_channels", self.stem_channels[1]),
            ("middle_channels", self.middle_channels),
            ("exit_channels", self.exit_channels),
            ("aspp_channels", self.aspp_channels),
            ("low_level_channels", self.low_level_channels),
            ("decoder_channels", self.decoder_channels),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.output_stride != 8 && self.output_stride != 16 {
            return Err(Error::config(format!(
                "output_stride must be 8 or 16, got {}",
                self.output_stride
            )));
        }
        if self.mrfm_mode != MrfmMode::None {
            if self.mrfm_placement.is_empty() {
                return Err(Error::config(
                    "mrfm_placement must be non-empty when mrfm_mode is not none",
                ));
            }
            if self.mrfm_placement == BTreeSet::from([Placement::MiddleFlow])
                && self.middle_blocks == 0
            {
                return Err(Error::config(
                    "mrfm placed in the middle flow but middle_blocks is 0",
                ));
            }
            let min_k = if self.mrfm_mode == MrfmMode::Lite {
                2
            } else {
                1
            };
            if self.mrfm_dilation < min_k {
                return Err(Error::config(format!(
                    "mrfm_dilation must be >= {min_k} for {} mode, got {}",
                    self.mrfm_mode, self.mrfm_dilation
                )));
            }
        }
        if self.mrfm_pruned && self.mrfm_mode != MrfmMode::Lite {
            return Err(Error::config("mrfm_pruned applies only to lite mode"));
        }
        if self.use_aspp {
            if self.aspp_rates.is_empty() && !self.aspp_pool {
                return Err(Error::config(
                    "aspp needs at least one rate or the pooling branch",
                ));
            }
            let distinct: BTreeSet<_> = self.aspp_rates.iter().collect();
            if distinct.len() != self.aspp_rates.len() || distinct.contains(&0) {
                return Err(Error::config(format!(
                    "aspp_rates must be distinct positive integers, got {:?}",
                    self.aspp_rates
                )));
            }
        }
        Ok(())
    }

    fn mrfm_at(&self, p: Placement) -> bool {
        self.mrfm_mode != MrfmMode::None && self.mrfm_placement.contains(&p)
    }

    /// Feature channels entering the classifier or decoder from the head.
    fn head_channels(&self) -> usize {
        if self.use_aspp {
            self.aspp_channels
        } else {
            self.exit_channels
        }
    }
}

/// Convolution with optional batch norm and relu.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: ConvParams,
    pub bn: Option<BatchNormState>,
    pub relu: bool,
}

impl ConvUnit {
    pub fn conv_bn_relu(conv: ConvParams) -> Self {
        let bn = BatchNormState::new(conv.out_channels());
        ConvUnit {
            conv,
            bn: Some(bn),
            relu: true,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut y = tape.conv2d(x, &self.conv)?;
        if let Some(bn) = &self.bn {
            y = tape.batch_norm(y, bn)?;
        }
        Ok(if self.relu { tape.relu(y) } else { y })
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        push_conv(out, &format!("{prefix}.conv"), &self.conv);
        if let Some(bn) = &self.bn {
            push_bn(out, &format!("{prefix}.bn"), bn);
        }
    }
}

/// A middle-flow or exit block: plain, lite after atrous-path removal, or MRFM.
#[derive(Clone, Debug)]
pub enum Block {
    Plain(BasicModule),
    Pruned(BasicModule),
    Mrfm(MrfmState),
}

impl Block {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Block::Plain(m) | Block::Pruned(m) => m.forward(tape, x),
            Block::Mrfm(s) => s.forward(tape, x),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Param)> {
        match self {
            Block::Plain(m) => m.named_params(&format!("{prefix}.standard")),
            Block::Pruned(m) => m.named_params(&format!("{prefix}.shared")),
            Block::Mrfm(s) => s.named_params(prefix),
        }
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormState> {
        match self {
            Block::Plain(m) | Block::Pruned(m) => m.batch_norms(),
            Block::Mrfm(s) => s.batch_norms(),
        }
    }

    /// Path with the largest receptive field.
    pub fn longest_path(&self) -> Vec<Layer> {
        match self {
            Block::Plain(m) | Block::Pruned(m) => m.layer_spec(),
            Block::Mrfm(s) => s.atrous.layer_spec(),
        }
    }
}

/// Parallel atrous branches plus image pooling, fused by a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub project: Option<ConvUnit>,
    pub atrous: Vec<ConvUnit>,
    /// 1×1 convolution (with bias, relu) applied to the pooled features.
    pub pool: Option<ConvUnit>,
    pub fuse: ConvUnit,
}

impl Aspp {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        rates: &[usize],
        pool: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let distinct: BTreeSet<_> = rates.iter().collect();
        if distinct.len() != rates.len() || distinct.contains(&0) {
            return Err(Error::config(format!(
                "aspp rates must be distinct and positive, got {rates:?}"
            )));
        }
        let project = Some(ConvUnit::conv_bn_relu(ConvParams::kaiming(
            in_channels,
            out_channels,
            1,
            1,
            1,
            1,
            false,
            rng,
        )));
        let atrous = rates
            .iter()
            .map(|&r| {
                ConvUnit::conv_bn_relu(ConvParams::kaiming(
                    in_channels,
                    out_channels,
                    3,
                    1,
                    r,
                    1,
                    false,
                    rng,
                ))
            })
            .collect();
        let pool = pool.then(|| ConvUnit {
            conv: ConvParams::kaiming(in_channels, out_channels, 1, 1, 1, 1, true, rng),
            bn: None,
            relu: true,
        });
        let branches = 1 + rates.len() + usize::from(pool.is_some());
        let fuse = ConvUnit::conv_bn_relu(ConvParams::kaiming(
            branches * out_channels,
            out_channels,
            1,
            1,
            1,
            1,
            false,
            rng,
        ));
        Ok(Aspp {
            project,
            atrous,
            pool,
            fuse,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.conv.out_channels()
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        if let Some(p) = &self.project {
            p.named_params(&format!("{prefix}.project"), out);
        }
        for b in &self.atrous {
            b.named_params(&format!("{prefix}.rate{}", b.conv.dilation), out);
        }
        if let Some(p) = &self.pool {
            p.named_params(&format!("{prefix}.pool"), out);
        }
        self.fuse.named_params(&format!("{prefix}.fuse"), out);
    }

    fn batch_norms(&self) -> Vec<&BatchNormState> {
        self.project
            .iter()
            .chain(&self.atrous)
            .chain(&self.pool)
            .chain(std::iter::once(&self.fuse))
            .filter_map(|u| u.bn.as_ref())
            .collect()
    }
}

/// Runs every branch of `aspp` on `features`, concatenates them along
/// channels (the pooled branch broadcast back by bilinear resize) and fuses.
pub fn mini_aspp(tape: &mut Tape, features: Var, aspp: &Aspp) -> Result<Var> {
    let s = tape.shape(features);
    let mut branches = Vec::new();
    if let Some(p) = &aspp.project {
        branches.push(p.forward(tape, features)?);
    }
    for b in &aspp.atrous {
        branches.push(b.forward(tape, features)?);
    }
    if let Some(p) = &aspp.pool {
        let pooled = tape.global_avg_pool(features);
        let pooled = p.forward(tape, pooled)?;
        branches.push(tape.bilinear_resize(pooled, s.h(), s.w())?);
    }
    let joined = match branches.as_slice() {
        [] => return Err(Error::config("aspp has no branches")),
        [one] => *one,
        _ => tape.channel_concat(&branches)?,
    };
    aspp.fuse.forward(tape, joined)
}

/// Low-level projection and two 3×3 refinement convolutions.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub reduce: ConvUnit,
    pub refine: Vec<ConvUnit>,
}

/// Intermediate results of [`SegModel::forward_detailed`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub logits: Var,
    /// Output of the exit block, at `1/output_stride` of the input.
    pub bottleneck: Var,
    /// Stem output at stride 4, tapped by the decoder.
    pub low_level: Var,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    cfg: NetConfig,
    pub stem: Vec<ConvUnit>,
    pub stem_sep: SepStage,
    pub entry: BasicModule,
    /// Middle-flow blocks followed by exit block 1.
    pub blocks: Vec<Block>,
    pub aspp: Option<Aspp>,
    pub decoder: Option<Decoder>,
    pub classifier: ConvParams,
}

impl SegModel {
    /// Deterministic construction from `seed`. Parameters that exist in the
    /// plain network are drawn from the same stream whatever the MRFM mode;
    /// separately initialized atrous paths come from a second stream.
    pub fn build(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut atrous_rng = ChaCha8Rng::seed_from_u64(seed ^ ATROUS_STREAM);
        let [s0, s1] = cfg.stem_channels;
        let stem = vec![
            ConvUnit::conv_bn_relu(ConvParams::kaiming(3, s0, 3, 2, 1, 1, false, &mut rng)),
            ConvUnit::conv_bn_relu(ConvParams::kaiming(s0, s1, 3, 2, 1, 1, false, &mut rng)),
        ];
        let stem_sep = SepStage::new(s1, s1, 1, 1, &mut rng);
        let entry = BasicModule::new(s1, cfg.middle_channels, 2, 1, &mut rng)?;

        let dilated = cfg.output_stride == 8;
        let mut blocks = Vec::with_capacity(cfg.middle_blocks + 1);
        for i in 0..=cfg.middle_blocks {
            let exit = i == cfg.middle_blocks;
            let module = if exit {
                let (stride, dilation) = if dilated { (1, 2) } else { (2, 1) };
                BasicModule::new(
                    cfg.middle_channels,
                    cfg.exit_channels,
                    stride,
                    dilation,
                    &mut rng,
                )?
            } else {
                BasicModule::new(cfg.middle_channels, cfg.middle_channels, 1, 1, &mut rng)?
            };
            let placement = if exit {
                Placement::ExitBlock1
            } else {
                Placement::MiddleFlow
            };
            let block = if !cfg.mrfm_at(placement) {
                Block::Plain(module)
            } else {
                match cfg.mrfm_mode {
                    MrfmMode::Lite if cfg.mrfm_pruned => Block::Pruned(module),
                    MrfmMode::Lite => Block::Mrfm(MrfmState::shared(module, cfg.mrfm_dilation)?),
                    _ => Block::Mrfm(MrfmState::standard(
                        module,
                        cfg.mrfm_dilation,
                        &mut atrous_rng,
                    )?),
                }
            };
            blocks.push(block);
        }

        let rate_scale = 16 / cfg.output_stride;
        let aspp = if cfg.use_aspp {
            let rates: Vec<usize> = cfg.aspp_rates.iter().map(|r| r * rate_scale).collect();
            Some(Aspp::new(
                cfg.exit_channels,
                cfg.aspp_channels,
                &rates,
                cfg.aspp_pool,
                &mut rng,
            )?)
        } else {
            None
        };
        let head = cfg.head_channels();
        let decoder = cfg.use_decoder.then(|| Decoder {
            reduce: ConvUnit::conv_bn_relu(ConvParams::kaiming(
                s1,
                cfg.low_level_channels,
                1,
                1,
                1,
                1,
                false,
                &mut rng,
            )),
            refine: vec![
                ConvUnit::conv_bn_relu(ConvParams::kaiming(
                    head + cfg.low_level_channels,
                    cfg.decoder_channels,
                    3,
                    1,
                    1,
                    1,
                    false,
                    &mut rng,
                )),
                ConvUnit::conv_bn_relu(ConvParams::kaiming(
                    cfg.decoder_channels,
                    cfg.decoder_channels,
                    3,
                    1,
                    1,
                    1,
                    false,
                    &mut rng,
                )),
            ],
        });
        let classifier_in = if cfg.use_decoder {
            cfg.decoder_channels
        } else {
            head
        };
        let classifier =
            ConvParams::kaiming(classifier_in, cfg.num_classes, 1, 1, 1, 1, true, &mut rng);
        Ok(SegModel {
            cfg: cfg.clone(),
            stem,
            stem_sep,
            entry,
            blocks,
            aspp,
            decoder,
            classifier,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(tape, x)?.logits)
    }

    pub fn forward_detailed(&self, tape: &mut Tape, x: Var) -> Result<ForwardOutputs> {
        let [_, c, h, w] = tape.shape(x).dims();
        if c != 3 {
            return Err(Error::shape(
                "segnet",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        let os = self.cfg.output_stride;
        if h % os != 0 || w % os != 0 {
            return Err(Error::shape(
                "segnet",
                format!("input extents {h}×{w} must be multiples of the output stride {os}"),
            ));
        }
        let mut y = x;
        for unit in &self.stem {
            y = unit.forward(tape, y)?;
        }
        let low_level = self.stem_sep.forward(tape, y)?;
        let mut y = self.entry.forward(tape, low_level)?;
        for block in &self.blocks {
            y = block.forward(tape, y)?;
        }
        let bottleneck = y;
        let mut head = match &self.aspp {
            Some(aspp) => mini_aspp(tape, bottleneck, aspp)?,
            None => bottleneck,
        };
        if let Some(dec) = &self.decoder {
            let ll = dec.reduce.forward(tape, low_level)?;
            let s = tape.shape(ll);
            let up = tape.bilinear_resize(head, s.h(), s.w())?;
            head = tape.channel_concat(&[up, ll])?;
            for unit in &dec.refine {
                head = unit.forward(tape, head)?;
            }
        }
        let logits = tape.conv2d(head, &self.classifier)?;
        let logits = tape.bilinear_resize(logits, h, w)?;
        Ok(ForwardOutputs {
            logits,
            bottleneck,
            low_level,
        })
    }

    /// Every parameter and buffer with its checkpoint name. Shared storage
    /// appears once.
    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        for (i, unit) in self.stem.iter().enumerate() {
            unit.named_params(&format!("stem.c{i}"), &mut out);
        }
        let mut sep = Vec::new();
        push_conv(&mut sep, "stem.sep.dw", &self.stem_sep.depthwise);
        push_conv(&mut sep, "stem.sep.pw", &self.stem_sep.pointwise);
        push_bn(&mut sep, "stem.sep.bn", &self.stem_sep.bn);
        out.extend(sep);
        out.extend(self.entry.named_params("entry"));
        for (i, block) in self.blocks.iter().enumerate() {
            out.extend(block.named_params(&format!("block{i}")));
        }
        if let Some(aspp) = &self.aspp {
            aspp.named_params("aspp", &mut out);
        }
        if let Some(dec) = &self.decoder {
            dec.reduce.named_params("decoder.reduce", &mut out);
            for (j, unit) in dec.refine.iter().enumerate() {
                unit.named_params(&format!("decoder.r{j}"), &mut out);
            }
        }
        push_conv(&mut out, "classifier", &self.classifier);
        out
    }

    /// Parameters the optimizer updates (buffers excluded).
    pub fn trainable_params(&self) -> Vec<(String, Param)> {
        self.named_params()
            .into_iter()
            .filter(|(_, p)| p.kind() != ParamKind::Buffer)
            .collect()
    }

    /// Count of trainable scalars.
    pub fn param_count(&self) -> usize {
        census(&self.named_params())
    }

    /// Per-component census: stem, entry, each block, aspp, decoder, classifier.
    pub fn census_table(&self) -> Vec<(String, usize)> {
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for (name, p) in self.named_params() {
            if p.kind() == ParamKind::Buffer {
                continue;
            }
            let group = name.split('.').next().unwrap_or("").to_string();
            if !groups.contains_key(&group) {
                order.push(group.clone());
            }
            *groups.entry(group).or_default() += p.numel();
        }
        order
            .into_iter()
            .map(|g| {
                let n = groups[&g];
                (g, n)
            })
            .collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormState> {
        let mut v: Vec<&BatchNormState> = self.stem.iter().filter_map(|u| u.bn.as_ref()).collect();
        v.push(&self.stem_sep.bn);
        v.extend(self.entry.batch_norms());
        for b in &self.blocks {
            v.extend(b.batch_norms());
        }
        if let Some(a) = &self.aspp {
            v.extend(a.batch_norms());
        }
        if let Some(d) = &self.decoder {
            v.extend(d.reduce.bn.as_ref());
            v.extend(d.refine.iter().filter_map(|u| u.bn.as_ref()));
        }
        v
    }

    /// Train or eval mode for every normalization that is not frozen.
    pub fn set_training(&self, training: bool) {
        for bn in self.batch_norms() {
            bn.set_training(training);
        }
    }

    /// Running statistics only, no statistic updates, affine parameters fixed.
    pub fn freeze_norm(&self) {
        for bn in self.batch_norms() {
            bn.set_mode(BnMode::Frozen);
        }
    }

    pub fn mrfm_blocks(&self) -> Vec<&MrfmState> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Mrfm(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    /// Replaces every lite MRFM by its standard path.
    pub fn prune_lite(&mut self) -> Result<()> {
        if self.cfg.mrfm_mode != MrfmMode::Lite || self.cfg.mrfm_pruned {
            return Err(Error::config("prune_lite needs an unpruned lite model"));
        }
        for block in &mut self.blocks {
            if let Block::Mrfm(s) = block {
                *block = Block::Pruned(remove_atrous_path(s)?);
            }
        }
        self.cfg.mrfm_pruned = true;
        Ok(())
    }

    /// Longest path from the input to the exit block output.
    pub fn bottleneck_layer_spec(&self) -> LayerSpec {
        let mut layers: Vec<Layer> = self
            .stem
            .iter()
            .map(|u| Layer::new(u.conv.kernel().0, u.conv.stride, u.conv.dilation))
            .collect();
        layers.push(Layer::new(3, 1, self.stem_sep.depthwise.dilation));
        layers.push(Layer::new(1, 1, 1));
        layers.extend(self.entry.layer_spec());
        for b in &self.blocks {
            layers.extend(b.longest_path());
        }
        LayerSpec::new(layers).expect("non-empty network")
    }

    pub fn bottleneck_receptive_field(&self) -> usize {
        receptive_field(&self.bottleneck_layer_spec()).0
    }

    pub fn state_dict(&self) -> StateDict {
        self.named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value()))
            .collect()
    }

    /// Copies values by name. The name sets must match exactly and every
    /// shape must agree; nothing is modified on error.
    pub fn load_state_dict(&self, dict: &StateDict) -> Result<()> {
        let params = self.named_params();
        let have: BTreeSet<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        let given: BTreeSet<&str> = dict.iter().map(|(n, _)| n.as_str()).collect();
        if have != given || given.len() != dict.len() {
            let mut unexpected: Vec<String> =
                given.difference(&have).map(|s| s.to_string()).collect();
            if given.len() != dict.len() {
                unexpected.push("<duplicate names>".into());
            }
            return Err(Error::TensorSetMismatch {
                missing: have.difference(&given).map(|s| s.to_string()).collect(),
                unexpected,
            });
        }
        let lookup: BTreeMap<&str, &crate::tensor::Tensor> =
            dict.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, p) in &params {
            let t = lookup[name.as_str()];
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: file has shape {}, model expects {}",
                    t.shape(),
                    p.shape()
                )));
            }
        }
        for (name, p) in &params {
            p.set_value(lookup[name.as_str()].clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("format={FORMAT}\nversion={VERSION}\n");
        for (k, v) in self.cfg.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push('\n');
        let mut bytes = out.into_bytes();
        write_tensors(&mut bytes, &self.state_dict())?;
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Builds the model described by the file header and loads its tensors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (cfg, dict) = parse_checkpoint(bytes)?;
        let model = SegModel::build(&cfg, 0)?;
        model.load_state_dict(&dict)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads a checkpoint into this model. Tensor names are checked first,
    /// then shapes, then the header configuration.
    pub fn load_into(&self, path: &Path) -> Result<()> {
        let (cfg, dict) = parse_checkpoint(&fs::read(path)?)?;
        let params = self.named_params();
        let have: BTreeSet<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        let given: BTreeSet<&str> = dict.iter().map(|(n, _)| n.as_str()).collect();
        if have != given {
            return Err(Error::TensorSetMismatch {
                missing: have.difference(&given).map(|s| s.to_string()).collect(),
                unexpected: given.difference(&have).map(|s| s.to_string()).collect(),
            });
        }
        if cfg != self.cfg {
            let diff: Vec<String> = cfg
                .entries()
                .into_iter()
                .zip(self.cfg.entries())
                .filter(|(a, b)| a.1 != b.1)
                .map(|(a, b)| format!("{}: file {} vs model {}", a.0, a.1, b.1))
                .collect();
            return Err(Error::Checkpoint(format!(
                "configuration mismatch: {}",
                diff.join("; ")
            )));
        }
        self.load_state_dict(&dict)
    }
}

fn parse_checkpoint(bytes: &[u8]) -> Result<(NetConfig, StateDict)> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Checkpoint("missing header terminator (blank line)".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
    let mut cfg = NetConfig::default();
    let mut format = None;
    let mut version = None;
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line '{line}'")))?;
        match k {
            "format" => format = Some(v),
            "version" => version = Some(v),
            _ => cfg
                .set(k, v)
                .map_err(|e| Error::Checkpoint(format!("header: {e}")))?,
        }
    }
    if format != Some(FORMAT) {
        return Err(Error::Checkpoint(format!(
            "not a model file (format {format:?})"
        )));
    }
    if version != Some(VERSION) {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version:?}, expected {VERSION}"
        )));
    }
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let dict = read_tensors(&mut &bytes[end + 2..])?;
    Ok((cfg, dict))
}
