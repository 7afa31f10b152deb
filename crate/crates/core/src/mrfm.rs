//! Multi-receptive-field module: a basic block and a dilated twin mixed by
//! softmax-normalized path weights, the parameter-sharing lite form, the
//! removal of its atrous path, and receptive-field algebra.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    BatchNormState, BnMode, ConvParams, Param, ParamKind, Shape, Tape, Tensor, Var,
};

/// Depthwise 3×3, pointwise 1×1, batch norm, relu.
#[derive(Clone, Debug)]
pub struct SepStage {
    pub depthwise: ConvParams,
    pub pointwise: ConvParams,
    pub bn: BatchNormState,
}

impl SepStage {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        SepStage {
            depthwise: ConvParams::kaiming(
                in_channels,
                in_channels,
                3,
                stride,
                dilation,
                in_channels,
                false,
                rng,
            ),
            pointwise: ConvParams::kaiming(in_channels, out_channels, 1, 1, 1, 1, false, rng),
            bn: BatchNormState::new(out_channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.depthwise_separable(x, &self.depthwise, &self.pointwise)?;
        let y = tape.batch_norm(y, &self.bn)?;
        Ok(tape.relu(y))
    }

    fn with_dilation(&self, dilation: usize) -> Self {
        SepStage {
            depthwise: self.depthwise.with_dilation(dilation),
            pointwise: self.pointwise.clone(),
            bn: self.bn.clone(),
        }
    }

    fn deep_clone(&self) -> Self {
        SepStage {
            depthwise: self.depthwise.deep_clone(),
            pointwise: self.pointwise.deep_clone(),
            bn: self.bn.deep_clone(),
        }
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        push_conv(out, &format!("{prefix}.dw"), &self.depthwise);
        push_conv(out, &format!("{prefix}.pw"), &self.pointwise);
        push_bn(out, &format!("{prefix}.bn"), &self.bn);
    }
}

/// 1×1 projection with batch norm on the skip connection.
#[derive(Clone, Debug)]
pub struct Projection {
    pub conv: ConvParams,
    pub bn: BatchNormState,
}

pub(crate) fn push_conv(out: &mut Vec<(String, Param)>, prefix: &str, conv: &ConvParams) {
    out.push((format!("{prefix}.weight"), conv.weight.clone()));
    if let Some(b) = &conv.bias {
        out.push((format!("{prefix}.bias"), b.clone()));
    }
}

pub(crate) fn push_bn(out: &mut Vec<(String, Param)>, prefix: &str, bn: &BatchNormState) {
    out.push((format!("{prefix}.scale"), bn.scale.clone()));
    out.push((format!("{prefix}.shift"), bn.shift.clone()));
    out.push((format!("{prefix}.running_mean"), bn.running_mean.clone()));
    out.push((format!("{prefix}.running_var"), bn.running_var.clone()));
}

/// Number of trainable scalars (running statistics excluded).
pub fn census(params: &[(String, Param)]) -> usize {
    params
        .iter()
        .filter(|(_, p)| p.kind() != ParamKind::Buffer)
        .map(|(_, p)| p.numel())
        .sum()
}

/// Three separable stages plus a skip connection. The stride sits on the
/// last depthwise convolution; the skip is a projection iff the channel
/// count or the stride changes.
#[derive(Clone, Debug)]
pub struct BasicModule {
    pub stages: Vec<SepStage>,
    pub skip: Option<Projection>,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    dilation: usize,
}

impl BasicModule {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || stride == 0 || dilation == 0 {
            return Err(Error::config(format!(
                "basic module needs positive channels/stride/dilation, got {in_channels}->{out_channels} s{stride} d{dilation}"
            )));
        }
        let stages = vec![
            SepStage::new(in_channels, out_channels, 1, dilation, rng),
            SepStage::new(out_channels, out_channels, 1, dilation, rng),
            SepStage::new(out_channels, out_channels, stride, dilation, rng),
        ];
        let skip = (in_channels != out_channels || stride != 1).then(|| Projection {
            conv: ConvParams::kaiming(in_channels, out_channels, 1, stride, 1, 1, false, rng),
            bn: BatchNormState::new(out_channels),
        });
        Ok(BasicModule {
            stages,
            skip,
            in_channels,
            out_channels,
            stride,
            dilation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.shape(x).c();
        if c != self.in_channels {
            return Err(Error::shape(
                "basic_module",
                format!(
                    "input has {c} channels, module expects {}",
                    self.in_channels
                ),
            ));
        }
        let mut y = x;
        for stage in &self.stages {
            y = stage.forward(tape, y)?;
        }
        let skip = match &self.skip {
            Some(p) => {
                let s = tape.conv2d(x, &p.conv)?;
                tape.batch_norm(s, &p.bn)?
            }
            None => x,
        };
        tape.add(y, skip)
    }

    /// Same parameter storage with every depthwise dilation multiplied by `k`.
    pub fn with_dilation_factor(&self, k: usize) -> Self {
        let dilation = self.dilation * k;
        BasicModule {
            stages: self
                .stages
                .iter()
                .map(|s| s.with_dilation(dilation))
                .collect(),
            dilation,
            ..self.clone()
        }
    }

    /// Independent copy of every parameter, buffer and norm mode.
    pub fn deep_clone(&self) -> Self {
        BasicModule {
            stages: self.stages.iter().map(SepStage::deep_clone).collect(),
            skip: self.skip.as_ref().map(|p| Projection {
                conv: p.conv.deep_clone(),
                bn: p.bn.deep_clone(),
            }),
            ..self.clone()
        }
    }

    /// Parameters and buffers under `prefix.s{j}.{dw,pw,bn}.*` and
    /// `prefix.skip.{conv,bn}.*`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        for (j, stage) in self.stages.iter().enumerate() {
            stage.named_params(&format!("{prefix}.s{j}"), &mut out);
        }
        if let Some(p) = &self.skip {
            push_conv(&mut out, &format!("{prefix}.skip.conv"), &p.conv);
            push_bn(&mut out, &format!("{prefix}.skip.bn"), &p.bn);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        census(&self.named_params("m"))
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormState> {
        self.stages
            .iter()
            .map(|s| &s.bn)
            .chain(self.skip.as_ref().map(|p| &p.bn))
            .collect()
    }

    /// Longest path through the block (the main branch).
    pub fn layer_spec(&self) -> Vec<Layer> {
        self.stages
            .iter()
            .flat_map(|s| {
                [
                    Layer::new(3, s.depthwise.stride, s.depthwise.dilation),
                    Layer::new(1, 1, 1),
                ]
            })
            .collect()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mut s = input;
        for stage in &self.stages {
            s = stage
                .pointwise
                .output_shape(stage.depthwise.output_shape(s)?)?;
        }
        Ok(s)
    }
}

/// Two paths mixed by `softmax(logits)`: `y = w₁·f₁(x) + w₂·g_k(x)`.
#[derive(Clone, Debug)]
pub struct MrfmState {
    pub standard: BasicModule,
    pub atrous: BasicModule,
    pub logits: Param,
    k: usize,
    shared: bool,
}

fn zero_logits() -> Param {
    Param::new(Tensor::zeros(Shape::new(1, 2, 1, 1)), ParamKind::NoDecay)
}

impl MrfmState {
    /// Standard form: the atrous path gets its own freshly initialized
    /// parameters at `k` times the template's dilation.
    pub fn standard<R: Rng + ?Sized>(template: BasicModule, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("mrfm dilation rate must be >= 1"));
        }
        let atrous = BasicModule::new(
            template.in_channels,
            template.out_channels,
            template.stride,
            template.dilation * k,
            rng,
        )?;
        Self::from_paths(template, atrous, k)
    }

    /// Unshared form from two explicit paths.
    pub fn from_paths(standard: BasicModule, atrous: BasicModule, k: usize) -> Result<Self> {
        if (standard.in_channels, standard.out_channels, standard.stride)
            != (atrous.in_channels, atrous.out_channels, atrous.stride)
            || atrous.dilation != standard.dilation * k
        {
            return Err(Error::config(format!(
                "mrfm paths disagree: {}->{} s{} d{} vs {}->{} s{} d{} (k={k})",
                standard.in_channels,
                standard.out_channels,
                standard.stride,
                standard.dilation,
                atrous.in_channels,
                atrous.out_channels,
                atrous.stride,
                atrous.dilation
            )));
        }
        Ok(MrfmState {
            standard,
            atrous,
            logits: zero_logits(),
            k,
            shared: false,
        })
    }

    /// Shared form for any `k >= 1`: both paths reference the template's
    /// storage, including its normalization statistics.
    pub fn shared(template: BasicModule, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("mrfm dilation rate must be >= 1"));
        }
        let atrous = template.with_dilation_factor(k);
        Ok(MrfmState {
            standard: template,
            atrous,
            logits: zero_logits(),
            k,
            shared: true,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// Normalized path weights `(w₁, w₂)`.
    pub fn path_weights(&self) -> [f64; 2] {
        let l = self.logits.value();
        let (a, b) = (l.data()[0], l.data()[1]);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        [ea / (ea + eb), eb / (ea + eb)]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.standard.forward(tape, x)?;
        let g = self.atrous.forward(tape, x)?;
        if tape.shape(f) != tape.shape(g) {
            return Err(Error::shape(
                "mrfm",
                format!(
                    "path outputs differ: {} vs {}",
                    tape.shape(f),
                    tape.shape(g)
                ),
            ));
        }
        let logits = tape.param(&self.logits);
        let w = tape.softmax_channels(logits);
        let f = tape.scale_by(f, w, 0)?;
        let g = tape.scale_by(g, w, 1)?;
        tape.add(f, g)
    }

    /// Names: `prefix.shared.*` for the lite form, otherwise
    /// `prefix.standard.*` and `prefix.atrous.*`; always `prefix.logits`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Param)> {
        let mut out = if self.shared {
            self.standard.named_params(&format!("{prefix}.shared"))
        } else {
            let mut v = self.standard.named_params(&format!("{prefix}.standard"));
            v.extend(self.atrous.named_params(&format!("{prefix}.atrous")));
            v
        };
        out.push((format!("{prefix}.logits"), self.logits.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        census(&self.named_params("m"))
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormState> {
        let mut v = self.standard.batch_norms();
        if !self.shared {
            v.extend(self.atrous.batch_norms());
        }
        v
    }

    /// Independent copy; a shared state stays shared within the copy.
    pub fn deep_clone(&self) -> Self {
        let standard = self.standard.deep_clone();
        let atrous = if self.shared {
            standard.with_dilation_factor(self.k)
        } else {
            self.atrous.deep_clone()
        };
        MrfmState {
            standard,
            atrous,
            logits: self.logits.deep_clone(),
            k: self.k,
            shared: self.shared,
        }
    }

    /// Copy with both paths in separate storage holding the current values.
    pub fn unshared_twin(&self) -> Self {
        MrfmState {
            standard: self.standard.deep_clone(),
            atrous: self.atrous.deep_clone(),
            logits: self.logits.deep_clone(),
            k: self.k,
            shared: false,
        }
    }
}

/// Lite form with `k >= 2`.
pub fn make_mrfm_lite(template: BasicModule, k: usize) -> Result<MrfmState> {
    if k < 2 {
        return Err(Error::config(format!(
            "mrfm-lite needs dilation rate k >= 2, got {k}"
        )));
    }
    MrfmState::shared(template, k)
}

/// Drops the atrous path and the path weights of a lite module, returning
/// its standard path over the trained shared storage.
pub fn remove_atrous_path(s: &MrfmState) -> Result<BasicModule> {
    if !s.shared {
        return Err(Error::config(
            "remove_atrous_path needs a shared (lite) module; the unshared atrous parameters would be lost",
        ));
    }
    Ok(s.standard.clone())
}

/// Freezes (or unfreezes to train mode) every normalization in `bns`.
pub fn set_norm_mode(bns: &[&BatchNormState], mode: BnMode) {
    for bn in bns {
        bn.set_mode(mode);
    }
}

/// One convolution in receptive-field algebra.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layer {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Layer {
    pub fn new(kernel: usize, stride: usize, dilation: usize) -> Self {
        Layer {
            kernel,
            stride,
            dilation,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{0}x{0}/s{1}/d{2}",
            self.kernel, self.stride, self.dilation
        )
    }
}

impl FromStr for Layer {
    type Err = Error;

    /// Parses `KxK/sS/dD`; the stride and dilation parts are optional.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad layer '{s}', expected e.g. 3x3/s1/d2"));
        let mut parts = s.trim().split('/');
        let kernel = parts.next().ok_or_else(bad)?;
        let (kh, kw) = kernel.split_once('x').ok_or_else(bad)?;
        let kh: usize = kh.trim().parse().map_err(|_| bad())?;
        let kw: usize = kw.trim().parse().map_err(|_| bad())?;
        if kh != kw {
            return Err(Error::config(format!(
                "layer '{s}': only square kernels are supported"
            )));
        }
        let (mut stride, mut dilation) = (1, 1);
        for part in parts {
            let part = part.trim();
            let value = |p: &str| p.parse::<usize>().map_err(|_| bad());
            if let Some(v) = part.strip_prefix('s') {
                stride = value(v)?;
            } else if let Some(v) = part.strip_prefix('d') {
                dilation = value(v)?;
            } else {
                return Err(bad());
            }
        }
        let layer = Layer::new(kh, stride, dilation);
        if kh == 0 || stride == 0 || dilation == 0 {
            return Err(Error::config(format!(
                "layer '{s}': all entries must be positive"
            )));
        }
        Ok(layer)
    }
}

/// Ordered layers along one path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec(Vec<Layer>);

impl LayerSpec {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("layer spec must not be empty"));
        }
        if let Some(l) = layers
            .iter()
            .find(|l| l.kernel == 0 || l.stride == 0 || l.dilation == 0)
        {
            return Err(Error::config(format!("layer {l:?} has a zero entry")));
        }
        Ok(LayerSpec(layers))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.0
    }

    /// Comma-separated list of layers, e.g. `3x3/s1/d1, 3x3/s2/d1`.
    pub fn parse(s: &str) -> Result<Self> {
        Self::new(s.split(',').map(str::parse).collect::<Result<_>>()?)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(Layer::to_string).collect();
        f.write_str(&parts.join(", "))
    }
}

/// Receptive field and jump (cumulative stride) at the end of `path`.
pub fn receptive_field(path: &LayerSpec) -> (usize, usize) {
    path.0.iter().fold((1, 1), |(rf, jump), l| {
        (rf + (l.kernel - 1) * l.dilation * jump, jump * l.stride)
    })
}
