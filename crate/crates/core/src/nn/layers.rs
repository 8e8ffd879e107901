//! Parameterized building blocks. Each block owns only its parameter names;
//! values live in a [`ModuleParams`] registry.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::params::{Graph, ModuleParams};
use crate::ops::conv::Conv2dParams;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Something with parameters and a known forward cost.
pub trait Module {
    /// Registers and initializes this block's parameters. Each tensor draws
    /// from a stream keyed by its own name, so adding or removing unrelated
    /// blocks never changes its values.
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()>;

    /// FLOPs for a single `(1, C, h, w)` input, counted the same way as
    /// [`Tape::flop_count`](crate::autograd::Tape::flop_count).
    fn flops(&self, h: usize, w: usize) -> u64;
}

/// `sqrt(6 / fan_in)`, the Kaiming-uniform bound for ReLU networks.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Result<Tensor<T>> {
    let bound = kaiming_bound(fan_in);
    let mut rng = SplitMix64::for_name(seed, name);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.uniform(-bound, bound)))
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    /// Depthwise `kernel×kernel` convolution with "same" padding.
    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            dilation,
            groups: channels,
            ..Self::new(name, channels, channels, kernel)
        }
    }

    pub fn without_bias(self) -> Self {
        Self { bias: false, ..self }
    }

    fn conv_params(&self) -> Conv2dParams {
        Conv2dParams::same(self.kernel, self.dilation, self.groups)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.tape.value(x).dims4("conv")?[1];
        if c != self.in_ch {
            return Err(Error::shape(
                "conv",
                format!("{} input channels", self.name),
                self.in_ch,
                c,
            ));
        }
        let w = g.param(&self.weight_name())?;
        let b = if self.bias {
            Some(g.param(&self.bias_name())?)
        } else {
            None
        };
        g.tape.conv2d(x, w, b, self.conv_params())
    }
}

impl Module for Conv {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        let cin_g = self.in_ch / self.groups;
        let shape = [self.out_ch, cin_g, self.kernel, self.kernel];
        let name = self.weight_name();
        let w = kaiming_uniform(&shape, cin_g * self.kernel * self.kernel, seed, &name)?;
        params.insert(name, w, true)?;
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.out_ch])?, true)?;
        }
        Ok(())
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let out = (self.out_ch * h * w) as u64;
        let macs = (self.kernel * self.kernel * self.in_ch / self.groups) as u64 * out;
        2 * macs + if self.bias { out } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.batchnorm(x, &self.name)
    }
}

impl Module for BatchNorm {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, _seed: u64) -> Result<()> {
        let c = [self.channels];
        params.insert(format!("{}.gamma", self.name), Tensor::ones(&c)?, true)?;
        params.insert(format!("{}.beta", self.name), Tensor::zeros(&c)?, true)?;
        params.insert(format!("{}.running_mean", self.name), Tensor::zeros(&c)?, false)?;
        params.insert(format!("{}.running_var", self.name), Tensor::ones(&c)?, false)?;
        Ok(())
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (self.channels * h * w) as u64
    }
}

/// Convolution (no bias) → batch norm → ReLU, stride 1, spatial size kept.
#[derive(Debug, Clone)]
pub struct Cbr {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Cbr {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), in_ch, out_ch, kernel).without_bias(),
            bn: BatchNorm {
                name: format!("{name}.bn"),
                channels: out_ch,
            },
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y))
    }
}

impl Module for Cbr {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        self.conv.init(params, seed)?;
        self.bn.init(params, seed)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv.flops(h, w) + self.bn.flops(h, w) + (self.conv.out_ch * h * w) as u64
    }
}

/// Efficient channel attention: global average pool, a shared 1-D
/// convolution across channels, sigmoid gate.
#[derive(Debug, Clone)]
pub struct Eca {
    pub name: String,
    pub channels: usize,
    pub kernel: usize,
}

/// Adaptive ECA kernel size: the odd integer nearest to `log2(C)/2 + 1/2`
/// (γ = 2, b = 1), ties rounding up, never below 3.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = (channels.max(1) as f64).log2() / 2.0 + 0.5;
    let k = 2 * (t / 2.0).floor() as usize + 1;
    k.max(3)
}

impl Eca {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            kernel: eca_kernel_size(channels),
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let pooled = g.tape.global_avg_pool(x)?;
        let mixed = g.tape.conv1d_channels(pooled, w)?;
        let gate = g.tape.sigmoid(mixed);
        g.tape.scale_channels(x, gate)
    }
}

impl Module for Eca {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        let name = self.weight_name();
        let w = kaiming_uniform(&[self.kernel], self.kernel, seed, &name)?;
        params.insert(name, w, true)
    }

    fn flops(&self, _h: usize, _w: usize) -> u64 {
        self.channels as u64
    }
}

/// Two stacked 3×3 CBRs.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub cbr1: Cbr,
    pub cbr2: Cbr,
}

impl EncoderBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            cbr1: Cbr::new(&format!("{name}.cbr1"), in_ch, out_ch, 3),
            cbr2: Cbr::new(&format!("{name}.cbr2"), out_ch, out_ch, 3),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.cbr1.forward(g, x)?;
        self.cbr2.forward(g, y)
    }
}

impl Module for EncoderBlock {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        self.cbr1.init(params, seed)?;
        self.cbr2.init(params, seed)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        self.cbr1.flops(h, w) + self.cbr2.flops(h, w)
    }
}

/// Bilinear ×2 upsampling, concatenation with the skip feature, then two
/// 3×3 CBRs.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub in_ch: usize,
    pub skip_ch: usize,
    pub cbr1: Cbr,
    pub cbr2: Cbr,
}

impl DecoderBlock {
    pub fn new(name: &str, in_ch: usize, skip_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            skip_ch,
            cbr1: Cbr::new(&format!("{name}.cbr1"), in_ch + skip_ch, out_ch, 3),
            cbr2: Cbr::new(&format!("{name}.cbr2"), out_ch, out_ch, 3),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let [_, _, h, w] = g.tape.value(skip).dims4("decoder_block")?;
        let up = g.tape.upsample_bilinear(x, h, w)?;
        let cat = g.tape.concat_channels(&[up, skip])?;
        let y = self.cbr1.forward(g, cat)?;
        self.cbr2.forward(g, y)
    }
}

impl Module for DecoderBlock {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        self.cbr1.init(params, seed)?;
        self.cbr2.init(params, seed)
    }

    /// `h, w` are the output (skip) extents.
    fn flops(&self, h: usize, w: usize) -> u64 {
        self.cbr1.flops(h, w) + self.cbr2.flops(h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Cbr3x3,
    Cbr1x1,
    Dw3x3,
    Dw5x5,
    DwDilated(usize),
    Conv1x1,
    Conv3x3,
    Eca,
    EncoderBlock,
    /// Decoder stage; the field is the skip-connection channel count.
    DecoderBlock(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_ch: usize,
    pub out_ch: usize,
}

/// A block built from a [`BlockSpec`].
#[derive(Debug, Clone)]
pub enum Block {
    Conv(Conv),
    Cbr(Cbr),
    Eca(Eca),
    Encoder(EncoderBlock),
    Decoder(DecoderBlock),
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_ch: usize, out_ch: usize) -> Self {
        Self { kind, in_ch, out_ch }
    }

    pub fn build(&self, name: &str) -> Result<Block> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::invalid("block", "channel counts must be positive"));
        }
        let depthwise = matches!(
            self.kind,
            BlockKind::Dw3x3 | BlockKind::Dw5x5 | BlockKind::DwDilated(_) | BlockKind::Eca
        );
        if depthwise && self.in_ch != self.out_ch {
            return Err(Error::shape(
                "block",
                format!("{:?} output channels", self.kind),
                self.in_ch,
                self.out_ch,
            ));
        }
        let (i, o) = (self.in_ch, self.out_ch);
        Ok(match self.kind {
            BlockKind::Cbr3x3 => Block::Cbr(Cbr::new(name, i, o, 3)),
            BlockKind::Cbr1x1 => Block::Cbr(Cbr::new(name, i, o, 1)),
            BlockKind::Dw3x3 => Block::Conv(Conv::depthwise(name, i, 3, 1)),
            BlockKind::Dw5x5 => Block::Conv(Conv::depthwise(name, i, 5, 1)),
            BlockKind::DwDilated(0) => return Err(Error::invalid("block", "dilation must be positive")),
            BlockKind::DwDilated(d) => Block::Conv(Conv::depthwise(name, i, 3, d)),
            BlockKind::Conv1x1 => Block::Conv(Conv::new(name, i, o, 1)),
            BlockKind::Conv3x3 => Block::Conv(Conv::new(name, i, o, 3)),
            BlockKind::Eca => Block::Eca(Eca::new(name, i)),
            BlockKind::EncoderBlock => Block::Encoder(EncoderBlock::new(name, i, o)),
            BlockKind::DecoderBlock(skip) => Block::Decoder(DecoderBlock::new(name, i, skip, o)),
        })
    }
}

impl Block {
    /// Runs the block. Decoder blocks take the skip feature as `inputs[1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var> {
        let x = *inputs.first().ok_or_else(|| Error::invalid("block", "missing input"))?;
        match self {
            Block::Conv(b) => b.forward(g, x),
            Block::Cbr(b) => b.forward(g, x),
            Block::Eca(b) => b.forward(g, x),
            Block::Encoder(b) => b.forward(g, x),
            Block::Decoder(b) => {
                let skip = *inputs
                    .get(1)
                    .ok_or_else(|| Error::invalid("decoder_block", "missing skip input"))?;
                b.forward(g, x, skip)
            }
        }
    }
}

impl Module for Block {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        match self {
            Block::Conv(b) => b.init(params, seed),
            Block::Cbr(b) => b.init(params, seed),
            Block::Eca(b) => b.init(params, seed),
            Block::Encoder(b) => b.init(params, seed),
            Block::Decoder(b) => b.init(params, seed),
        }
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        match self {
            Block::Conv(b) => b.flops(h, w),
            Block::Cbr(b) => b.flops(h, w),
            Block::Eca(b) => b.flops(h, w),
            Block::Encoder(b) => b.flops(h, w),
            Block::Decoder(b) => b.flops(h, w),
        }
    }
}

/// Fresh parameters for a single block named after its kind.
pub fn init_params<T: Scalar>(spec: &BlockSpec, seed: u64) -> Result<ModuleParams<T>> {
    let block = spec.build("block")?;
    let mut params = ModuleParams::new();
    block.init(&mut params, seed)?;
    Ok(params)
}
