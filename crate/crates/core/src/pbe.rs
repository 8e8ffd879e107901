//! The boundary-guided segmentation network.
//!
//! A plain double-CBR U-Net encoder feeds four decoder stages. Each stage can
//! carry three optional modules: a boundary detection head (BD), a
//! boundary-guided feature enhancement (BGFE) that turns the predicted
//! boundary into a wide spatial attention map, and a scale-aware aggregation
//! module (SAAM) built from chained dilated depthwise convolutions.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Cbr, Conv, DecoderBlock, Eca, EncoderBlock, Graph, Module, ModuleParams};
use crate::tensor::Scalar;

pub const STAGES: usize = 4;

/// How the predicted boundary is merged into the decoder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Boundary-guided attention with residual path.
    Bgfe,
    /// `F + Conv1×1(B)`.
    Add,
    /// `F ⊙ B`, with B repeated over channels.
    Multiply,
    /// `CBR3×3([F; B])`.
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Bgfe,
        FusionMode::Add,
        FusionMode::Multiply,
        FusionMode::Concat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Bgfe => "bgfe",
            FusionMode::Add => "add",
            FusionMode::Multiply => "multiply",
            FusionMode::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbeConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub fusion_mode: FusionMode,
    pub enable_bd: bool,
    pub enable_bgfe: bool,
    pub enable_saam: bool,
    pub saam_dilations: [usize; 4],
    pub saam_reduction: f64,
}

impl Default for PbeConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            stages: STAGES,
            fusion_mode: FusionMode::Bgfe,
            enable_bd: true,
            enable_bgfe: true,
            enable_saam: true,
            saam_dilations: [1, 2, 3, 4],
            saam_reduction: 0.5,
        }
    }
}

impl PbeConfig {
    /// Plain U-Net: every boundary and aggregation module switched off.
    pub fn baseline(base_channels: usize) -> Self {
        Self {
            base_channels,
            enable_bd: false,
            enable_bgfe: false,
            enable_saam: false,
            ..Self::default()
        }
    }

    pub fn with_modules(mut self, bd: bool, bgfe: bool, saam: bool) -> Self {
        self.enable_bd = bd;
        self.enable_bgfe = bgfe;
        self.enable_saam = saam;
        self
    }

    /// Encoder widths, shallow to deep, followed by the bottleneck width.
    pub fn encoder_channels(&self) -> [usize; 5] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b, 16 * b]
    }

    /// Reduced SAAM width for a stage of `channels` channels.
    pub fn saam_width(&self, channels: usize) -> Result<usize> {
        let reduced = channels as f64 * self.saam_reduction;
        if reduced.fract() != 0.0 || reduced < 4.0 || !(reduced as usize).is_multiple_of(4) {
            return Err(Error::Config(format!(
                "SAAM needs {channels}·{} to be a positive multiple of 4",
                self.saam_reduction
            )));
        }
        Ok(reduced as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages != STAGES {
            return Err(Error::Config(format!("stages must be {STAGES}, got {}", self.stages)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.enable_bgfe && !self.enable_bd {
            return Err(Error::Config("enable_bgfe requires enable_bd".into()));
        }
        if self.saam_dilations.contains(&0) {
            return Err(Error::Config("SAAM dilations must be positive".into()));
        }
        if !(self.saam_reduction > 0.0 && self.saam_reduction <= 1.0) {
            return Err(Error::Config("saam_reduction must lie in (0, 1]".into()));
        }
        if self.enable_saam {
            for c in &self.encoder_channels()[..4] {
                self.saam_width(*c)?;
            }
        }
        Ok(())
    }
}

/// `sigmoid(Conv1×1(CBR3×3(F)))`, a one-channel boundary probability map.
#[derive(Debug, Clone)]
pub struct BoundaryDetection {
    pub cbr: Cbr,
    pub out: Conv,
}

impl BoundaryDetection {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            cbr: Cbr::new(&format!("{name}.cbr"), channels, channels, 3),
            out: Conv::new(format!("{name}.out"), channels, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.cbr.forward(g, x)?;
        let y = self.out.forward(g, y)?;
        Ok(g.tape.sigmoid(y))
    }
}

impl Module for BoundaryDetection {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        self.cbr.init(params, seed)?;
        self.out.init(params, seed)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        self.cbr.flops(h, w) + self.out.flops(h, w) + (h * w) as u64
    }
}

/// Boundary-guided feature enhancement and the simpler fusion baselines.
#[derive(Debug, Clone)]
pub enum Fusion {
    Bgfe {
        /// `CBR3×3([F; B])`, C+1 → C.
        fuse: Cbr,
        /// Boundary expansion: CBR3×3 (1 → C), DW3×3, CBR1×1.
        expand: Cbr,
        dw3: Conv,
        proj: Cbr,
        /// Attention head: DW5×5 then Conv1×1, no activation.
        dw5: Conv,
        att: Conv,
        /// `CBR3×3(F)` residual path.
        residual: Cbr,
    },
    Add {
        proj: Conv,
    },
    Multiply,
    Concat {
        fuse: Cbr,
    },
}

/// Intermediate values of a fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionTrace {
    pub output: Var,
    /// The spatial attention map (BGFE mode only).
    pub attention: Option<Var>,
    pub fused: Option<Var>,
}

impl Fusion {
    pub fn new(name: &str, mode: FusionMode, channels: usize) -> Self {
        let c = channels;
        match mode {
            FusionMode::Bgfe => Fusion::Bgfe {
                fuse: Cbr::new(&format!("{name}.fuse"), c + 1, c, 3),
                expand: Cbr::new(&format!("{name}.expand"), 1, c, 3),
                dw3: Conv::depthwise(format!("{name}.dw3"), c, 3, 1),
                proj: Cbr::new(&format!("{name}.proj"), c, c, 1),
                dw5: Conv::depthwise(format!("{name}.dw5"), c, 5, 1),
                att: Conv::new(format!("{name}.att"), c, c, 1),
                residual: Cbr::new(&format!("{name}.residual"), c, c, 3),
            },
            FusionMode::Add => Fusion::Add {
                proj: Conv::new(format!("{name}.bproj"), 1, c, 1),
            },
            FusionMode::Multiply => Fusion::Multiply,
            FusionMode::Concat => Fusion::Concat {
                fuse: Cbr::new(&format!("{name}.fuse"), c + 1, c, 3),
            },
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_in: Var, boundary: Var) -> Result<Var> {
        Ok(self.forward_traced(g, f_in, boundary)?.output)
    }

    pub fn forward_traced<T: Scalar>(&self, g: &mut Graph<'_, T>, f_in: Var, boundary: Var) -> Result<FusionTrace> {
        let [n, c, h, w] = g.tape.value(f_in).dims4("bgfe")?;
        let [bn, bc, bh, bw] = g.tape.value(boundary).dims4("bgfe")?;
        if (bn, bc, bh, bw) != (n, 1, h, w) {
            return Err(Error::shape(
                "bgfe",
                "boundary map",
                format!("({n},1,{h},{w})"),
                format!("({bn},{bc},{bh},{bw})"),
            ));
        }
        let plain = |output| FusionTrace {
            output,
            attention: None,
            fused: None,
        };
        match self {
            Fusion::Bgfe {
                fuse,
                expand,
                dw3,
                proj,
                dw5,
                att,
                residual,
            } => {
                let cat = g.tape.concat_channels(&[f_in, boundary])?;
                let fused = fuse.forward(g, cat)?;
                let e = expand.forward(g, boundary)?;
                let e = dw3.forward(g, e)?;
                let e = proj.forward(g, e)?;
                let a = dw5.forward(g, e)?;
                let attention = att.forward(g, a)?;
                let gated = g.tape.mul(attention, fused)?;
                let res = residual.forward(g, f_in)?;
                Ok(FusionTrace {
                    output: g.tape.add(gated, res)?,
                    attention: Some(attention),
                    fused: Some(fused),
                })
            }
            Fusion::Add { proj } => {
                let b = proj.forward(g, boundary)?;
                Ok(plain(g.tape.add(f_in, b)?))
            }
            Fusion::Multiply => {
                let b = g.tape.expand_channels(boundary, c)?;
                Ok(plain(g.tape.mul(f_in, b)?))
            }
            Fusion::Concat { fuse } => {
                let cat = g.tape.concat_channels(&[f_in, boundary])?;
                Ok(plain(fuse.forward(g, cat)?))
            }
        }
    }
}

impl Module for Fusion {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        match self {
            Fusion::Bgfe {
                fuse,
                expand,
                dw3,
                proj,
                dw5,
                att,
                residual,
            } => {
                fuse.init(params, seed)?;
                expand.init(params, seed)?;
                dw3.init(params, seed)?;
                proj.init(params, seed)?;
                dw5.init(params, seed)?;
                att.init(params, seed)?;
                residual.init(params, seed)
            }
            Fusion::Add { proj } => proj.init(params, seed),
            Fusion::Multiply => Ok(()),
            Fusion::Concat { fuse } => fuse.init(params, seed),
        }
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        match self {
            Fusion::Bgfe {
                fuse,
                expand,
                dw3,
                proj,
                dw5,
                att,
                residual,
            } => [
                fuse.flops(h, w),
                expand.flops(h, w),
                dw3.flops(h, w),
                proj.flops(h, w),
                dw5.flops(h, w),
                att.flops(h, w),
                residual.flops(h, w),
            ]
            .iter()
            .sum(),
            Fusion::Add { proj } => proj.flops(h, w),
            Fusion::Multiply => 0,
            Fusion::Concat { fuse } => fuse.flops(h, w),
        }
    }
}

/// Scale-aware aggregation: channel reduction, four chained dilated
/// depthwise branches, aggregation convolutions, ECA and a residual.
#[derive(Debug, Clone)]
pub struct Saam {
    pub reduce: Cbr,
    pub branches: Vec<Conv>,
    pub merge: Conv,
    pub refine: Conv,
    pub eca: Eca,
    group: usize,
}

#[derive(Debug, Clone)]
pub struct SaamTrace {
    pub output: Var,
    /// Branch outputs in chain order (dilations ascending).
    pub branches: Vec<Var>,
}

impl Saam {
    pub fn new(name: &str, channels: usize, reduced: usize, dilations: [usize; 4]) -> Self {
        let group = reduced / 4;
        Self {
            reduce: Cbr::new(&format!("{name}.reduce"), channels, reduced, 1),
            branches: dilations
                .iter()
                .enumerate()
                .map(|(k, &d)| Conv::depthwise(format!("{name}.branch{}", k + 1), group, 3, d))
                .collect(),
            merge: Conv::new(format!("{name}.merge"), reduced, channels, 1),
            refine: Conv::new(format!("{name}.refine"), channels, channels, 3),
            eca: Eca::new(format!("{name}.eca"), channels),
            group,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.output)
    }

    pub fn forward_traced<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<SaamTrace> {
        let reduced = self.reduce.forward(g, x)?;
        let parts = g.tape.split_channels(reduced, &[self.group; 4])?;
        let mut branches: Vec<Var> = Vec::with_capacity(4);
        for (k, (conv, &part)) in self.branches.iter().zip(&parts).enumerate() {
            let input = match k {
                0 => part,
                _ => g.tape.add(branches[k - 1], part)?,
            };
            branches.push(conv.forward(g, input)?);
        }
        let cat = g.tape.concat_channels(&branches)?;
        let y = self.merge.forward(g, cat)?;
        let y = self.refine.forward(g, y)?;
        let y = self.eca.forward(g, y)?;
        Ok(SaamTrace {
            output: g.tape.add(y, x)?,
            branches,
        })
    }
}

impl Module for Saam {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        self.reduce.init(params, seed)?;
        for b in &self.branches {
            b.init(params, seed)?;
        }
        self.merge.init(params, seed)?;
        self.refine.init(params, seed)?;
        self.eca.init(params, seed)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        self.reduce.flops(h, w)
            + self.branches.iter().map(|b| b.flops(h, w)).sum::<u64>()
            + self.merge.flops(h, w)
            + self.refine.flops(h, w)
            + self.eca.flops(h, w)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub block: DecoderBlock,
    pub bd: Option<BoundaryDetection>,
    pub fusion: Option<Fusion>,
    pub saam: Option<Saam>,
}

/// Network outputs as tape handles.
#[derive(Debug, Clone)]
pub struct PbeOutput {
    pub mask_logits: Var,
    pub mask_prob: Var,
    /// Stage boundary maps, deepest first; empty when BD is disabled.
    pub boundary_probs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct PbeNet {
    pub config: PbeConfig,
    pub encoders: Vec<EncoderBlock>,
    pub bottleneck: EncoderBlock,
    /// Decoder stages, deepest first.
    pub stages: Vec<DecoderStage>,
    pub head: Conv,
}

impl PbeNet {
    pub fn new(config: PbeConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.encoder_channels();
        let mut encoders = Vec::with_capacity(STAGES);
        let mut prev = config.in_channels;
        for (i, &c) in ch[..STAGES].iter().enumerate() {
            encoders.push(EncoderBlock::new(&format!("enc{}", i + 1), prev, c));
            prev = c;
        }
        let bottleneck = EncoderBlock::new("bottleneck", prev, ch[STAGES]);
        let mut stages = Vec::with_capacity(STAGES);
        let mut below = ch[STAGES];
        for i in 0..STAGES {
            let c = ch[STAGES - 1 - i];
            let name = format!("dec{}", i + 1);
            let saam = if config.enable_saam {
                let reduced = config.saam_width(c)?;
                Some(Saam::new(&format!("{name}.saam"), c, reduced, config.saam_dilations))
            } else {
                None
            };
            stages.push(DecoderStage {
                block: DecoderBlock::new(&format!("{name}.block"), below, c, c),
                bd: config
                    .enable_bd
                    .then(|| BoundaryDetection::new(&format!("{name}.bd"), c)),
                fusion: config
                    .enable_bgfe
                    .then(|| Fusion::new(&format!("{name}.bgfe"), config.fusion_mode, c)),
                saam,
            });
            below = c;
        }
        Ok(Self {
            head: Conv::new("head", ch[0], 1, 1),
            config,
            encoders,
            bottleneck,
            stages,
        })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ModuleParams<T>> {
        let mut params = ModuleParams::new();
        self.init(&mut params, seed)?;
        Ok(params)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            &[n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape("pbe_forward", "input rank", 4, shape.len())),
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "pbe_forward",
                "input channels",
                self.config.in_channels,
                c,
            ));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(
                "pbe_forward",
                "spatial extents",
                "multiples of 16",
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<PbeOutput> {
        self.check_input(g.tape.value(image).shape())?;
        let mut skips = Vec::with_capacity(STAGES);
        let mut x = image;
        for enc in &self.encoders {
            let f = enc.forward(g, x)?;
            skips.push(f);
            x = g.tape.maxpool2x2(f)?;
        }
        let mut d = self.bottleneck.forward(g, x)?;
        let mut boundary_probs = Vec::new();
        for (stage, &skip) in self.stages.iter().zip(skips.iter().rev()) {
            let f = stage.block.forward(g, d, skip)?;
            let b = match &stage.bd {
                Some(bd) => {
                    let b = bd.forward(g, f)?;
                    boundary_probs.push(b);
                    Some(b)
                }
                None => None,
            };
            let e = match (&stage.fusion, b) {
                (Some(fusion), Some(b)) => fusion.forward(g, f, b)?,
                _ => f,
            };
            d = match &stage.saam {
                Some(saam) => saam.forward(g, e)?,
                None => e,
            };
        }
        let mask_logits = self.head.forward(g, d)?;
        let mask_prob = g.tape.sigmoid(mask_logits);
        Ok(PbeOutput {
            mask_logits,
            mask_prob,
            boundary_probs,
        })
    }
}

impl Module for PbeNet {
    fn init<T: Scalar>(&self, params: &mut ModuleParams<T>, seed: u64) -> Result<()> {
        for enc in &self.encoders {
            enc.init(params, seed)?;
        }
        self.bottleneck.init(params, seed)?;
        for stage in &self.stages {
            stage.block.init(params, seed)?;
            if let Some(bd) = &stage.bd {
                bd.init(params, seed)?;
            }
            if let Some(f) = &stage.fusion {
                f.init(params, seed)?;
            }
            if let Some(s) = &stage.saam {
                s.init(params, seed)?;
            }
        }
        self.head.init(params, seed)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let mut total = 0;
        let (mut sh, mut sw) = (h, w);
        let mut sizes = Vec::with_capacity(STAGES);
        for enc in &self.encoders {
            total += enc.flops(sh, sw);
            sizes.push((sh, sw));
            sh /= 2;
            sw /= 2;
        }
        total += self.bottleneck.flops(sh, sw);
        for (stage, &(sh, sw)) in self.stages.iter().zip(sizes.iter().rev()) {
            total += stage.block.flops(sh, sw);
            total += stage.bd.as_ref().map_or(0, |m| m.flops(sh, sw));
            total += stage.fusion.as_ref().map_or(0, |m| m.flops(sh, sw));
            total += stage.saam.as_ref().map_or(0, |m| m.flops(sh, sw));
        }
        total + self.head.flops(h, w) + (h * w) as u64
    }
}

/// Learnable parameter count and forward FLOPs for one `h×w` image.
///
/// FLOPs count every convolution as `2·kh·kw·(Cin/groups)·Cout·H'·W'` plus
/// `Cout·H'·W'` bias additions, batch norm as 2 per element and each ReLU
/// or sigmoid as 1 per element. Pooling, resizing, concatenation and
/// elementwise sums are not counted.
pub fn count_params_flops(config: &PbeConfig, h: usize, w: usize) -> Result<(usize, u64)> {
    let net = PbeNet::new(config.clone())?;
    net.check_input(&[1, config.in_channels, h, w])?;
    let params: ModuleParams<f32> = net.init_params(0)?;
    Ok((params.count_learnable(), net.flops(h, w)))
}
