//! The fusion network: lidar and camera backbones, fusion modules, the
//! pyramid fusion backbone (PFB) and the pyramid fusion head (PFH).
//!
//! Parameter names are scoped by component (`lidar.`, `camera.`, `pfb.`,
//! `fusion_head.`, `late_camera.`, `late_lidar.`, `classifier.`), which is what
//! freezing and partial checkpoint loading key on.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    Conv, ConvNorm, Ctx, Irb, PyramidConfig, ResidualBlock, ResidualVariant, SemanticHead, SepConv, TwoWayPyramid,
};
use crate::camproj::{build_mapping, gather_camera_features, scale_mapping, CamRVMapping, CameraModel};
use crate::error::{Error, Result};
use crate::numcore::eval::softmax_channels;
use crate::numcore::{Activation, Builder, ConvSpec, DType, Graph, ParamId, ParamStore, Real, Shape, Tensor, Var};
use crate::rangeview::{
    build_range_image, crop_var, spherical_project, CameraImage, Overlap, PointCloud, ProjectionIndex, RangeImage,
    Sample, SensorConfig,
};

/// Structural counter bumped once per fusion module in a forward pass.
pub const FUSION_COUNTER: &str = "fusion_module";

/// Strides of the three lidar encoder taps relative to the range image.
pub const LIDAR_TAP_STRIDES: [(usize, usize); 3] = [(2, 8), (4, 16), (8, 32)];
/// Stride of the lidar decoder features.
pub const LIDAR_DECODER_STRIDE: (usize, usize) = (2, 8);

const LIDAR_STAGE_STRIDES: [(usize, usize); 6] = [(1, 2), (1, 2), (2, 2), (2, 2), (2, 2), (1, 1)];
const CAMERA_STAGE_STRIDES: [(usize, usize); 6] = [(2, 2), (2, 2), (2, 2), (2, 2), (2, 2), (1, 1)];
const LEAKY: Activation = Activation::LeakyRelu(crate::blocks::LEAKY_SLOPE);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionStrategy {
    /// Bottleneck residual block followed by a basic residual block.
    #[default]
    #[serde(rename = "brb-bb")]
    BottleneckBasic,
    #[serde(rename = "1irb")]
    SingleIrb,
    #[serde(rename = "2irb")]
    DoubleIrb,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LateOrder {
    #[default]
    CameraFirst,
    LidarFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Pyramid fusion backbone: three fusion modules plus the two-way pyramid.
    pub pfb: bool,
    /// Late fusion with the camera decoder features.
    pub late_fusion: bool,
    /// Pyramid fusion head: adds the lidar-decoder late fusion on top of PFB
    /// and late fusion.
    pub pfh: bool,
    pub late_order: LateOrder,
    /// Range-view strides of the three fused maps, fine → coarse.
    pub targets: [(usize, usize); 3],
    pub pyramid: PyramidConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: FusionStrategy::default(),
            pfb: true,
            late_fusion: true,
            pfh: true,
            late_order: LateOrder::default(),
            targets: [(1, 4), (2, 8), (4, 16)],
            pyramid: PyramidConfig::default(),
        }
    }
}

/// Ablation presets: lidar only, late fusion, pyramid backbone, full network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Baseline,
    Lf,
    Pfb,
    PfbPfh,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::Lf, Preset::Pfb, Preset::PfbPfh];

    pub fn apply(self, f: &mut FusionConfig) {
        let (pfb, late, pfh) = match self {
            Preset::Baseline => (false, false, false),
            Preset::Lf => (false, true, false),
            Preset::Pfb => (true, false, false),
            Preset::PfbPfh => (true, true, true),
        };
        f.pfb = pfb;
        f.late_fusion = late;
        f.pfh = pfh;
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Lf => "lf",
            Preset::Pfb => "pfb",
            Preset::PfbPfh => "pfb-pfh",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (baseline, lf, pfb, pfb-pfh)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyFuConfig {
    pub sensor: SensorConfig,
    pub camera_height: usize,
    pub camera_width: usize,
    pub classes: usize,
    /// Width of pyramid, head and fusion features.
    pub channels: usize,
    /// Output widths of the six lidar encoder stages (stage 1 is the stem).
    pub lidar_widths: [usize; 6],
    pub camera_widths: [usize; 6],
    /// Inverted residual blocks per encoder stage after the stem.
    pub stage_depth: usize,
    pub expansion: usize,
    pub bottleneck_ratio: usize,
    /// Per-channel standardisation of (range, x, y, z, remission).
    pub input_mean: [f64; 5],
    pub input_std: [f64; 5],
    pub fusion: FusionConfig,
    pub freeze_lidar: bool,
    pub freeze_camera: bool,
}

impl Default for PyFuConfig {
    fn default() -> Self {
        PyFuConfig {
            sensor: SensorConfig::default(),
            camera_height: 384,
            camera_width: 1248,
            classes: 19,
            channels: 128,
            lidar_widths: [32, 16, 24, 40, 80, 112],
            camera_widths: [32, 24, 40, 80, 112, 192],
            stage_depth: 2,
            expansion: Irb::EXPANSION,
            bottleneck_ratio: ResidualBlock::BOTTLENECK_RATIO,
            input_mean: [12.12, 10.88, 0.23, -1.04, 0.21],
            input_std: [12.32, 11.47, 6.91, 0.86, 0.16],
            fusion: FusionConfig::default(),
            freeze_lidar: true,
            freeze_camera: true,
        }
    }
}

impl PyFuConfig {
    /// Laptop-scale configuration: 32×256 range view, 96×192 camera, 6 classes.
    pub fn desk() -> Self {
        PyFuConfig {
            sensor: SensorConfig {
                height: 32,
                width: 256,
                fov_up: 3.0,
                fov_down: -25.0,
            },
            camera_height: 96,
            camera_width: 192,
            classes: 6,
            channels: 32,
            lidar_widths: [8, 12, 16, 24, 24, 32],
            camera_widths: [8, 12, 16, 24, 24, 32],
            stage_depth: 1,
            input_mean: [10.0, 5.0, 0.0, -1.0, 0.5],
            input_std: [8.0, 8.0, 8.0, 1.0, 0.3],
            ..PyFuConfig::default()
        }
    }

    /// Smallest configuration the architecture admits; for gradient checks.
    pub fn micro() -> Self {
        PyFuConfig {
            sensor: SensorConfig {
                height: 8,
                width: 32,
                fov_up: 3.0,
                fov_down: -25.0,
            },
            camera_height: 32,
            camera_width: 64,
            classes: 3,
            channels: 8,
            lidar_widths: [4, 4, 8, 8, 8, 8],
            camera_widths: [4, 4, 8, 8, 8, 8],
            stage_depth: 1,
            expansion: 2,
            ..PyFuConfig::desk()
        }
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        preset.apply(&mut self.fusion);
        self
    }

    pub fn fusion_module_count(&self) -> usize {
        let f = &self.fusion;
        3 * f.pfb as usize + f.late_fusion as usize + f.pfh as usize
    }

    /// Which output the network is trained and evaluated on.
    pub fn primary_head(&self) -> Head {
        if self.fusion_module_count() == 0 {
            Head::Lidar
        } else {
            Head::Fused
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.sensor.height % 8 != 0 || self.sensor.width % 32 != 0 {
            return bad(format!(
                "range view {}x{} must have height divisible by 8 and width by 32",
                self.sensor.height, self.sensor.width
            ));
        }
        if self.camera_height % 32 != 0 || self.camera_width % 32 != 0 || self.camera_height == 0 {
            return bad(format!(
                "camera image {}x{} must have both sides divisible by 32",
                self.camera_height, self.camera_width
            ));
        }
        if self.classes == 0 || self.classes > 255 {
            return bad(format!("classes must be in 1..=255, got {}", self.classes));
        }
        if self.channels == 0
            || self.stage_depth == 0
            || self.expansion == 0
            || self.bottleneck_ratio == 0
            || self.lidar_widths.contains(&0)
            || self.camera_widths.contains(&0)
        {
            return bad("channel widths, depths and ratios must be ≥ 1".into());
        }
        if self.input_std.iter().any(|s| !(*s > 0.0)) {
            return bad("input_std entries must be positive".into());
        }
        let f = &self.fusion;
        if f.pfh && !f.pfb {
            return bad("pfh aggregates the pyramid fusion backbone; enable pfb".into());
        }
        if f.pfh && !f.late_fusion {
            return bad("pfh includes late fusion; enable late_fusion".into());
        }
        for (i, t) in f.targets.iter().enumerate() {
            if t.0 == 0 || t.1 == 0 {
                return bad(format!("fusion target {i} has a zero stride"));
            }
        }
        for w in f.targets.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.0 < a.0 || b.1 < a.1 || b.0 * b.1 <= a.0 * a.1 {
                return bad(format!("fusion targets must coarsen strictly: {a:?} then {b:?}"));
            }
        }
        f.pyramid.validate()
    }
}

/// Which classifier a forward pass ends in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Lidar backbone logits over the full range image.
    Lidar,
    /// Camera backbone logits over the image.
    Camera,
    /// Fused logits over the full-resolution overlap crop.
    Fused,
}

/// Strided encoder of one stem conv and five inverted-residual stages.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvNorm,
    pub stages: Vec<Vec<Irb>>,
}

impl Encoder {
    fn new<T: Real>(
        b: &mut Builder<'_, T, ChaCha8Rng>,
        cin: usize,
        widths: &[usize; 6],
        strides: &[(usize, usize); 6],
        cfg: &PyFuConfig,
    ) -> Result<Self> {
        let s = strides[0];
        let stem = ConvNorm::new(
            &mut b.sub("stem"),
            cin,
            widths[0],
            (3, 3),
            ConvSpec::default().stride(s.0, s.1).padding(1, 1),
            LEAKY,
        )?;
        let mut stages = Vec::new();
        for i in 1..6 {
            let mut stage = Vec::new();
            for j in 0..cfg.stage_depth {
                let (ci, stride) = if j == 0 {
                    (widths[i - 1], strides[i])
                } else {
                    (widths[i], (1, 1))
                };
                stage.push(Irb::with_expansion(
                    &mut b.sub(&format!("stage{}.{j}", i + 1)),
                    ci,
                    widths[i],
                    stride,
                    cfg.expansion,
                )?);
            }
            stages.push(stage);
        }
        Ok(Encoder { stem, stages })
    }

    /// Outputs of stages 2, 3, 4 and 6.
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<[Var; 4]> {
        let mut y = self.stem.forward(ctx, x)?;
        let mut outs = Vec::with_capacity(5);
        for stage in &self.stages {
            for irb in stage {
                y = irb.forward(ctx, y)?;
            }
            outs.push(y);
        }
        Ok([outs[0], outs[1], outs[2], outs[4]])
    }
}

/// Refinement of the camera head output at stride 4.
#[derive(Clone, Debug)]
pub struct DecoderRefine {
    pub lateral: ConvNorm,
    pub refine: SepConv,
}

/// Encoder, two-way pyramid on three taps, semantic head and classifier.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub encoder: Encoder,
    pub fpn: TwoWayPyramid,
    pub head: SemanticHead,
    pub decoder: Option<DecoderRefine>,
    pub classifier: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneOutputs {
    /// Encoder taps, fine → coarse.
    pub taps: [Var; 3],
    pub decoder: Option<Var>,
    pub logits: Option<Var>,
}

impl Backbone {
    fn new<T: Real>(
        b: &mut Builder<'_, T, ChaCha8Rng>,
        cin: usize,
        widths: &[usize; 6],
        strides: &[(usize, usize); 6],
        refine: bool,
        cfg: &PyFuConfig,
    ) -> Result<Self> {
        let f = cfg.channels;
        let encoder = Encoder::new(&mut b.sub("encoder"), cin, widths, strides, cfg)?;
        let fpn = TwoWayPyramid::new(
            &mut b.sub("fpn"),
            Some([widths[2], widths[3], widths[5]]),
            f,
            PyramidConfig::default(),
        )?;
        let head = SemanticHead::new(&mut b.sub("head"), f)?;
        let decoder = if refine {
            Some(DecoderRefine {
                lateral: ConvNorm::pointwise(&mut b.sub("decoder.lateral"), widths[1], f, LEAKY)?,
                refine: SepConv::new(&mut b.sub("decoder.refine"), f, f, (1, 1), (1, 1))?,
            })
        } else {
            None
        };
        let classifier = Conv::new(&mut b.sub("classifier"), f, cfg.classes, (1, 1), ConvSpec::default(), true)?;
        Ok(Backbone {
            encoder,
            fpn,
            head,
            decoder,
            classifier,
        })
    }

    fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        want_decoder: bool,
        want_logits: bool,
    ) -> Result<BackboneOutputs> {
        let input = ctx.g.shape(x);
        let [low, t1, t2, t3] = self.encoder.forward(ctx, x)?;
        let taps = [t1, t2, t3];
        if !want_decoder && !want_logits {
            return Ok(BackboneOutputs {
                taps,
                decoder: None,
                logits: None,
            });
        }
        let p = self.fpn.forward(ctx, taps)?;
        let mut dec = self.head.forward(ctx, p)?;
        if let Some(d) = &self.decoder {
            let s = ctx.g.shape(low);
            let up = ctx.g.resize(dec, s.h, s.w, false)?;
            let lat = d.lateral.forward(ctx, low)?;
            let sum = ctx.g.add(up, lat)?;
            dec = d.refine.forward(ctx, sum)?;
        }
        let logits = if want_logits {
            let l = self.classifier.forward(ctx, dec)?;
            Some(ctx.g.resize(l, input.h, input.w, false)?)
        } else {
            None
        };
        Ok(BackboneOutputs {
            taps,
            decoder: Some(dec),
            logits,
        })
    }

    fn batch_stats<T: Real>(&self, ctx: &Ctx<'_, T>) -> bool {
        ctx.batch_stats && !ctx.store.param(self.encoder.stem.conv.weight).frozen
    }
}

/// Range-view features entering a fusion module.
#[derive(Clone, Copy, Debug)]
pub struct RvFeature {
    pub var: Var,
    /// Stride relative to the full-resolution range image.
    pub stride: (usize, usize),
    /// Already restricted to the overlap at `stride`.
    pub cropped: bool,
}

/// Second input of a fusion module.
#[derive(Clone, Copy, Debug)]
pub enum CameraSide {
    /// Camera-space features, transformed through the mapping.
    Image(Var),
    /// Features already in range-view space.
    RangeView(RvFeature),
}

#[derive(Clone, Debug)]
pub enum FusionBlock {
    Residual(ResidualBlock),
    Inverted(Irb),
}

impl FusionBlock {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            FusionBlock::Residual(r) => r.forward(ctx, x),
            FusionBlock::Inverted(i) => i.forward(ctx, x),
        }
    }
}

/// Crop → transform camera features → align → resize lidar → concat →
/// residual fusion blocks.
#[derive(Clone, Debug)]
pub struct FusionModule {
    /// Alignment IRB for camera-space input (`C + 1 → channels`).
    pub align: Option<Irb>,
    pub blocks: Vec<FusionBlock>,
    pub lidar_channels: usize,
    pub camera_channels: usize,
}

impl FusionModule {
    pub fn new<T: Real, R: rand::Rng>(
        b: &mut Builder<'_, T, R>,
        lidar_channels: usize,
        camera_channels: usize,
        camera_space: bool,
        cfg: &PyFuConfig,
    ) -> Result<Self> {
        let f = cfg.channels;
        let align = if camera_space {
            Some(Irb::with_expansion(
                &mut b.sub("align"),
                camera_channels + 1,
                f,
                (1, 1),
                cfg.expansion,
            )?)
        } else {
            None
        };
        let cat = lidar_channels + if camera_space { f } else { camera_channels };
        let blocks = match cfg.fusion.strategy {
            FusionStrategy::BottleneckBasic => vec![
                FusionBlock::Residual(ResidualBlock::with_ratio(
                    &mut b.sub("brb"),
                    ResidualVariant::Bottleneck,
                    cat,
                    f,
                    cfg.bottleneck_ratio,
                )?),
                FusionBlock::Residual(ResidualBlock::new(&mut b.sub("bb"), ResidualVariant::Basic, f, f)?),
            ],
            FusionStrategy::SingleIrb => vec![FusionBlock::Inverted(Irb::with_expansion(
                &mut b.sub("irb0"),
                cat,
                f,
                (1, 1),
                cfg.expansion,
            )?)],
            FusionStrategy::DoubleIrb => vec![
                FusionBlock::Inverted(Irb::with_expansion(&mut b.sub("irb0"), cat, f, (1, 1), cfg.expansion)?),
                FusionBlock::Inverted(Irb::with_expansion(&mut b.sub("irb1"), f, f, (1, 1), cfg.expansion)?),
            ],
        };
        Ok(FusionModule {
            align,
            blocks,
            lidar_channels,
            camera_channels,
        })
    }

    fn to_target<T: Real>(
        ctx: &mut Ctx<'_, T>,
        x: RvFeature,
        overlap: &Overlap,
        size: (usize, usize),
    ) -> Result<Var> {
        let mut v = x.var;
        if !x.cropped {
            v = crop_var(ctx.g, v, overlap, x.stride)?;
        }
        let s = ctx.g.shape(v);
        if (s.h, s.w) != size {
            v = ctx.g.resize(v, size.0, size.1, false)?;
        }
        Ok(v)
    }

    /// Fused features `(1, channels, h, w)` on the overlap at stride `target`.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        lidar: RvFeature,
        camera: CameraSide,
        map: &CamRVMapping,
        target: (usize, usize),
    ) -> Result<Var> {
        ctx.g.count(FUSION_COUNTER);
        let overlap = map.overlap()?;
        let (rows, cols) = overlap.at_stride(target);
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::EmptyCrop {
                rows: (rows.start, rows.end),
                cols: (cols.start, cols.end),
            });
        }
        let size = (rows.len(), cols.len());
        let l = Self::to_target(ctx, lidar, &overlap, size)?;
        let c = match (camera, &self.align) {
            (CameraSide::Image(v), Some(align)) => {
                let s = ctx.g.shape(v);
                let scaled = scale_mapping(map, target, (s.h, s.w))?;
                let gathered = gather_camera_features(ctx.g, v, &scaled)?;
                let cropped = ctx.g.crop(gathered, rows, cols)?;
                align.forward(ctx, cropped)?
            }
            (CameraSide::RangeView(f), None) => Self::to_target(ctx, f, &overlap, size)?,
            _ => {
                return Err(Error::invalid(
                    "fusion module",
                    "camera input kind does not match the module's construction",
                ))
            }
        };
        let mut x = ctx.g.concat(&[l, c])?;
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Three fusion modules feeding a two-way pyramid.
#[derive(Clone, Debug)]
pub struct Pfb {
    pub modules: Vec<FusionModule>,
    pub pyramid: TwoWayPyramid,
}

impl Pfb {
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        lidar_taps: [Var; 3],
        camera_taps: [Var; 3],
        map: &CamRVMapping,
        targets: &[(usize, usize); 3],
    ) -> Result<[Var; 3]> {
        let mut fused = [lidar_taps[0]; 3];
        for i in 0..3 {
            let lidar = RvFeature {
                var: lidar_taps[i],
                stride: LIDAR_TAP_STRIDES[i],
                cropped: false,
            };
            fused[i] = self.modules[i].forward(ctx, lidar, CameraSide::Image(camera_taps[i]), map, targets[i])?;
        }
        self.pyramid.forward(ctx, fused)
    }
}

/// The assembled network. Holds parameter ids only; values live in a
/// [`ParamStore`] built alongside it.
#[derive(Clone, Debug)]
pub struct PyFu {
    pub config: PyFuConfig,
    pub lidar: Backbone,
    pub camera: Backbone,
    pub pfb: Option<Pfb>,
    /// Semantic-head aggregation of the pyramid outputs.
    pub fusion_head: Option<SemanticHead>,
    pub late_camera: Option<FusionModule>,
    pub late_lidar: Option<FusionModule>,
    pub classifier: Option<Conv>,
}

/// Logits produced by one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Outputs {
    pub lidar: Option<Var>,
    pub camera: Option<Var>,
    pub fused: Option<Var>,
}

impl PyFu {
    /// Builds the network and a freshly initialised parameter store.
    pub fn build<T: Real>(config: PyFuConfig, seed: u64) -> Result<(PyFu, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let cfg = &config;
        let f = cfg.channels;
        let lidar = Backbone::new(&mut b.sub("lidar"), 5, &cfg.lidar_widths, &LIDAR_STAGE_STRIDES, false, cfg)?;
        let camera = Backbone::new(&mut b.sub("camera"), 3, &cfg.camera_widths, &CAMERA_STAGE_STRIDES, true, cfg)?;
        let fc = &cfg.fusion;
        let (pfb, fusion_head) = if fc.pfb {
            let lw = [cfg.lidar_widths[2], cfg.lidar_widths[3], cfg.lidar_widths[5]];
            let cw = [cfg.camera_widths[2], cfg.camera_widths[3], cfg.camera_widths[5]];
            let modules = (0..3)
                .map(|i| FusionModule::new(&mut b.sub(&format!("pfb.fusion{i}")), lw[i], cw[i], true, cfg))
                .collect::<Result<Vec<_>>>()?;
            let pyramid = TwoWayPyramid::new(&mut b.sub("pfb.pyramid"), None, f, fc.pyramid)?;
            let head = SemanticHead::new(&mut b.sub("fusion_head"), f)?;
            (Some(Pfb { modules, pyramid }), Some(head))
        } else {
            (None, None)
        };
        let late_camera = if fc.late_fusion {
            Some(FusionModule::new(&mut b.sub("late_camera"), f, f, true, cfg)?)
        } else {
            None
        };
        let late_lidar = if fc.pfh {
            Some(FusionModule::new(&mut b.sub("late_lidar"), f, f, false, cfg)?)
        } else {
            None
        };
        let classifier = if cfg.fusion_module_count() > 0 {
            Some(Conv::new(&mut b.sub("classifier"), f, cfg.classes, (1, 1), ConvSpec::default(), true)?)
        } else {
            None
        };
        let model = PyFu {
            config,
            lidar,
            camera,
            pfb,
            fusion_head,
            late_camera,
            late_lidar,
            classifier,
        };
        Ok((model, store))
    }

    fn lidar_decoder_used(&self) -> bool {
        self.late_lidar.is_some() || (self.late_camera.is_some() && self.pfb.is_none())
    }

    /// Parameter-name prefixes a fused forward pass never reaches.
    pub fn unreachable_prefixes(&self, head: Head) -> Vec<&'static str> {
        match head {
            Head::Lidar => vec!["camera.", "pfb.", "fusion_head.", "late_camera.", "late_lidar.", "classifier."],
            Head::Camera => vec!["lidar.", "pfb.", "fusion_head.", "late_camera.", "late_lidar.", "classifier."],
            Head::Fused => {
                let mut v = vec!["lidar.classifier.", "camera.classifier."];
                if !self.lidar_decoder_used() {
                    v.extend(["lidar.fpn.", "lidar.head."]);
                }
                if self.late_camera.is_none() {
                    v.extend(["camera.fpn.", "camera.head.", "camera.decoder."]);
                }
                v
            }
        }
    }

    /// Sets frozen flags for training `head`: unreachable parameters and, for
    /// the fused head, the backbones selected by the freeze flags.
    pub fn configure_training<T: Real>(&self, store: &mut ParamStore<T>, head: Head) -> Result<()> {
        if head == Head::Fused && self.classifier.is_none() {
            return Err(Error::Config("the baseline preset has no fused head".into()));
        }
        store.set_frozen_prefix("", false);
        for prefix in self.unreachable_prefixes(head) {
            store.set_frozen_prefix(prefix, true);
        }
        if head == Head::Fused {
            if self.config.freeze_lidar {
                store.set_frozen_prefix("lidar.", true);
            }
            if self.config.freeze_camera {
                store.set_frozen_prefix("camera.", true);
            }
        }
        Ok(())
    }

    pub fn range_input<T: Real>(&self, range: &RangeImage) -> Tensor<T> {
        range.to_input(&self.config.input_mean, &self.config.input_std)
    }

    pub fn image_input<T: Real>(&self, image: &CameraImage) -> Tensor<T> {
        let s = image.shape();
        let data = image.data().iter().map(|v| T::of((*v as f64 - 0.5) / 0.25)).collect();
        Tensor::from_vec(s, data).expect("same shape")
    }

    fn check_inputs(&self, sample: &Sample) -> Result<()> {
        let (h, w) = (sample.range.height, sample.range.width);
        if h % 8 != 0 || w % 32 != 0 {
            return Err(Error::invalid(
                "lidar backbone",
                format!("range image {h}x{w} needs height divisible by 8 and width by 32"),
            ));
        }
        let s = sample.image.shape();
        if s.c != 3 || s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 {
            return Err(Error::invalid(
                "camera backbone",
                format!("image {s} needs 3 channels and sides divisible by 32"),
            ));
        }
        if (sample.mapping.rv_height, sample.mapping.rv_width) != (h, w)
            || (sample.mapping.cam_height, sample.mapping.cam_width) != (s.h, s.w)
        {
            return Err(Error::invalid("pyfu", "mapping does not match the range and camera images"));
        }
        Ok(())
    }

    /// Runs the parts of the network `heads` needs.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, sample: &Sample, heads: &[Head]) -> Result<Outputs> {
        self.check_inputs(sample)?;
        let want = |h: Head| heads.contains(&h);
        let fused = want(Head::Fused);
        if fused && self.classifier.is_none() {
            return Err(Error::Config("the baseline preset has no fused head".into()));
        }
        let mut out = Outputs::default();

        let lidar_needed = want(Head::Lidar) || fused;
        let lidar = if lidar_needed {
            let x = ctx.g.input(self.range_input(&sample.range));
            let bs = self.lidar.batch_stats(ctx);
            let o = self.lidar.forward(
                &mut ctx.with_stats(bs),
                x,
                want(Head::Lidar) || (fused && self.lidar_decoder_used()),
                want(Head::Lidar),
            )?;
            out.lidar = o.logits;
            Some(o)
        } else {
            None
        };
        let camera_needed = want(Head::Camera) || fused;
        let camera = if camera_needed {
            let x = ctx.g.input(self.image_input(&sample.image));
            let bs = self.camera.batch_stats(ctx);
            let o = self.camera.forward(
                &mut ctx.with_stats(bs),
                x,
                want(Head::Camera) || (fused && self.late_camera.is_some()),
                want(Head::Camera),
            )?;
            out.camera = o.logits;
            Some(o)
        } else {
            None
        };
        if fused {
            let (l, c) = (lidar.expect("lidar run"), camera.expect("camera run"));
            out.fused = Some(self.fused_forward(ctx, &l, &c, &sample.mapping)?);
        }
        Ok(out)
    }

    fn fused_forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        lidar: &BackboneOutputs,
        camera: &BackboneOutputs,
        map: &CamRVMapping,
    ) -> Result<Var> {
        let overlap = map.overlap()?;
        let targets = self.config.fusion.targets;
        let lidar_decoder = lidar.decoder.map(|var| RvFeature {
            var,
            stride: LIDAR_DECODER_STRIDE,
            cropped: false,
        });
        let mut feat = match (&self.pfb, &self.fusion_head) {
            (Some(pfb), Some(head)) => {
                let o = pfb.forward(ctx, lidar.taps, camera.taps, map, &targets)?;
                RvFeature {
                    var: head.forward(ctx, o)?,
                    stride: targets[0],
                    cropped: true,
                }
            }
            _ => lidar_decoder.expect("lidar decoder computed for late fusion"),
        };
        let fuse_camera = |ctx: &mut Ctx<'_, T>, m: &FusionModule, x: RvFeature| -> Result<RvFeature> {
            let cam = CameraSide::Image(camera.decoder.expect("camera decoder computed"));
            Ok(RvFeature {
                var: m.forward(ctx, x, cam, map, targets[0])?,
                stride: targets[0],
                cropped: true,
            })
        };
        let fuse_lidar = |ctx: &mut Ctx<'_, T>, m: &FusionModule, x: RvFeature| -> Result<RvFeature> {
            let dec = CameraSide::RangeView(lidar_decoder.expect("lidar decoder computed"));
            Ok(RvFeature {
                var: m.forward(ctx, x, dec, map, targets[0])?,
                stride: targets[0],
                cropped: true,
            })
        };
        match (&self.late_camera, &self.late_lidar, self.config.fusion.late_order) {
            (Some(c), Some(l), LateOrder::CameraFirst) => {
                feat = fuse_camera(ctx, c, feat)?;
                feat = fuse_lidar(ctx, l, feat)?;
            }
            (Some(c), Some(l), LateOrder::LidarFirst) => {
                feat = fuse_lidar(ctx, l, feat)?;
                feat = fuse_camera(ctx, c, feat)?;
            }
            (Some(c), None, _) => feat = fuse_camera(ctx, c, feat)?,
            (None, Some(l), _) => feat = fuse_lidar(ctx, l, feat)?,
            (None, None, _) => {}
        }
        let classifier = self.classifier.as_ref().expect("fused classifier");
        let logits = classifier.forward(ctx, feat.var)?;
        ctx.g.resize(logits, overlap.height(), overlap.width(), false)
    }

    /// Loss-free inference on one frame: per-pixel and per-point class
    /// probabilities. Inside the overlap the fused head is used (when the
    /// configuration has one), elsewhere the lidar backbone.
    pub fn predict(
        &self,
        store: &ParamStore<f32>,
        cloud: &PointCloud,
        image: &CameraImage,
        camera: &CameraModel,
    ) -> Result<Prediction> {
        let index = spherical_project(cloud, &self.config.sensor)?;
        let range = build_range_image(cloud, &index)?;
        let mapping = build_mapping(cloud, &index, camera)?;
        let sample = Sample {
            range,
            mapping,
            image: image.clone(),
            image_labels: None,
        };
        self.predict_sample(store, sample, index)
    }

    pub fn predict_sample(&self, store: &ParamStore<f32>, sample: Sample, index: ProjectionIndex) -> Result<Prediction> {
        let k = self.config.classes;
        let mut g = Graph::new();
        let heads: &[Head] = if self.classifier.is_some() {
            &[Head::Lidar, Head::Fused]
        } else {
            &[Head::Lidar]
        };
        let out = self.forward(&mut Ctx::new(&mut g, store, false), &sample, heads)?;
        let mut probs = softmax_channels(g.value(out.lidar.expect("lidar logits")));
        let (h, w) = (sample.range.height, sample.range.width);
        let mut fused_mask = vec![false; h * w];
        let overlap = sample.mapping.overlap;
        if let (Some(f), Some(ov)) = (out.fused, overlap) {
            let fp = softmax_channels(g.value(f));
            let (oh, ow) = (ov.height(), ov.width());
            for c in 0..k {
                for y in 0..oh {
                    for x in 0..ow {
                        let (v, u) = (ov.rows.0 + y, ov.cols.0 + x);
                        let dst = probs.index(0, c, v, u);
                        probs.data_mut()[dst] = fp.at(0, c, y, x);
                        fused_mask[v * w + u] = true;
                    }
                }
            }
        }
        let pixel_labels: Vec<u8> = (0..h * w)
            .map(|i| argmax((0..k).map(|c| probs.data()[c * h * w + i])) as u8)
            .collect();
        let mut point_probs = Vec::with_capacity(index.point_pixel.len() * k);
        for &(u, v) in &index.point_pixel {
            let pix = v as usize * w + u as usize;
            point_probs.extend((0..k).map(|c| probs.data()[c * h * w + pix]));
        }
        Ok(Prediction {
            classes: k,
            index,
            range: sample.range,
            overlap,
            pixel_probs: probs,
            pixel_labels,
            fused_pixels: fused_mask,
            point_probs,
        })
    }
}

/// First index of the maximum.
pub fn argmax<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Inference result for one frame.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub classes: usize,
    pub index: ProjectionIndex,
    pub range: RangeImage,
    pub overlap: Option<Overlap>,
    /// `(1, K, H, W)` probabilities over the range image.
    pub pixel_probs: Tensor<f32>,
    pub pixel_labels: Vec<u8>,
    /// Pixels whose probabilities came from the fused head.
    pub fused_pixels: Vec<bool>,
    /// `N × K` row-major per-point probabilities.
    pub point_probs: Vec<f32>,
}

impl Prediction {
    pub fn point_row(&self, i: usize) -> &[f32] {
        &self.point_probs[i * self.classes..(i + 1) * self.classes]
    }
}

const MAGIC: &[u8; 5] = b"PYFU1";

/// One named tensor of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Values widened to f64; narrowing back is exact for f32 records.
    pub values: Vec<f64>,
}

/// Named parameters and buffers in the `PYFU1` binary format: magic, then
/// records of `u32` name length, name, `u8` dtype, `u32` rank, `u64` dims and
/// little-endian payload.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        let entry = |name: &str, t: &Tensor<T>| CheckpointEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: t.shape().dims().to_vec(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        };
        let mut entries: Vec<CheckpointEntry> = store.params().iter().map(|p| entry(&p.name, &p.tensor)).collect();
        entries.extend(store.buffers().iter().map(|b| entry(&b.name, &b.tensor)));
        Checkpoint { entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for e in &self.entries {
            out.extend((e.name.len() as u32).to_le_bytes());
            out.extend(e.name.as_bytes());
            out.push(e.dtype as u8);
            out.extend((e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                out.extend((*d as u64).to_le_bytes());
            }
            match e.dtype {
                DType::F32 => e.values.iter().for_each(|v| out.extend((*v as f32).to_le_bytes())),
                DType::F64 => e.values.iter().for_each(|v| out.extend(v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("missing PYFU1 magic"))?;
        let mut cur = Cursor { buf: rest, pos: 0 };
        let mut entries = Vec::new();
        while cur.pos < cur.buf.len() {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
            let dtype = DType::from_code(cur.take(1)?[0]).ok_or_else(|| bad("unknown dtype code"))?;
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| bad("dims overflow"))?;
            let raw = cur.take(n.checked_mul(dtype.size()).ok_or_else(|| bad("payload overflow"))?)?;
            let values = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            entries.push(CheckpointEntry {
                name,
                dtype,
                dims,
                values,
            });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies values into same-named store entries. With `strict`, every
    /// store entry must be present and no record may be left over.
    pub fn apply_to<T: Real>(&self, store: &mut ParamStore<T>, strict: bool) -> Result<usize> {
        let mut applied = 0;
        for e in &self.entries {
            let target = if let Some(id) = store.find_param(&e.name) {
                &mut store.param_mut(id).tensor
            } else if let Some(id) = store.find_buffer(&e.name) {
                store.buffer_mut(id)
            } else if strict {
                return Err(Error::Format(format!("checkpoint entry {} has no counterpart", e.name)));
            } else {
                continue;
            };
            if e.dims != target.shape().dims() {
                return Err(Error::Format(format!(
                    "checkpoint entry {} has dims {:?}, model expects {}",
                    e.name,
                    e.dims,
                    target.shape()
                )));
            }
            for (d, v) in target.data_mut().iter_mut().zip(&e.values) {
                *d = T::of(*v);
            }
            applied += 1;
        }
        let expected = store.params().len() + store.buffers().len();
        if strict && applied != expected {
            return Err(Error::Format(format!(
                "checkpoint covers {applied} of {expected} model entries"
            )));
        }
        Ok(applied)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint: truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parameters that are trainable yet got no gradient in `g`.
pub fn params_without_grad<T: Real>(g: &Graph<T>, store: &ParamStore<T>) -> Vec<String> {
    let reached: std::collections::BTreeSet<ParamId> = g
        .param_vars()
        .filter(|(_, v)| g.grad(*v).is_some_and(|gr| gr.iter().any(|x| *x != T::zero())))
        .map(|(id, _)| id)
        .collect();
    store
        .param_ids()
        .filter(|id| !store.param(*id).frozen && !reached.contains(id))
        .map(|id| store.param(id).name.clone())
        .collect()
}

/// Shape of the fused logits for a given overlap.
pub fn fused_logit_shape(classes: usize, overlap: &Overlap) -> Shape {
    Shape::new(1, classes, overlap.height(), overlap.width())
}

#[cfg(test)]
mod tests;
