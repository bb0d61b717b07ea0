//! Network building blocks: normalised convolutions, the residual block
//! family (IRB, BRB, BB), the semantic-head modules (LSFE, DPC, MC) and the
//! two-way feature pyramid.
//!
//! Blocks only hold parameter ids, so one instance serves any store built by
//! the same constructor sequence, in either precision.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    Activation, BufferId, Builder, ConvSpec, Graph, Init, NormStats, ParamId, ParamStore, Real, Shape, StatUpdate,
    Tensor, Var,
};

pub const LEAKY_SLOPE: f64 = 0.01;
const LEAKY: Activation = Activation::LeakyRelu(LEAKY_SLOPE);

/// Default dilation pairs of the dense prediction cell branches.
pub const DPC_DILATIONS: [(usize, usize); 5] = [(1, 6), (1, 1), (6, 21), (18, 15), (6, 3)];

/// Forward-pass context: the graph being recorded, the parameter values and
/// whether normalisation uses batch statistics.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub batch_stats: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, batch_stats: bool) -> Self {
        Ctx { g, store, batch_stats }
    }

    /// Same graph and store with a different statistics mode.
    pub fn with_stats(&mut self, batch_stats: bool) -> Ctx<'_, T> {
        Ctx {
            g: self.g,
            store: self.store,
            batch_stats,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

/// Blends recorded batch statistics into the running buffers:
/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>], momentum: f64) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (buf, new) in [(u.mean_buffer, &u.mean), (u.var_buffer, &u.var)] {
            for (r, b) in store.buffer_mut(buf).data_mut().iter_mut().zip(new) {
                *r = keep * *r + m * *b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 || spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::invalid(
                "conv",
                format!("{cin} → {cout} channels with {} groups", spec.groups),
            ));
        }
        let cpg = cin / spec.groups;
        let weight = b.param(
            "weight",
            Shape::new(cout, cpg, kernel.0, kernel.1),
            Init::Kaiming {
                fan_in: cpg * kernel.0 * kernel.1,
            },
        )?;
        let bias = if bias {
            Some(b.param("bias", Shape::new(1, cout, 1, 1), Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv { weight, bias, spec })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_with(ctx, x, self.spec)
    }

    fn forward_with<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, spec: ConvSpec) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|id| ctx.p(id));
        ctx.g.conv2d(x, w, b, spec)
    }
}

/// Per-channel normalisation with learned affine and an activation.
#[derive(Clone, Debug)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub act: Activation,
}

impl Norm {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize, act: Activation) -> Result<Self> {
        let affine = Shape::new(1, channels, 1, 1);
        Ok(Norm {
            scale: b.param("scale", affine, Init::Ones)?,
            shift: b.param("shift", affine, Init::Zeros)?,
            running_mean: b.buffer("running_mean", Tensor::zeros(affine))?,
            running_var: b.buffer("running_var", Tensor::full(affine, T::one()))?,
            act,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let scale = ctx.p(self.scale);
        let shift = ctx.p(self.shift);
        if ctx.batch_stats {
            let (y, stats) = ctx.g.norm_act(x, scale, shift, NormStats::Batch, self.act)?;
            if let Some((mean, var)) = stats {
                ctx.g.record_stats(StatUpdate {
                    mean_buffer: self.running_mean,
                    var_buffer: self.running_var,
                    mean,
                    var,
                });
            }
            Ok(y)
        } else {
            let store = ctx.store;
            let stats = NormStats::Fixed {
                mean: store.buffer(self.running_mean).data(),
                var: store.buffer(self.running_var).data(),
            };
            Ok(ctx.g.norm_act(x, scale, shift, stats, self.act)?.0)
        }
    }
}

/// Bias-free convolution followed by [`Norm`].
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNorm {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
        act: Activation,
    ) -> Result<Self> {
        let conv = Conv::new(&mut b.sub("conv"), cin, cout, kernel, spec, false)?;
        let norm = Norm::new(&mut b.sub("norm"), cout, act)?;
        Ok(ConvNorm { conv, norm })
    }

    pub fn pointwise<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        act: Activation,
    ) -> Result<Self> {
        Self::new(b, cin, cout, (1, 1), ConvSpec::default(), act)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.norm.forward(ctx, y)
    }
}

fn three_by_three(stride: (usize, usize), dilation: (usize, usize)) -> ConvSpec {
    ConvSpec::default()
        .stride(stride.0, stride.1)
        .dilation(dilation.0, dilation.1)
        .padding(dilation.0, dilation.1)
}

fn channels<T: Real>(ctx: &Ctx<'_, T>, x: Var, expected: usize, op: &'static str) -> Result<()> {
    let s = ctx.g.shape(x);
    if s.c != expected {
        return Err(Error::ShapeMismatch {
            op,
            expected: Shape::new(s.n, expected, s.h, s.w),
            found: s,
        });
    }
    Ok(())
}

/// Depthwise 3×3 → norm_act → pointwise 1×1 → norm_act.
#[derive(Clone, Debug)]
pub struct SepConv {
    pub depthwise: Conv,
    pub dw_norm: Norm,
    pub pointwise: ConvNorm,
    pub cin: usize,
}

impl SepConv {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        stride: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Self> {
        let spec = three_by_three(stride, dilation).groups(cin);
        Ok(SepConv {
            depthwise: Conv::new(&mut b.sub("dw"), cin, cin, (3, 3), spec, false)?,
            dw_norm: Norm::new(&mut b.sub("dw_norm"), cin, LEAKY)?,
            pointwise: ConvNorm::pointwise(&mut b.sub("pw"), cin, cout, LEAKY)?,
            cin,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_dilated(ctx, x, self.depthwise.spec.dilation)
    }

    /// Forward with the depthwise dilation overridden (padding follows it).
    pub fn forward_dilated<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, dilation: (usize, usize)) -> Result<Var> {
        channels(ctx, x, self.cin, "separable conv")?;
        let spec = three_by_three(self.depthwise.spec.stride, dilation).groups(self.cin);
        let y = self.depthwise.forward_with(ctx, x, spec)?;
        let y = self.dw_norm.forward(ctx, y)?;
        self.pointwise.forward(ctx, y)
    }
}

/// Inverted residual block: expand 1×1 → depthwise 3×3 → project 1×1.
#[derive(Clone, Debug)]
pub struct Irb {
    pub expand: ConvNorm,
    pub depthwise: ConvNorm,
    pub project: ConvNorm,
    pub residual: bool,
    pub cin: usize,
}

impl Irb {
    pub const EXPANSION: usize = 6;

    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        stride: (usize, usize),
    ) -> Result<Self> {
        Self::with_expansion(b, cin, cout, stride, Self::EXPANSION)
    }

    pub fn with_expansion<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        stride: (usize, usize),
        expansion: usize,
    ) -> Result<Self> {
        let mid = cin * expansion.max(1);
        Ok(Irb {
            expand: ConvNorm::pointwise(&mut b.sub("expand"), cin, mid, LEAKY)?,
            depthwise: ConvNorm::new(
                &mut b.sub("dw"),
                mid,
                mid,
                (3, 3),
                three_by_three(stride, (1, 1)).groups(mid),
                LEAKY,
            )?,
            project: ConvNorm::pointwise(&mut b.sub("project"), mid, cout, Activation::Identity)?,
            residual: cin == cout && stride == (1, 1),
            cin,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        channels(ctx, x, self.cin, "inverted residual block")?;
        let y = self.expand.forward(ctx, x)?;
        let y = self.depthwise.forward(ctx, y)?;
        let y = self.project.forward(ctx, y)?;
        if self.residual {
            ctx.g.add(x, y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualVariant {
    /// 1×1 reduce → 3×3 → 1×1 expand.
    Bottleneck,
    /// Two 3×3 convolutions.
    Basic,
}

/// Bottleneck (BRB) or basic (BB) residual block at stride 1.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub variant: ResidualVariant,
    pub layers: Vec<ConvNorm>,
    pub shortcut: Option<ConvNorm>,
    pub cin: usize,
}

impl ResidualBlock {
    pub const BOTTLENECK_RATIO: usize = 4;

    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        variant: ResidualVariant,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Self::with_ratio(b, variant, cin, cout, Self::BOTTLENECK_RATIO)
    }

    pub fn with_ratio<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        variant: ResidualVariant,
        cin: usize,
        cout: usize,
        ratio: usize,
    ) -> Result<Self> {
        let same = ConvSpec::same(3, 3);
        let layers = match variant {
            ResidualVariant::Bottleneck => {
                let mid = (cout / ratio.max(1)).max(1);
                vec![
                    ConvNorm::pointwise(&mut b.sub("reduce"), cin, mid, LEAKY)?,
                    ConvNorm::new(&mut b.sub("conv"), mid, mid, (3, 3), same, LEAKY)?,
                    ConvNorm::pointwise(&mut b.sub("expand"), mid, cout, Activation::Identity)?,
                ]
            }
            ResidualVariant::Basic => vec![
                ConvNorm::new(&mut b.sub("conv1"), cin, cout, (3, 3), same, LEAKY)?,
                ConvNorm::new(&mut b.sub("conv2"), cout, cout, (3, 3), same, Activation::Identity)?,
            ],
        };
        let shortcut = if cin != cout {
            Some(ConvNorm::pointwise(&mut b.sub("shortcut"), cin, cout, Activation::Identity)?)
        } else {
            None
        };
        Ok(ResidualBlock {
            variant,
            layers,
            shortcut,
            cin,
        })
    }

    /// Width of the inner layers.
    pub fn internal_width<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.param(self.layers[0].conv.weight).tensor.shape().n
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        channels(ctx, x, self.cin, "residual block")?;
        let mut y = x;
        for layer in &self.layers {
            y = layer.forward(ctx, y)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        ctx.g.add(skip, y)
    }
}

/// Large-scale feature extractor: two separable 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct Lsfe {
    pub first: SepConv,
    pub second: SepConv,
}

impl Lsfe {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Lsfe {
            first: SepConv::new(&mut b.sub("sep1"), cin, cout, (1, 1), (1, 1))?,
            second: SepConv::new(&mut b.sub("sep2"), cout, cout, (1, 1), (1, 1))?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        self.second.forward(ctx, y)
    }
}

/// Reduces a dilation so a 3×3 kernel's receptive field fits the map:
/// `max(1, min(d, ⌊(dim − 1)/2⌋))` per axis.
pub fn clamp_dilation(d: (usize, usize), h: usize, w: usize) -> (usize, usize) {
    let fit = |d: usize, dim: usize| d.min(dim.saturating_sub(1) / 2).max(1);
    (fit(d.0, h), fit(d.1, w))
}

/// Dense prediction cell: parallel dilated separable branches, concatenated
/// and projected.
#[derive(Clone, Debug)]
pub struct Dpc {
    pub branches: Vec<(SepConv, (usize, usize))>,
    pub project: ConvNorm,
}

impl Dpc {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, cin: usize, cout: usize) -> Result<Self> {
        Self::with_dilations(b, cin, cout, &DPC_DILATIONS)
    }

    pub fn with_dilations<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        dilations: &[(usize, usize)],
    ) -> Result<Self> {
        if dilations.is_empty() {
            return Err(Error::invalid("dpc", "needs at least one branch"));
        }
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Ok((SepConv::new(&mut b.sub(&format!("branch{i}")), cin, cout, (1, 1), d)?, d)))
            .collect::<Result<Vec<_>>>()?;
        let project = ConvNorm::pointwise(&mut b.sub("project"), cout * dilations.len(), cout, LEAKY)?;
        Ok(Dpc { branches, project })
    }

    /// Dilations actually used on an `h × w` input.
    pub fn effective_dilations(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.branches.iter().map(|(_, d)| clamp_dilation(*d, h, w)).collect()
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x);
        let mut outs = Vec::with_capacity(self.branches.len());
        for (branch, d) in &self.branches {
            outs.push(branch.forward_dilated(ctx, x, clamp_dilation(*d, s.h, s.w))?);
        }
        let cat = ctx.g.concat(&outs)?;
        self.project.forward(ctx, cat)
    }
}

/// Mismatch correction: refines the coarse map, upsamples it to the fine
/// map's size and adds.
#[derive(Clone, Debug)]
pub struct Mc {
    pub first: SepConv,
    pub second: SepConv,
}

impl Mc {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize) -> Result<Self> {
        Ok(Mc {
            first: SepConv::new(&mut b.sub("sep1"), channels, channels, (1, 1), (1, 1))?,
            second: SepConv::new(&mut b.sub("sep2"), channels, channels, (1, 1), (1, 1))?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, fine: Var, coarse: Var) -> Result<Var> {
        let f = ctx.g.shape(fine);
        let c = ctx.g.shape(coarse);
        if c.h > f.h || c.w > f.w || c.c != f.c {
            return Err(Error::ShapeMismatch {
                op: "mismatch correction (coarse map must not exceed the fine one)",
                expected: f,
                found: c,
            });
        }
        let y = self.first.forward(ctx, coarse)?;
        let y = self.second.forward(ctx, y)?;
        let y = ctx.g.resize(y, f.h, f.w, false)?;
        ctx.g.add(fine, y)
    }
}

/// How the top-down and bottom-up paths are merged at each scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Sum,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub top_down: bool,
    pub bottom_up: bool,
    pub combine: Combine,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            top_down: true,
            bottom_up: true,
            combine: Combine::Sum,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.top_down && !self.bottom_up {
            return Err(Error::Config("a pyramid needs at least one of top_down / bottom_up".into()));
        }
        Ok(())
    }
}

fn check_pyramid<T: Real>(g: &Graph<T>, xs: &[Var]) -> Result<()> {
    for pair in xs.windows(2) {
        let (a, b) = (g.shape(pair[0]), g.shape(pair[1]));
        if b.h > a.h || b.w > a.w || b.plane() >= a.plane() {
            return Err(Error::ShapeMismatch {
                op: "pyramid (inputs must shrink from fine to coarse)",
                expected: a,
                found: b,
            });
        }
    }
    Ok(())
}

/// Parallel top-down and bottom-up aggregation over three fine→coarse maps,
/// with optional 1×1 laterals (the plain pyramid when inputs already share a
/// width).
#[derive(Clone, Debug)]
pub struct TwoWayPyramid {
    pub laterals: Option<Vec<ConvNorm>>,
    pub down: Vec<SepConv>,
    pub outputs: Vec<SepConv>,
    pub config: PyramidConfig,
}

impl TwoWayPyramid {
    /// `in_channels` given → laterals to `channels`; `None` → inputs must
    /// already have `channels`.
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        in_channels: Option<[usize; 3]>,
        channels: usize,
        config: PyramidConfig,
    ) -> Result<Self> {
        config.validate()?;
        let laterals = match in_channels {
            Some(cs) => Some(
                cs.iter()
                    .enumerate()
                    .map(|(i, &c)| ConvNorm::pointwise(&mut b.sub(&format!("lateral{i}")), c, channels, LEAKY))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let down = if config.bottom_up {
            (0..2)
                .map(|i| SepConv::new(&mut b.sub(&format!("down{i}")), channels, channels, (2, 2), (1, 1)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let both = config.top_down && config.bottom_up;
        let out_in = if both && config.combine == Combine::Concat {
            2 * channels
        } else {
            channels
        };
        let outputs = (0..3)
            .map(|i| SepConv::new(&mut b.sub(&format!("out{i}")), out_in, channels, (1, 1), (1, 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TwoWayPyramid {
            laterals,
            down,
            outputs,
            config,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, xs: [Var; 3]) -> Result<[Var; 3]> {
        check_pyramid(ctx.g, &xs)?;
        let l: Vec<Var> = match &self.laterals {
            Some(lats) => lats
                .iter()
                .zip(xs)
                .map(|(lat, x)| lat.forward(ctx, x))
                .collect::<Result<_>>()?,
            None => xs.to_vec(),
        };
        let sizes: Vec<(usize, usize)> = l.iter().map(|v| (ctx.g.shape(*v).h, ctx.g.shape(*v).w)).collect();

        let top = if self.config.top_down {
            let mut t = vec![l[2]; 3];
            for i in (0..2).rev() {
                let up = ctx.g.resize(t[i + 1], sizes[i].0, sizes[i].1, false)?;
                t[i] = ctx.g.add(l[i], up)?;
            }
            Some(t)
        } else {
            None
        };
        let bottom = if self.config.bottom_up {
            let mut bu = vec![l[0]; 3];
            for i in 1..3 {
                let mut d = self.down[i - 1].forward(ctx, bu[i - 1])?;
                let s = ctx.g.shape(d);
                if (s.h, s.w) != sizes[i] {
                    d = ctx.g.resize(d, sizes[i].0, sizes[i].1, false)?;
                }
                bu[i] = ctx.g.add(l[i], d)?;
            }
            Some(bu)
        } else {
            None
        };

        let mut out = [l[0]; 3];
        for i in 0..3 {
            let merged = match (&top, &bottom) {
                (Some(t), Some(bu)) => match self.config.combine {
                    Combine::Sum => ctx.g.add(t[i], bu[i])?,
                    Combine::Concat => ctx.g.concat(&[t[i], bu[i]])?,
                },
                (Some(t), None) => t[i],
                (None, Some(bu)) => bu[i],
                (None, None) => unreachable!("validated"),
            };
            out[i] = self.outputs[i].forward(ctx, merged)?;
        }
        Ok(out)
    }
}

/// Semantic head: DPC on the coarsest map, LSFE on the two finer ones,
/// mismatch-correction merges, everything at the finest size, concatenated
/// and projected.
#[derive(Clone, Debug)]
pub struct SemanticHead {
    pub dpc: Dpc,
    pub lsfe_mid: Lsfe,
    pub lsfe_fine: Lsfe,
    pub mc_mid: Mc,
    pub mc_fine: Mc,
    pub project: ConvNorm,
}

impl SemanticHead {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize) -> Result<Self> {
        Ok(SemanticHead {
            dpc: Dpc::new(&mut b.sub("dpc"), channels, channels)?,
            lsfe_mid: Lsfe::new(&mut b.sub("lsfe_mid"), channels, channels)?,
            lsfe_fine: Lsfe::new(&mut b.sub("lsfe_fine"), channels, channels)?,
            mc_mid: Mc::new(&mut b.sub("mc_mid"), channels)?,
            mc_fine: Mc::new(&mut b.sub("mc_fine"), channels)?,
            project: ConvNorm::pointwise(&mut b.sub("project"), 3 * channels, channels, LEAKY)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, p: [Var; 3]) -> Result<Var> {
        let d = self.dpc.forward(ctx, p[2])?;
        let l2 = self.lsfe_mid.forward(ctx, p[1])?;
        let l1 = self.lsfe_fine.forward(ctx, p[0])?;
        let m2 = self.mc_mid.forward(ctx, l2, d)?;
        let m1 = self.mc_fine.forward(ctx, l1, m2)?;
        let s = ctx.g.shape(m1);
        let m2_up = ctx.g.resize(m2, s.h, s.w, false)?;
        let d_up = ctx.g.resize(d, s.h, s.w, false)?;
        let cat = ctx.g.concat(&[m1, m2_up, d_up])?;
        self.project.forward(ctx, cat)
    }
}

#[cfg(test)]
mod tests;
