//! Backbone adapters that turn an image batch into a multi-level feature
//! pyramid, and the partition of pyramid levels into the two decoder stages.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::blocks::{ConvBlock, ConvBlockSpec};
use crate::error::shape_err;
use crate::nn::{Conv2d, ParamBuilder, Session};
use crate::ops::{self, Conv2dArgs};
use crate::{math, Error, Result};

/// Channel count and stride (relative to the input) of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelInfo {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct FeatureLevel {
    pub features: Var,
    pub channels: usize,
    pub stride: usize,
}

impl FeatureLevel {
    pub fn size(&self) -> (usize, usize) {
        let s = self.features.shape();
        (s[2], s[3])
    }
}

/// Backbone features ordered from the finest (level 1) to the coarsest.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Level by 1-based index.
    pub fn level(&self, index: usize) -> &FeatureLevel {
        &self.levels[index - 1]
    }
}

/// Registered backbone identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    /// Five levels: a stride-2 stem plus four residual stages.
    Residual,
    /// Four levels of patch embedding plus spatial-reduction attention.
    PyramidTransformer,
    /// Five plain stride-2 conv blocks with channels `[8, 16, 24, 32, 40]`.
    Synthetic,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [
        BackboneKind::Residual,
        BackboneKind::PyramidTransformer,
        BackboneKind::Synthetic,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BackboneKind::Residual => "residual",
            BackboneKind::PyramidTransformer => "pyramid_transformer",
            BackboneKind::Synthetic => "synthetic",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown backbone {id:?}")))
    }

    pub fn levels(self) -> Vec<LevelInfo> {
        let (channels, strides): (&[usize], &[usize]) = match self {
            BackboneKind::Residual => (&RESIDUAL_WIDTHS, &[2, 4, 8, 16, 32]),
            BackboneKind::PyramidTransformer => (&PVT_WIDTHS, &[4, 8, 16, 32]),
            BackboneKind::Synthetic => (&SYNTHETIC_WIDTHS, &[2, 4, 8, 16, 32]),
        };
        channels
            .iter()
            .zip(strides)
            .map(|(&channels, &stride)| LevelInfo { channels, stride })
            .collect()
    }
}

const RESIDUAL_WIDTHS: [usize; 5] = [16, 32, 64, 128, 256];
const PVT_WIDTHS: [usize; 4] = [32, 64, 128, 256];
const PVT_REDUCTION: [usize; 4] = [8, 4, 2, 1];
const SYNTHETIC_WIDTHS: [usize; 5] = [8, 16, 24, 32, 40];

const POINTWISE: Conv2dArgs = Conv2dArgs {
    stride: 1,
    padding: 0,
    dilation: 1,
};

#[derive(Clone, Debug)]
struct ResidualUnit {
    conv1: ConvBlock,
    conv2: ConvBlock,
    shortcut: ConvBlock,
}

impl ResidualUnit {
    fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: ConvBlock::new(&mut pb.sub("conv1"), ConvBlockSpec::new(c_in, c_out, 3, 2, 1), true),
            conv2: ConvBlock::new(&mut pb.sub("conv2"), ConvBlockSpec::new(c_out, c_out, 3, 1, 1), false),
            shortcut: ConvBlock::new(
                &mut pb.sub("shortcut"),
                ConvBlockSpec {
                    stride: 2,
                    ..ConvBlockSpec::pointwise(c_in, c_out)
                },
                false,
            ),
        }
    }

    fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let y = self.conv2.forward(s, &self.conv1.forward(s, x)?)?;
        let short = self.shortcut.forward(s, x)?;
        Ok(ops::relu(&ops::add(&y, &short)?))
    }
}

/// Patch embedding followed by one transformer block whose keys and values
/// come from a spatially reduced copy of the tokens.
#[derive(Clone, Debug)]
struct PyramidStage {
    embed: ConvBlock,
    query: Conv2d,
    reduce: Option<ConvBlock>,
    key: Conv2d,
    value: Conv2d,
    proj: Conv2d,
    mlp_in: Conv2d,
    mlp_out: Conv2d,
    channels: usize,
}

impl PyramidStage {
    fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c: usize, first: bool, reduction: usize) -> Self {
        let embed = if first {
            ConvBlockSpec::new(c_in, c, 7, 4, 1)
        } else {
            ConvBlockSpec::new(c_in, c, 3, 2, 1)
        };
        let reduce = (reduction > 1).then(|| {
            ConvBlock::new(
                &mut pb.sub("reduce"),
                ConvBlockSpec {
                    in_channels: c,
                    out_channels: c,
                    kernel: reduction,
                    stride: reduction,
                    dilation: 1,
                    padding: 0,
                },
                false,
            )
        });
        Self {
            embed: ConvBlock::new(&mut pb.sub("embed"), embed, true),
            query: Conv2d::new(&mut pb.sub("query"), c, c, 1, POINTWISE, true),
            reduce,
            key: Conv2d::new(&mut pb.sub("key"), c, c, 1, POINTWISE, true),
            value: Conv2d::new(&mut pb.sub("value"), c, c, 1, POINTWISE, true),
            proj: Conv2d::new(&mut pb.sub("proj"), c, c, 1, POINTWISE, true),
            mlp_in: Conv2d::new(&mut pb.sub("mlp_in"), c, 2 * c, 1, POINTWISE, true),
            mlp_out: Conv2d::new(&mut pb.sub("mlp_out"), 2 * c, c, 1, POINTWISE, true),
            channels: c,
        }
    }

    fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let x = self.embed.forward(s, x)?;
        let (b, c, h, w) = x.value().dims4()?;
        let reduced = match &self.reduce {
            Some(r) if h >= r.spec.kernel && w >= r.spec.kernel => r.forward(s, &x)?,
            _ => x.clone(),
        };
        let m = reduced.shape()[2] * reduced.shape()[3];
        let q = ops::reshape(&self.query.forward(s, &x)?, &[b, c, h * w])?;
        let k = ops::reshape(&self.key.forward(s, &reduced)?, &[b, c, m])?;
        let v = ops::reshape(&self.value.forward(s, &reduced)?, &[b, c, m])?;
        let logits = ops::affine(&ops::bmm(&q, true, &k, false)?, 1.0 / math::sqrt(self.channels as f64), 0.0);
        let att = ops::softmax_last(&logits)?;
        let mixed = ops::reshape(&ops::bmm(&v, false, &att, true)?, &[b, c, h, w])?;
        let x = ops::add(&x, &self.proj.forward(s, &mixed)?)?;
        let hidden = ops::relu(&self.mlp_in.forward(s, &x)?);
        ops::add(&x, &self.mlp_out.forward(s, &hidden)?)
    }
}

#[derive(Clone, Debug)]
enum Stages {
    Residual { stem: ConvBlock, units: Vec<ResidualUnit> },
    Pyramid(Vec<PyramidStage>),
    Plain(Vec<ConvBlock>),
}

/// A registered backbone with its parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub kind: BackboneKind,
    levels: Vec<LevelInfo>,
    stages: Stages,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, kind: BackboneKind) -> Self {
        let levels = kind.levels();
        let stages = match kind {
            BackboneKind::Residual => {
                let stem = ConvBlock::new(
                    &mut pb.sub("stem"),
                    ConvBlockSpec::new(3, RESIDUAL_WIDTHS[0], 3, 2, 1),
                    true,
                );
                let units = RESIDUAL_WIDTHS
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| ResidualUnit::new(&mut pb.sub(&format!("stage{}", i + 2)), w[0], w[1]))
                    .collect();
                Stages::Residual { stem, units }
            }
            BackboneKind::PyramidTransformer => {
                let mut c_in = 3;
                let stages = PVT_WIDTHS
                    .iter()
                    .zip(PVT_REDUCTION)
                    .enumerate()
                    .map(|(i, (&c, r))| {
                        let st = PyramidStage::new(&mut pb.sub(&format!("stage{}", i + 1)), c_in, c, i == 0, r);
                        c_in = c;
                        st
                    })
                    .collect();
                Stages::Pyramid(stages)
            }
            BackboneKind::Synthetic => {
                let mut c_in = 3;
                let blocks = SYNTHETIC_WIDTHS
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let b = ConvBlock::new(
                            &mut pb.sub(&format!("level{}", i + 1)),
                            ConvBlockSpec::new(c_in, c, 3, 2, 1),
                            true,
                        );
                        c_in = c;
                        b
                    })
                    .collect();
                Stages::Plain(blocks)
            }
        };
        Self { kind, levels, stages }
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Run the adapter on `image [B,3,H,W]`; `H` and `W` must be multiples of 32.
    pub fn extract_features(&self, s: &Session<'_>, image: &Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.value().dims4()?;
        if c != 3 {
            return Err(shape_err!("backbones expect 3 input channels, got {}", c));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Validation(format!(
                "input size {h}x{w} is not divisible by 32"
            )));
        }
        let mut outs = Vec::with_capacity(self.levels.len());
        match &self.stages {
            Stages::Residual { stem, units } => {
                let mut x = stem.forward(s, image)?;
                outs.push(x.clone());
                for u in units {
                    x = u.forward(s, &x)?;
                    outs.push(x.clone());
                }
            }
            Stages::Pyramid(stages) => {
                let mut x = image.clone();
                for st in stages {
                    x = st.forward(s, &x)?;
                    outs.push(x.clone());
                }
            }
            Stages::Plain(blocks) => {
                let mut x = image.clone();
                for b in blocks {
                    x = b.forward(s, &x)?;
                    outs.push(x.clone());
                }
            }
        }
        let levels = outs
            .into_iter()
            .zip(&self.levels)
            .map(|(features, info)| {
                let (_, fc, fh, fw) = features.value().dims4()?;
                if fc != info.channels || fh != h / info.stride || fw != w / info.stride {
                    return Err(shape_err!(
                        "{} level with stride {} produced {:?}",
                        self.kind.id(),
                        info.stride,
                        features.shape()
                    ));
                }
                Ok(FeatureLevel {
                    features,
                    channels: info.channels,
                    stride: info.stride,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }
}

/// Which pyramid levels feed the guide-map stage (A) and the
/// background-feature stage (B). Indices are 1-based and kept sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPartition {
    stage_a: Vec<usize>,
    stage_b: Vec<usize>,
}

/// The eleven level combinations of the partition ablation grid.
pub const PARTITION_GRID: [&str; 11] = [
    "2+5", "3+5", "4+5", "5", "1+2+5", "1+3+5", "1+4+5", "1+2+4+5", "1+2+3+5", "1+3+4+5", "1+5",
];

impl LayerPartition {
    pub fn new(stage_a: &[usize], stage_b: &[usize]) -> Self {
        let mut a = stage_a.to_vec();
        let mut b = stage_b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        Self { stage_a: a, stage_b: b }
    }

    /// Levels 1 and top for stage A; the rest for stage B. A four-level
    /// pyramid reuses level 1 in stage B.
    pub fn default_for(num_levels: usize) -> Self {
        match num_levels {
            4 => Self::new(&[1, 4], &[1, 2, 3]),
            n => Self::new(&[1, n], &(2..n).collect::<Vec<_>>()),
        }
    }

    /// Parse `"default"`, a stage-A list such as `"2+5"` (stage B is the
    /// complement) or an explicit `"1+4|1+2+3"`.
    pub fn parse(text: &str, num_levels: usize) -> Result<Self> {
        let text = text.trim();
        if text == "default" {
            return Ok(Self::default_for(num_levels));
        }
        let list = |s: &str| -> Result<Vec<usize>> {
            s.split('+')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad level {t:?} in partition {text:?}")))
                })
                .collect()
        };
        match text.split_once('|') {
            Some((a, b)) => Ok(Self::new(&list(a)?, &list(b)?)),
            None => {
                let a = list(text)?;
                let b: Vec<usize> = (1..=num_levels).filter(|l| !a.contains(l)).collect();
                Ok(Self::new(&a, &b))
            }
        }
    }

    pub fn stage_a(&self) -> &[usize] {
        &self.stage_a
    }

    pub fn stage_b(&self) -> &[usize] {
        &self.stage_b
    }

    /// Check the partition against a pyramid depth. A single-level stage A
    /// is only accepted with `allow_single_stage_a`.
    pub fn validate(&self, num_levels: usize, allow_single_stage_a: bool) -> Result<()> {
        let mut violations: Vec<String> = Vec::new();
        if !(4..=5).contains(&num_levels) {
            violations.push(format!("pyramids must have 4 or 5 levels, got {num_levels}"));
        }
        let a: BTreeSet<usize> = self.stage_a.iter().copied().collect();
        let b: BTreeSet<usize> = self.stage_b.iter().copied().collect();
        if a.len() != self.stage_a.len() || b.len() != self.stage_b.len() {
            violations.push("a level is listed twice within one stage".into());
        }
        if a.iter().chain(&b).any(|&l| l == 0 || l > num_levels) {
            violations.push(format!("levels must lie in 1..={num_levels}"));
        }
        if !a.contains(&num_levels) {
            violations.push("stage A must contain the highest level".into());
        }
        if a.len() < 2 && !allow_single_stage_a {
            violations.push("stage A needs at least two levels (single-level stage A requires the relaxation flag)".into());
        }
        if b.is_empty() {
            violations.push("stage B needs at least one level".into());
        }
        if a.union(&b).count() != num_levels {
            violations.push("stages must cover every level".into());
        }
        let overlap: Vec<usize> = a.intersection(&b).copied().collect();
        let overlap_ok = overlap.is_empty() || (num_levels == 4 && overlap == [1]);
        if !overlap_ok {
            violations.push(format!("stages overlap at levels {overlap:?}"));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "invalid layer partition {self}: {}",
                violations.join("; ")
            )))
        }
    }

    /// Select the stage inputs from a pyramid without copying feature data.
    pub fn select<'p>(&self, pyramid: &'p FeaturePyramid) -> Result<(Vec<&'p FeatureLevel>, Vec<&'p FeatureLevel>)> {
        let n = pyramid.num_levels();
        if self.stage_a.iter().chain(&self.stage_b).any(|&l| l == 0 || l > n) {
            return Err(Error::Validation(format!(
                "partition {self} does not fit a {n}-level pyramid"
            )));
        }
        Ok((
            self.stage_a.iter().map(|&l| pyramid.level(l)).collect(),
            self.stage_b.iter().map(|&l| pyramid.level(l)).collect(),
        ))
    }
}

impl core::fmt::Display for LayerPartition {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let join = |v: &[usize]| v.iter().map(|l| format!("{l}")).collect::<Vec<_>>().join("+");
        write!(f, "{}|{}", join(&self.stage_a), join(&self.stage_b))
    }
}

/// Stage inputs of the default two-plus-three split.
pub struct DefaultSplit<'p> {
    pub low: &'p FeatureLevel,
    pub high: &'p FeatureLevel,
    pub stage_b: [&'p FeatureLevel; 3],
}

/// Partition into the `(low, high)` and three stage-B levels of the proposed
/// design; other shapes of partition are rejected.
pub fn partition<'p>(pyramid: &'p FeaturePyramid, spec: &LayerPartition) -> Result<DefaultSplit<'p>> {
    spec.validate(pyramid.num_levels(), false)?;
    let (a, b) = spec.select(pyramid)?;
    match (a.as_slice(), b.as_slice()) {
        (&[low, high], &[x, y, z]) => Ok(DefaultSplit {
            low,
            high,
            stage_b: [x, y, z],
        }),
        _ => Err(Error::Validation(format!(
            "partition {spec} does not split into two stage-A and three stage-B levels"
        ))),
    }
}
