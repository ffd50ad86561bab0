//! The difference-aware decoder.
//!
//! * Stage A, guide-map generation ([`GuideMapGenerator`]): the top pyramid
//!   level goes through a context module and dual residual attention, is
//!   upsampled onto the finest stage-A level and fused with it into a
//!   one-channel guide map (logits).
//! * Stage B, middle feature fusion ([`MiddleFeatureFusion`]): the stage-B
//!   levels are brought to a common base resolution, reduced to 32 channels,
//!   passed through a context module each and concatenated into the
//!   background-aware features.
//! * Stage C, difference-aware extraction ([`DifferenceAwareExtractor`]): the
//!   guidance module ([`dgm`]) cross-attends the features with the guide map,
//!   the enhancement module ([`dem_features`]) splits them into foreground and
//!   background parts with the guide probabilities and fuses them as
//!   `theta * fg - epsilon * bg`, and two conv blocks project the result to a
//!   refined map. The extractor is applied repeatedly, each time guided by
//!   the previous map.
//!
//! All maps are carried as logits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::attention::DualResidualAttention;
use crate::autograd::Var;
use crate::backbones::{Backbone, BackboneKind, FeatureLevel, FeaturePyramid, LayerPartition};
use crate::blocks::{ConvBlock, ConvBlockSpec, ContextModule, ContextVariant};
use crate::error::shape_err;
use crate::nn::{Conv2d, ParamBuilder, ParamStore, Scalar, Session};
use crate::ops::{self, Conv2dArgs};
use crate::{Error, Result};

/// Default bound on guide-map positions `H * W` for the guidance module.
pub const DEFAULT_MAX_GUIDE_POSITIONS: usize = 1 << 20;

/// Which resolution stage B fuses at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Fusion {
    /// The middle stage-B level.
    Middle,
    /// The finest stage-B level.
    BottomUp,
    /// The coarsest stage-B level.
    TopDown,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::Middle, Fusion::BottomUp, Fusion::TopDown];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Middle => "middle",
            Fusion::BottomUp => "bottom_up",
            Fusion::TopDown => "top_down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion {s:?}")))
    }

    fn base_index(self, count: usize) -> usize {
        match self {
            Fusion::Middle => (count - 1) / 2,
            Fusion::BottomUp => 0,
            Fusion::TopDown => count - 1,
        }
    }
}

/// How the enhancement module combines foreground and background features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DemMode {
    /// `theta * fg - epsilon * bg`
    ForegroundMinusBackground,
    /// `theta * fg + epsilon * bg`
    ForegroundPlusBackground,
    /// `theta * fg`
    ForegroundOnly,
    /// `epsilon * bg`
    BackgroundOnly,
}

impl DemMode {
    pub const ALL: [DemMode; 4] = [
        DemMode::ForegroundMinusBackground,
        DemMode::ForegroundPlusBackground,
        DemMode::ForegroundOnly,
        DemMode::BackgroundOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DemMode::ForegroundMinusBackground => "f_minus_b",
            DemMode::ForegroundPlusBackground => "f_plus_b",
            DemMode::ForegroundOnly => "f_only",
            DemMode::BackgroundOnly => "b_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dem_mode {s:?}")))
    }
}

/// The `model.*` section of a run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: String,
    pub partition: String,
    pub allow_single_stage_a: bool,
    pub fem_variant: ContextVariant,
    pub fusion: Fusion,
    pub dae_repeats: usize,
    pub use_dgm: bool,
    pub dem_mode: DemMode,
    /// Apply the context module to each stage-B branch (otherwise once after
    /// concatenation).
    pub mff_fem_per_branch: bool,
    pub branch_channels: usize,
    pub head_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "residual".into(),
            partition: "default".into(),
            allow_single_stage_a: false,
            fem_variant: ContextVariant::Fem,
            fusion: Fusion::Middle,
            dae_repeats: 2,
            use_dgm: true,
            dem_mode: DemMode::ForegroundMinusBackground,
            mff_fem_per_branch: true,
            branch_channels: 32,
            head_channels: 64,
            seed: 0,
        }
    }
}

pub const MAX_DAE_REPEATS: usize = 8;

impl ModelConfig {
    /// Resolve and check every switch before any parameters are built.
    pub fn validate(&self) -> Result<(BackboneKind, LayerPartition)> {
        let kind = BackboneKind::from_id(&self.backbone)?;
        let partition = LayerPartition::parse(&self.partition, kind.levels().len())?;
        partition.validate(kind.levels().len(), self.allow_single_stage_a)?;
        if !(1..=MAX_DAE_REPEATS).contains(&self.dae_repeats) {
            return Err(Error::Config(format!(
                "dae_repeats must be in 1..={MAX_DAE_REPEATS}, got {}",
                self.dae_repeats
            )));
        }
        if self.branch_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok((kind, partition))
    }
}

/// Single-channel logits.
#[derive(Clone, Debug)]
pub struct GuideMap {
    pub logits: Var,
}

impl GuideMap {
    pub fn new(logits: Var) -> Result<Self> {
        let (_, c, _, _) = logits.value().dims4()?;
        if c != 1 {
            return Err(shape_err!("guide maps have one channel, got {}", c));
        }
        Ok(Self { logits })
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.logits.shape();
        (s[2], s[3])
    }
}

/// Fused stage-B features.
#[derive(Clone, Debug)]
pub struct BackgroundFeatures {
    pub features: Var,
}

/// Deeply supervised output logits at input resolution: `C0` from stage A,
/// then one map per extractor repeat.
#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    pub maps: Vec<Var>,
}

impl DecoderOutputs {
    pub fn c0(&self) -> &Var {
        &self.maps[0]
    }

    /// The final refined map.
    pub fn last(&self) -> &Var {
        self.maps.last().expect("at least one map")
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn pointwise_conv(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize) -> Conv2d {
    let args = Conv2dArgs {
        stride: 1,
        padding: 0,
        dilation: 1,
    };
    Conv2d::new(pb, c_in, c_out, 1, args, true)
}

/// Stage A.
#[derive(Clone, Debug)]
pub struct GuideMapGenerator {
    pub context: ContextModule,
    pub attention: DualResidualAttention,
    lows: Vec<ConvBlock>,
    fuse1: ConvBlock,
    fuse2: ConvBlock,
    project: Conv2d,
    context_channels: usize,
}

impl GuideMapGenerator {
    /// `stage_a_channels` lists the stage-A level widths, finest first; the
    /// last one is the top level.
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, stage_a_channels: &[usize]) -> Self {
        let bc = cfg.branch_channels;
        let cc = 3 * bc;
        let (&top, lows) = stage_a_channels.split_last().expect("stage A is not empty");
        let context = ContextModule::new(&mut pb.sub("context"), cfg.fem_variant, top, cc, bc);
        let attention = DualResidualAttention::new(&mut pb.sub("attention"), cc);
        let lows: Vec<ConvBlock> = lows
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvBlock::new(&mut pb.sub(&format!("low{i}")), ConvBlockSpec::pointwise(c, bc), true))
            .collect();
        let fused = cc + bc * lows.len();
        let hc = cfg.head_channels;
        Self {
            context,
            attention,
            fuse1: ConvBlock::new(&mut pb.sub("fuse1"), ConvBlockSpec::new(fused, hc, 3, 1, 1), true),
            fuse2: ConvBlock::new(&mut pb.sub("fuse2"), ConvBlockSpec::new(hc, hc, 3, 1, 1), true),
            project: pointwise_conv(&mut pb.sub("project"), hc, 1),
            lows,
            context_channels: cc,
        }
    }

    /// Guide map at the resolution of the finest stage-A level.
    pub fn forward(&self, s: &Session<'_>, levels: &[&FeatureLevel]) -> Result<GuideMap> {
        let (top, lows) = levels.split_last().ok_or_else(|| shape_err!("stage A is empty"))?;
        if lows.len() != self.lows.len() {
            return Err(shape_err!(
                "guide-map stage built for {} low levels, got {}",
                self.lows.len(),
                lows.len()
            ));
        }
        let high = self.attention.forward(s, &self.context.forward(s, &top.features)?)?;
        debug_assert_eq!(high.shape()[1], self.context_channels);
        let target = lows.first().map_or(top.size(), |l| l.size());
        let mut parts = Vec::with_capacity(levels.len());
        parts.push(ops::resize_to_integer_ratio(&high, target)?);
        for (block, level) in self.lows.iter().zip(lows) {
            let y = block.forward(s, &level.features)?;
            parts.push(ops::resize_to_integer_ratio(&y, target)?);
        }
        let refs: Vec<&Var> = parts.iter().collect();
        let y = self.fuse1.forward(s, &ops::concat_channels(&refs)?)?;
        let y = self.fuse2.forward(s, &y)?;
        GuideMap::new(self.project.forward(s, &y)?)
    }
}

#[derive(Clone, Debug)]
enum Reduce {
    /// Stride-2 3x3 block, then a bilinear resize if still finer than the base.
    Down(ConvBlock),
    /// 1x1 block at the base resolution.
    Same(ConvBlock),
    /// Bilinear upsample, then a 1x1 block.
    Up(ConvBlock),
}

/// Stage B.
#[derive(Clone, Debug)]
pub struct MiddleFeatureFusion {
    pub fusion: Fusion,
    reducers: Vec<Reduce>,
    contexts: Vec<ContextModule>,
    strides: Vec<usize>,
    base: usize,
    per_branch: bool,
    pub out_channels: usize,
}

impl MiddleFeatureFusion {
    /// `levels` are the stage-B level descriptions in ascending order.
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, levels: &[crate::backbones::LevelInfo]) -> Self {
        let bc = cfg.branch_channels;
        let base = cfg.fusion.base_index(levels.len());
        let base_stride = levels[base].stride;
        let reducers = levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut pb = pb.sub(&format!("reduce{i}"));
                match l.stride.cmp(&base_stride) {
                    core::cmp::Ordering::Less => {
                        Reduce::Down(ConvBlock::new(&mut pb, ConvBlockSpec::new(l.channels, bc, 3, 2, 1), true))
                    }
                    core::cmp::Ordering::Equal => {
                        Reduce::Same(ConvBlock::new(&mut pb, ConvBlockSpec::pointwise(l.channels, bc), true))
                    }
                    core::cmp::Ordering::Greater => {
                        Reduce::Up(ConvBlock::new(&mut pb, ConvBlockSpec::pointwise(l.channels, bc), true))
                    }
                }
            })
            .collect();
        let n = levels.len();
        let contexts = if cfg.mff_fem_per_branch {
            (0..n)
                .map(|i| ContextModule::new(&mut pb.sub(&format!("context{i}")), cfg.fem_variant, bc, bc, bc))
                .collect()
        } else {
            alloc::vec![ContextModule::new(&mut pb.sub("context"), cfg.fem_variant, n * bc, n * bc, bc)]
        };
        Self {
            fusion: cfg.fusion,
            reducers,
            contexts,
            strides: levels.iter().map(|l| l.stride).collect(),
            base,
            per_branch: cfg.mff_fem_per_branch,
            out_channels: n * bc,
        }
    }

    pub fn forward(&self, s: &Session<'_>, levels: &[&FeatureLevel]) -> Result<BackgroundFeatures> {
        if levels.len() != self.reducers.len() {
            return Err(shape_err!(
                "feature fusion built for {} levels, got {}",
                self.reducers.len(),
                levels.len()
            ));
        }
        for (l, &stride) in levels.iter().zip(&self.strides) {
            if l.stride != stride {
                return Err(shape_err!("feature fusion expected stride {}, got {}", stride, l.stride));
            }
        }
        let target = levels[self.base].size();
        let mut branches = Vec::with_capacity(levels.len());
        for (r, level) in self.reducers.iter().zip(levels) {
            let y = match r {
                Reduce::Down(b) => ops::resize_to_integer_ratio(&b.forward(s, &level.features)?, target)?,
                Reduce::Same(b) => b.forward(s, &level.features)?,
                Reduce::Up(b) => b.forward(s, &ops::resize_to_integer_ratio(&level.features, target)?)?,
            };
            if (y.shape()[2], y.shape()[3]) != target {
                return Err(shape_err!("branch resized to {:?}, expected {:?}", &y.shape()[2..], target));
            }
            branches.push(y);
        }
        let features = if self.per_branch {
            let outs = branches
                .iter()
                .zip(&self.contexts)
                .map(|(b, c)| c.forward(s, b))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Var> = outs.iter().collect();
            ops::concat_channels(&refs)?
        } else {
            let refs: Vec<&Var> = branches.iter().collect();
            self.contexts[0].forward(s, &ops::concat_channels(&refs)?)?
        };
        Ok(BackgroundFeatures { features })
    }
}

/// Learnable scalars of one extractor: `beta` scales the guidance attention,
/// `theta` and `epsilon` weight the foreground and background features.
#[derive(Clone, Copy, Debug)]
pub struct DaeParams {
    pub beta: Scalar,
    pub theta: Scalar,
    pub epsilon: Scalar,
}

impl DaeParams {
    pub fn new(pb: &mut ParamBuilder<'_>) -> Self {
        Self {
            beta: Scalar::new(pb, "beta", 0.0),
            theta: Scalar::new(pb, "theta", 1.0),
            epsilon: Scalar::new(pb, "epsilon", 1.0),
        }
    }
}

/// Intermediate values of the guidance module, for inspection.
pub struct GuidanceTrace {
    /// Features resized to the guide-map resolution.
    pub upsampled: Var,
    /// Row-softmax channel relation `[B, C, C]`.
    pub relation: Var,
    /// Attention features `[B, C, H, W]`.
    pub attention: Var,
    /// `beta * attention + upsampled`.
    pub enhanced: Var,
}

/// Difference guidance: resize the features to the guide map, copy the map
/// across channels, relate the two with a channel-by-channel softmax
/// attention and add the attended features back with weight `beta`.
pub fn dgm_traced(m: &GuideMap, f: &BackgroundFeatures, beta: &Var, max_positions: usize) -> Result<GuidanceTrace> {
    let (b, c, _, _) = f.features.value().dims4()?;
    let (mb, _, hg, wg) = m.logits.value().dims4()?;
    if mb != b {
        return Err(shape_err!("guide batch {} vs feature batch {}", mb, b));
    }
    let n = hg * wg;
    if n > max_positions {
        return Err(Error::Resource {
            what: "difference guidance over guide-map positions".to_string(),
            requested: n,
            limit: max_positions,
        });
    }
    let upsampled = ops::resize_to_integer_ratio(&f.features, (hg, wg))?;
    let copied = ops::repeat_channels(&m.logits, c)?;
    let q = ops::reshape(&upsampled, &[b, c, n])?;
    let g = ops::reshape(&copied, &[b, c, n])?;
    let relation = ops::softmax_last(&ops::bmm(&q, false, &g, true)?)?;
    let attention = ops::reshape(&ops::bmm(&relation, false, &q, false)?, &[b, c, hg, wg])?;
    let enhanced = ops::add(&ops::scalar_mul(beta, &attention)?, &upsampled)?;
    Ok(GuidanceTrace {
        upsampled,
        relation,
        attention,
        enhanced,
    })
}

pub fn dgm(m: &GuideMap, f: &BackgroundFeatures, beta: &Var) -> Result<Var> {
    Ok(dgm_traced(m, f, beta, DEFAULT_MAX_GUIDE_POSITIONS)?.enhanced)
}

/// Difference enhancement fusion: with `P = sigmoid(m)`, `fg = P * E`,
/// `bg = (1 - P) * E`, combined per `mode`.
pub fn dem_features(e: &Var, m: &GuideMap, theta: &Var, epsilon: &Var, mode: DemMode) -> Result<Var> {
    let (eb, _, eh, ew) = e.value().dims4()?;
    let (mb, _, mh, mw) = m.logits.value().dims4()?;
    if (eb, eh, ew) != (mb, mh, mw) {
        return Err(shape_err!(
            "features {:?} are not aligned with guide map {:?}",
            e.shape(),
            m.logits.shape()
        ));
    }
    let p = ops::sigmoid(&m.logits);
    let fg = || -> Result<Var> { ops::scalar_mul(theta, &ops::mul_channel_broadcast(&p, e)?) };
    let bg = || -> Result<Var> {
        let q = ops::affine(&p, -1.0, 1.0);
        ops::scalar_mul(epsilon, &ops::mul_channel_broadcast(&q, e)?)
    };
    match mode {
        DemMode::ForegroundMinusBackground => ops::sub(&fg()?, &bg()?),
        DemMode::ForegroundPlusBackground => ops::add(&fg()?, &bg()?),
        DemMode::ForegroundOnly => fg(),
        DemMode::BackgroundOnly => bg(),
    }
}

/// Stage C: one guidance + enhancement pass.
#[derive(Clone, Debug)]
pub struct DifferenceAwareExtractor {
    pub params: DaeParams,
    pub use_dgm: bool,
    pub mode: DemMode,
    pub max_positions: usize,
    head1: ConvBlock,
    head2: ConvBlock,
    project: Conv2d,
}

impl DifferenceAwareExtractor {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, channels: usize) -> Self {
        let hc = cfg.head_channels;
        Self {
            params: DaeParams::new(pb),
            use_dgm: cfg.use_dgm,
            mode: cfg.dem_mode,
            max_positions: DEFAULT_MAX_GUIDE_POSITIONS,
            head1: ConvBlock::new(&mut pb.sub("head1"), ConvBlockSpec::new(channels, hc, 3, 1, 1), true),
            head2: ConvBlock::new(&mut pb.sub("head2"), ConvBlockSpec::new(hc, hc, 3, 1, 1), true),
            project: pointwise_conv(&mut pb.sub("project"), hc, 1),
        }
    }

    /// Enhanced features `E` (guidance output, or the resized features when
    /// guidance is disabled).
    pub fn guidance(&self, s: &Session<'_>, m: &GuideMap, f: &BackgroundFeatures) -> Result<Var> {
        if self.use_dgm {
            Ok(dgm_traced(m, f, &self.params.beta.var(s), self.max_positions)?.enhanced)
        } else {
            ops::resize_to_integer_ratio(&f.features, m.size())
        }
    }

    /// Difference features `D` and the refined logits.
    pub fn dem(&self, s: &Session<'_>, e: &Var, m: &GuideMap) -> Result<(Var, GuideMap)> {
        let d = dem_features(e, m, &self.params.theta.var(s), &self.params.epsilon.var(s), self.mode)?;
        let y = self.head2.forward(s, &self.head1.forward(s, &d)?)?;
        let refined = GuideMap::new(self.project.forward(s, &y)?)?;
        Ok((d, refined))
    }

    pub fn forward(&self, s: &Session<'_>, m: &GuideMap, f: &BackgroundFeatures) -> Result<GuideMap> {
        let e = self.guidance(s, m, f)?;
        Ok(self.dem(s, &e, m)?.1)
    }
}

/// Backbone plus the three decoder stages.
#[derive(Clone, Debug)]
pub struct DadModel {
    pub config: ModelConfig,
    pub partition: LayerPartition,
    pub backbone: Backbone,
    pub gmg: GuideMapGenerator,
    pub mff: MiddleFeatureFusion,
    pub extractors: Vec<DifferenceAwareExtractor>,
}

/// Everything produced by one forward pass, for inspection.
pub struct ForwardTrace {
    pub pyramid: FeaturePyramid,
    pub guide: GuideMap,
    pub background: BackgroundFeatures,
    /// Guide map followed by each extractor's refined map, at native resolution.
    pub native_maps: Vec<GuideMap>,
    pub outputs: DecoderOutputs,
}

impl DadModel {
    /// Validate `config` and register every parameter in `store`.
    pub fn new(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        let (kind, partition) = config.validate()?;
        let mut rng = crate::nn::new_rng(config.seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let backbone = Backbone::new(&mut pb.sub("backbone"), kind);
        let info = backbone.levels().to_vec();
        let a_channels: Vec<usize> = partition.stage_a().iter().map(|&l| info[l - 1].channels).collect();
        let b_levels: Vec<_> = partition.stage_b().iter().map(|&l| info[l - 1]).collect();
        let gmg = GuideMapGenerator::new(&mut pb.sub("gmg"), config, &a_channels);
        let mff = MiddleFeatureFusion::new(&mut pb.sub("mff"), config, &b_levels);
        let extractors = (0..config.dae_repeats)
            .map(|i| DifferenceAwareExtractor::new(&mut pb.sub(&format!("dae{}", i + 1)), config, mff.out_channels))
            .collect();
        Ok(Self {
            config: config.clone(),
            partition,
            backbone,
            gmg,
            mff,
            extractors,
        })
    }

    pub fn forward(&self, s: &Session<'_>, image: &Var) -> Result<DecoderOutputs> {
        Ok(self.forward_traced(s, image)?.outputs)
    }

    pub fn forward_traced(&self, s: &Session<'_>, image: &Var) -> Result<ForwardTrace> {
        let (_, _, h, w) = image.value().dims4()?;
        let pyramid = self.backbone.extract_features(s, image)?;
        let (a, b) = self.partition.select(&pyramid)?;
        let guide = self.gmg.forward(s, &a)?;
        let background = self.mff.forward(s, &b)?;
        let mut native = Vec::with_capacity(self.extractors.len() + 1);
        native.push(guide.clone());
        for dae in &self.extractors {
            let next = dae.forward(s, native.last().unwrap(), &background)?;
            native.push(next);
        }
        let maps = native
            .iter()
            .map(|m| ops::resize_bilinear(&m.logits, (h, w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardTrace {
            pyramid,
            guide,
            background,
            native_maps: native,
            outputs: DecoderOutputs { maps },
        })
    }

    /// Analytical receptive field of the stage-A context module.
    pub fn context_receptive_field(&self) -> usize {
        self.gmg.context.receptive_field()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::new_rng;
    use crate::Tensor;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Var {
        let mut rng = new_rng(seed);
        Var::constant(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)))
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            backbone: "synthetic".into(),
            branch_channels: 8,
            head_channels: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn synthetic_forward_shapes() {
        let mut store = ParamStore::new();
        let model = DadModel::new(&small_config(), &mut store).unwrap();
        let s = Session::eval(&store);
        let t = model.forward_traced(&s, &random(&[2, 3, 64, 64], 0)).unwrap();
        assert_eq!(t.guide.size(), (32, 32));
        assert_eq!(t.background.features.shape(), [2, 24, 8, 8]);
        assert_eq!(t.outputs.len(), 3);
        for m in &t.outputs.maps {
            assert_eq!(m.shape(), [2, 1, 64, 64]);
            assert!(m.value().is_finite());
        }
    }

    #[test]
    fn repeats_control_map_count() {
        for repeats in [1, 3] {
            let mut store = ParamStore::new();
            let cfg = ModelConfig {
                dae_repeats: repeats,
                ..small_config()
            };
            let model = DadModel::new(&cfg, &mut store).unwrap();
            let s = Session::eval(&store);
            let out = model.forward(&s, &random(&[1, 3, 64, 64], 1)).unwrap();
            assert_eq!(out.len(), repeats + 1);
        }
    }

    #[test]
    fn invalid_configs_fail_before_building() {
        let mut store = ParamStore::new();
        for cfg in [
            ModelConfig {
                backbone: "nope".into(),
                ..small_config()
            },
            ModelConfig {
                partition: "5".into(),
                ..small_config()
            },
            ModelConfig {
                dae_repeats: 0,
                ..small_config()
            },
        ] {
            assert!(DadModel::new(&cfg, &mut store).is_err());
            assert!(store.is_empty());
        }
    }

    #[test]
    fn fusion_variants_choose_base_resolution() {
        for (fusion, size) in [(Fusion::Middle, 8), (Fusion::BottomUp, 16), (Fusion::TopDown, 4)] {
            let mut store = ParamStore::new();
            let cfg = ModelConfig {
                fusion,
                ..small_config()
            };
            let model = DadModel::new(&cfg, &mut store).unwrap();
            let s = Session::eval(&store);
            let t = model.forward_traced(&s, &random(&[1, 3, 64, 64], 2)).unwrap();
            assert_eq!(t.background.features.shape(), [1, 24, size, size]);
        }
    }

    #[test]
    fn mff_on_zero_input_is_finite() {
        let mut store = ParamStore::new();
        let model = DadModel::new(&small_config(), &mut store).unwrap();
        let s = Session::eval(&store);
        let t = model.forward_traced(&s, &Var::constant(Tensor::zeros(&[1, 3, 64, 64]))).unwrap();
        assert!(t.background.features.value().is_finite());
    }

    #[test]
    fn dem_degenerate_cases() {
        let e = random(&[1, 4, 6, 6], 3);
        let theta = Var::constant(Tensor::scalar(1.0));
        let zero = Var::constant(Tensor::scalar(0.0));
        let m = GuideMap::new(random(&[1, 1, 6, 6], 4)).unwrap();
        let d = dem_features(&e, &m, &theta, &zero, DemMode::ForegroundMinusBackground).unwrap();
        let p = ops::sigmoid(&m.logits);
        let pe = ops::mul_channel_broadcast(&p, &e).unwrap();
        assert_eq!(d.value(), pe.value());

        let flat = GuideMap::new(Var::constant(Tensor::zeros(&[1, 1, 6, 6]))).unwrap();
        let d = dem_features(&e, &flat, &theta, &theta, DemMode::ForegroundMinusBackground).unwrap();
        assert!(d.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dem_rejects_misaligned_inputs() {
        let e = random(&[1, 4, 6, 6], 3);
        let m = GuideMap::new(random(&[1, 1, 3, 3], 4)).unwrap();
        let one = Var::constant(Tensor::scalar(1.0));
        assert!(matches!(
            dem_features(&e, &m, &one, &one, DemMode::ForegroundOnly),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dgm_rejects_fractional_ratio() {
        let f = BackgroundFeatures {
            features: random(&[1, 4, 3, 3], 5),
        };
        let m = GuideMap::new(random(&[1, 1, 8, 8], 6)).unwrap();
        let beta = Var::constant(Tensor::scalar(0.5));
        assert!(matches!(dgm(&m, &f, &beta), Err(Error::Shape(_))));
    }
}
