//! Convolution blocks, the field expansion module (FEM), the dilated-pyramid
//! baseline and the analytical receptive-field calculator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::error::shape_err;
use crate::nn::{padding_for, BatchNorm2d, Conv2d, ParamBuilder, Session};
use crate::ops::{self, Conv2dArgs};
use crate::{Error, Result};

/// Geometry of one convolution block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvBlockSpec {
    /// Odd kernel with size-preserving padding `dilation * (kernel - 1) / 2`.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        debug_assert!(kernel % 2 == 1, "kernel must be odd");
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            padding: padding_for(kernel, dilation),
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 1)
    }

    pub fn args(&self) -> Conv2dArgs {
        Conv2dArgs {
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
        }
    }
}

/// Convolution, batch normalization and (optionally) ReLU, in that order.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub activation: bool,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, spec: ConvBlockSpec, activation: bool) -> Self {
        let conv = Conv2d::new(
            &mut pb.sub("conv"),
            spec.in_channels,
            spec.out_channels,
            spec.kernel,
            spec.args(),
            false,
        );
        let bn = BatchNorm2d::new(&mut pb.sub("bn"), spec.out_channels);
        Self {
            spec,
            conv,
            bn,
            activation,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, &y)?;
        Ok(if self.activation { ops::relu(&y) } else { y })
    }
}

/// Applies each block in turn.
#[derive(Clone, Debug, Default)]
pub struct BlockChain(pub Vec<ConvBlock>);

impl BlockChain {
    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let mut y = x.clone();
        for b in &self.0 {
            y = b.forward(s, &y)?;
        }
        Ok(y)
    }

    pub fn specs(&self) -> Vec<ConvBlockSpec> {
        self.0.iter().map(|b| b.spec).collect()
    }
}

/// Receptive-field side length of a chain of blocks, via
/// `rf += (k - 1) * dilation * jump; jump *= stride`.
pub fn receptive_field(chain: &[ConvBlockSpec]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for b in chain {
        rf += (b.kernel - 1) * b.dilation * jump;
        jump *= b.stride;
    }
    rf
}

pub const FEM_PATH1_DILATIONS: [usize; 4] = [4, 8, 16, 32];
pub const FEM_PATH3_DILATIONS: [usize; 4] = [2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct FemConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch_channels: usize,
    pub path1_dilations: [usize; 4],
    pub path3_dilations: [usize; 4],
    /// Disables every ReLU; only used to probe the wiring for linearity.
    pub activation: bool,
}

impl FemConfig {
    pub fn new(in_channels: usize, out_channels: usize, branch_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            branch_channels,
            path1_dilations: FEM_PATH1_DILATIONS,
            path3_dilations: FEM_PATH3_DILATIONS,
            activation: true,
        }
    }

    /// The ablation variant with every dilation rate set to 1.
    pub fn without_dilation(mut self) -> Self {
        self.path1_dilations = [1; 4];
        self.path3_dilations = [1; 4];
        self
    }
}

/// Field expansion module: three parallel paths (a dilated 3x3 stack, a plain
/// 1x1, a second dilated stack), concatenated and fused by a 1x1 block, plus a
/// 1x1-projected residual shortcut.
#[derive(Clone, Debug)]
pub struct Fem {
    pub config: FemConfig,
    path1: BlockChain,
    path2: BlockChain,
    path3: BlockChain,
    fuse: ConvBlock,
    shortcut: ConvBlock,
}

impl Fem {
    pub fn new(pb: &mut ParamBuilder<'_>, config: FemConfig) -> Self {
        let act = config.activation;
        let bc = config.branch_channels;
        let dilated = |pb: &mut ParamBuilder<'_>, name: &str, rates: [usize; 4]| {
            let mut pb = pb.sub(name);
            let mut blocks = vec![ConvBlock::new(
                &mut pb.sub("0"),
                ConvBlockSpec::pointwise(config.in_channels, bc),
                act,
            )];
            for (i, &d) in rates.iter().enumerate() {
                blocks.push(ConvBlock::new(
                    &mut pb.sub(&format!("{}", i + 1)),
                    ConvBlockSpec::new(bc, bc, 3, 1, d),
                    act,
                ));
            }
            BlockChain(blocks)
        };
        let path1 = dilated(pb, "path1", config.path1_dilations);
        let path2 = BlockChain(vec![ConvBlock::new(
            &mut pb.sub("path2.0"),
            ConvBlockSpec::pointwise(config.in_channels, bc),
            act,
        )]);
        let path3 = dilated(pb, "path3", config.path3_dilations);
        let fuse = ConvBlock::new(
            &mut pb.sub("fuse"),
            ConvBlockSpec::pointwise(3 * bc, config.out_channels),
            false,
        );
        let shortcut = ConvBlock::new(
            &mut pb.sub("shortcut"),
            ConvBlockSpec::pointwise(config.in_channels, config.out_channels),
            false,
        );
        Self {
            config,
            path1,
            path2,
            path3,
            fuse,
            shortcut,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        check_channels(x, self.config.in_channels, "FEM")?;
        let p1 = self.path1.forward(s, x)?;
        let p2 = self.path2.forward(s, x)?;
        let p3 = self.path3.forward(s, x)?;
        let cat = ops::concat_channels(&[&p1, &p2, &p3])?;
        let fused = self.fuse.forward(s, &cat)?;
        let short = self.shortcut.forward(s, x)?;
        let sum = ops::add(&fused, &short)?;
        Ok(if self.config.activation {
            ops::relu(&sum)
        } else {
            sum
        })
    }

    /// Block chains of the three paths, in path order.
    pub fn path_specs(&self) -> [Vec<ConvBlockSpec>; 3] {
        [self.path1.specs(), self.path2.specs(), self.path3.specs()]
    }

    /// Largest analytical receptive field over the paths, followed by the
    /// pointwise fuse block.
    pub fn receptive_field(&self) -> usize {
        self.path_specs()
            .iter()
            .map(|p| receptive_field(p))
            .max()
            .unwrap_or(1)
    }
}

/// Parallel single dilated convolutions (rate 1 is a 1x1 block), concatenated
/// and fused by a 1x1 block. Same in/out contract as [`Fem`].
#[derive(Clone, Debug)]
pub struct DilatedPyramid {
    pub in_channels: usize,
    pub out_channels: usize,
    pub rates: Vec<usize>,
    branches: Vec<ConvBlock>,
    fuse: ConvBlock,
}

pub const PYRAMID_RATES: [usize; 4] = [1, 6, 12, 18];

impl DilatedPyramid {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        branch_channels: usize,
        rates: &[usize],
    ) -> Self {
        let branches: Vec<ConvBlock> = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let spec = if r == 1 {
                    ConvBlockSpec::pointwise(in_channels, branch_channels)
                } else {
                    ConvBlockSpec::new(in_channels, branch_channels, 3, 1, r)
                };
                ConvBlock::new(&mut pb.sub(&format!("branch{i}")), spec, true)
            })
            .collect();
        let fuse = ConvBlock::new(
            &mut pb.sub("fuse"),
            ConvBlockSpec::pointwise(branch_channels * rates.len(), out_channels),
            true,
        );
        Self {
            in_channels,
            out_channels,
            rates: rates.to_vec(),
            branches,
            fuse,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        check_channels(x, self.in_channels, "dilated pyramid")?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(s, x))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Var> = outs.iter().collect();
        self.fuse.forward(s, &ops::concat_channels(&refs)?)
    }

    pub fn branch_specs(&self) -> Vec<ConvBlockSpec> {
        self.branches.iter().map(|b| b.spec).collect()
    }

    pub fn receptive_field(&self) -> usize {
        self.branch_specs()
            .iter()
            .map(|b| receptive_field(core::slice::from_ref(b)))
            .max()
            .unwrap_or(1)
    }
}

/// Which context module enlarges the receptive field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ContextVariant {
    Fem,
    FemNoDilation,
    DilatedPyramid,
}

impl ContextVariant {
    pub const ALL: [ContextVariant; 3] = [
        ContextVariant::Fem,
        ContextVariant::FemNoDilation,
        ContextVariant::DilatedPyramid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextVariant::Fem => "fem",
            ContextVariant::FemNoDilation => "fem_no_dilation",
            ContextVariant::DilatedPyramid => "dilated_pyramid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fem_variant {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub enum ContextModule {
    Fem(Fem),
    Pyramid(DilatedPyramid),
}

impl ContextModule {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        variant: ContextVariant,
        in_channels: usize,
        out_channels: usize,
        branch_channels: usize,
    ) -> Self {
        let cfg = FemConfig::new(in_channels, out_channels, branch_channels);
        match variant {
            ContextVariant::Fem => ContextModule::Fem(Fem::new(pb, cfg)),
            ContextVariant::FemNoDilation => ContextModule::Fem(Fem::new(pb, cfg.without_dilation())),
            ContextVariant::DilatedPyramid => ContextModule::Pyramid(DilatedPyramid::new(
                pb,
                in_channels,
                out_channels,
                branch_channels,
                &PYRAMID_RATES,
            )),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        match self {
            ContextModule::Fem(m) => m.forward(s, x),
            ContextModule::Pyramid(m) => m.forward(s, x),
        }
    }

    pub fn receptive_field(&self) -> usize {
        match self {
            ContextModule::Fem(m) => m.receptive_field(),
            ContextModule::Pyramid(m) => m.receptive_field(),
        }
    }
}

pub(crate) fn check_channels(x: &Var, expected: usize, what: &str) -> Result<()> {
    let (_, c, _, _) = x.value().dims4()?;
    if c != expected {
        return Err(shape_err!("{} expects {} channels, got {}", what, expected, c));
    }
    Ok(())
}

/// One row of the receptive-field report.
#[derive(Clone, Debug, PartialEq)]
pub struct RfRow {
    pub module: String,
    pub path: String,
    pub receptive_field: usize,
}

/// Analytical receptive fields of the FEM paths, the no-dilation variant and
/// the dilated-pyramid branches.
pub fn receptive_field_table(branch_channels: usize) -> Vec<RfRow> {
    let stack = |rates: [usize; 4]| {
        let mut chain = vec![ConvBlockSpec::pointwise(branch_channels, branch_channels)];
        chain.extend(rates.iter().map(|&d| ConvBlockSpec::new(branch_channels, branch_channels, 3, 1, d)));
        chain
    };
    let mut rows = Vec::new();
    for (module, p1, p3) in [
        ("fem", FEM_PATH1_DILATIONS, FEM_PATH3_DILATIONS),
        ("fem_no_dilation", [1; 4], [1; 4]),
    ] {
        rows.push(RfRow {
            module: module.into(),
            path: "path1".into(),
            receptive_field: receptive_field(&stack(p1)),
        });
        rows.push(RfRow {
            module: module.into(),
            path: "path2".into(),
            receptive_field: receptive_field(&[ConvBlockSpec::pointwise(branch_channels, branch_channels)]),
        });
        rows.push(RfRow {
            module: module.into(),
            path: "path3".into(),
            receptive_field: receptive_field(&stack(p3)),
        });
    }
    for r in PYRAMID_RATES {
        let spec = if r == 1 {
            ConvBlockSpec::pointwise(branch_channels, branch_channels)
        } else {
            ConvBlockSpec::new(branch_channels, branch_channels, 3, 1, r)
        };
        rows.push(RfRow {
            module: "dilated_pyramid".into(),
            path: format!("rate{r}"),
            receptive_field: receptive_field(&[spec]),
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{new_rng, ParamStore};
    use crate::Tensor;

    fn input(shape: &[usize]) -> Var {
        Var::constant(Tensor::from_fn(shape, |i| ((i * 37 % 101) as f64) / 50.0 - 1.0))
    }

    fn block_shape(x: &[usize], spec: ConvBlockSpec) -> Vec<usize> {
        let mut store = ParamStore::new();
        let mut rng = new_rng(1);
        let b = ConvBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), spec, true);
        let s = Session::eval(&store);
        b.forward(&s, &input(x)).unwrap().shape().to_vec()
    }

    #[test]
    fn conv_block_shapes() {
        assert_eq!(block_shape(&[2, 8, 32, 32], ConvBlockSpec::new(8, 16, 3, 1, 1)), [2, 16, 32, 32]);
        assert_eq!(block_shape(&[2, 8, 32, 32], ConvBlockSpec::new(8, 16, 3, 2, 1)), [2, 16, 16, 16]);
        let d8 = ConvBlockSpec::new(8, 8, 3, 1, 8);
        assert_eq!(d8.padding, 8);
        assert_eq!(block_shape(&[2, 8, 32, 32], d8), [2, 8, 32, 32]);
        // odd sizes round up under stride 2
        assert_eq!(block_shape(&[1, 8, 13, 13], ConvBlockSpec::new(8, 4, 3, 2, 1)), [1, 4, 7, 7]);
    }

    #[test]
    fn conv_block_rejects_channel_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = new_rng(1);
        let b = ConvBlock::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            ConvBlockSpec::new(8, 16, 3, 1, 1),
            true,
        );
        let s = Session::eval(&store);
        assert!(matches!(b.forward(&s, &input(&[1, 4, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn fem_preserves_resolution() {
        let mut store = ParamStore::new();
        let mut rng = new_rng(3);
        let fem = Fem::new(&mut ParamBuilder::new(&mut store, &mut rng), FemConfig::new(64, 96, 32));
        let s = Session::eval(&store);
        assert_eq!(fem.forward(&s, &input(&[1, 64, 26, 26])).unwrap().shape(), [1, 96, 26, 26]);

        let mut store = ParamStore::new();
        let fem = Fem::new(&mut ParamBuilder::new(&mut store, &mut rng), FemConfig::new(8, 12, 4));
        let s = Session::eval(&store);
        for size in [1, 2, 5, 13] {
            let y = fem.forward(&s, &input(&[1, 8, size, size])).unwrap();
            assert_eq!(&y.shape()[2..], [size, size]);
        }
    }

    #[test]
    fn fem_no_dilation_has_smaller_field() {
        let mut store = ParamStore::new();
        let mut rng = new_rng(3);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let full = ContextModule::new(&mut pb.sub("a"), ContextVariant::Fem, 8, 12, 4);
        let plain = ContextModule::new(&mut pb.sub("b"), ContextVariant::FemNoDilation, 8, 12, 4);
        assert_eq!(full.receptive_field(), 121);
        assert_eq!(plain.receptive_field(), 9);
        let s = Session::eval(&store);
        let x = input(&[1, 8, 13, 13]);
        assert_eq!(full.forward(&s, &x).unwrap().shape(), plain.forward(&s, &x).unwrap().shape());
    }

    #[test]
    fn dilated_pyramid_shapes() {
        let mut store = ParamStore::new();
        let mut rng = new_rng(5);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let aspp = DilatedPyramid::new(&mut pb.sub("a"), 64, 96, 32, &PYRAMID_RATES);
        let single = DilatedPyramid::new(&mut pb.sub("b"), 64, 96, 32, &[1]);
        let s = Session::eval(&store);
        let x = input(&[1, 64, 26, 26]);
        assert_eq!(aspp.forward(&s, &x).unwrap().shape(), [1, 96, 26, 26]);
        assert_eq!(single.forward(&s, &x).unwrap().shape(), [1, 96, 26, 26]);
        assert_eq!(aspp.receptive_field(), 37);
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(&[ConvBlockSpec::new(1, 1, 3, 1, 1)]), 3);
        let table = receptive_field_table(32);
        let get = |m: &str, p: &str| {
            table
                .iter()
                .find(|r| r.module == m && r.path == p)
                .unwrap()
                .receptive_field
        };
        assert_eq!(get("fem", "path1"), 121);
        assert_eq!(get("fem", "path2"), 1);
        assert_eq!(get("fem", "path3"), 61);
        assert_eq!(get("fem_no_dilation", "path1"), 9);
        assert_eq!(get("fem_no_dilation", "path3"), 9);
        assert_eq!(get("dilated_pyramid", "rate18"), 37);
    }

    #[test]
    fn stride_scales_later_dilations() {
        let chain = [ConvBlockSpec::new(1, 1, 3, 2, 1), ConvBlockSpec::new(1, 1, 3, 1, 2)];
        assert_eq!(receptive_field(&chain), 1 + 2 + 2 * 2 * 2);
    }
}
