//! Dual residual attention: position (spatial) and channel self-attention,
//! each with a zero-initialized learnable residual scale, each followed by a
//! 3x3 convolution block, fused by addition.

use alloc::string::ToString;

use crate::autograd::Var;
use crate::blocks::{check_channels, ConvBlock, ConvBlockSpec};
use crate::nn::{Conv2d, ParamBuilder, Scalar, Session};
use crate::ops::{self, Conv2dArgs};
use crate::{Error, Result};

/// Default bound on `H * W` for materializing the spatial affinity matrix.
pub const DEFAULT_MAX_POSITIONS: usize = 4096;

const POINTWISE: Conv2dArgs = Conv2dArgs {
    stride: 1,
    padding: 0,
    dilation: 1,
};

#[derive(Clone, Debug)]
pub struct PositionAttention {
    pub channels: usize,
    pub max_positions: usize,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    pub gamma: Scalar,
}

impl PositionAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Self {
        let reduced = (channels / 8).max(1);
        Self {
            channels,
            max_positions: DEFAULT_MAX_POSITIONS,
            query: Conv2d::new(&mut pb.sub("query"), channels, reduced, 1, POINTWISE, true),
            key: Conv2d::new(&mut pb.sub("key"), channels, reduced, 1, POINTWISE, true),
            value: Conv2d::new(&mut pb.sub("value"), channels, channels, 1, POINTWISE, true),
            gamma: Scalar::new(pb, "gamma", 0.0),
        }
    }

    /// Row-softmax spatial affinity, `[B, N, N]` with `N = H * W`.
    pub fn affinity(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        check_channels(x, self.channels, "position attention")?;
        let (b, _, h, w) = x.value().dims4()?;
        let n = h * w;
        if n > self.max_positions {
            return Err(Error::Resource {
                what: "position attention over H*W positions".to_string(),
                requested: n,
                limit: self.max_positions,
            });
        }
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, x)?;
        let cq = q.shape()[1];
        let q = ops::reshape(&q, &[b, cq, n])?;
        let k = ops::reshape(&k, &[b, cq, n])?;
        ops::softmax_last(&ops::bmm(&q, true, &k, false)?)
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let att = self.affinity(s, x)?;
        let (b, c, h, w) = x.value().dims4()?;
        let v = ops::reshape(&self.value.forward(s, x)?, &[b, c, h * w])?;
        let out = ops::reshape(&ops::bmm(&v, false, &att, true)?, &[b, c, h, w])?;
        ops::add(&ops::scalar_mul(&self.gamma.var(s), &out)?, x)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub gamma: Scalar,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>) -> Self {
        Self {
            gamma: Scalar::new(pb, "gamma", 0.0),
        }
    }

    /// Row-softmax of the channel Gram matrix, `[B, C, C]`.
    pub fn affinity(&self, x: &Var) -> Result<Var> {
        let (b, c, h, w) = x.value().dims4()?;
        let flat = ops::reshape(x, &[b, c, h * w])?;
        ops::softmax_last(&ops::bmm(&flat, false, &flat, true)?)
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let att = self.affinity(x)?;
        let (b, c, h, w) = x.value().dims4()?;
        let flat = ops::reshape(x, &[b, c, h * w])?;
        let out = ops::reshape(&ops::bmm(&att, false, &flat, false)?, &[b, c, h, w])?;
        ops::add(&ops::scalar_mul(&self.gamma.var(s), &out)?, x)
    }
}

#[derive(Clone, Debug)]
pub struct DualResidualAttention {
    pub position: PositionAttention,
    pub channel: ChannelAttention,
    pub position_block: ConvBlock,
    pub channel_block: ConvBlock,
}

impl DualResidualAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Self {
        Self::with_activation(pb, channels, true)
    }

    /// `activation = false` drops the ReLU from both conv blocks.
    pub fn with_activation(pb: &mut ParamBuilder<'_>, channels: usize, activation: bool) -> Self {
        let spec = ConvBlockSpec::new(channels, channels, 3, 1, 1);
        Self {
            position: PositionAttention::new(&mut pb.sub("position"), channels),
            channel: ChannelAttention::new(&mut pb.sub("channel")),
            position_block: ConvBlock::new(&mut pb.sub("position_block"), spec, activation),
            channel_block: ConvBlock::new(&mut pb.sub("channel_block"), spec, activation),
        }
    }

    /// The two branch outputs before fusion.
    pub fn branches(&self, s: &Session<'_>, x: &Var) -> Result<(Var, Var)> {
        let p = self.position_block.forward(s, &self.position.forward(s, x)?)?;
        let c = self.channel_block.forward(s, &self.channel.forward(s, x)?)?;
        Ok((p, c))
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let (p, c) = self.branches(s, x)?;
        ops::add(&p, &c)
    }
}
