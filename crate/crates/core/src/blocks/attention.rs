use serde::{Deserialize, Serialize};

use crate::blocks::layers::{Conv, LayerBuilder, Session};
use crate::blocks::residual::{ResidualBlock, ResidualBlockSpec};
use crate::engine::{Padding, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest input extent the mask branch accepts (two pooling levels).
pub const MIN_ATTENTION_SPATIAL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlockSpec {
    pub channels: usize,
    /// Input height and width.
    pub spatial: usize,
}

impl AttentionBlockSpec {
    pub fn new(channels: usize, spatial: usize) -> Self {
        AttentionBlockSpec { channels, spatial }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("attention block needs >= 1 channel".into()));
        }
        if self.spatial < MIN_ATTENTION_SPATIAL {
            return Err(Error::Config(format!(
                "attention block spatial extent {} is below {MIN_ATTENTION_SPATIAL}",
                self.spatial
            )));
        }
        Ok(())
    }

    /// Width of the bottleneck inside the trunk and mask residual units.
    pub fn inner_channels(&self) -> usize {
        (self.channels / 4).max(1)
    }

    /// Spatial extents visited by the mask encoder: input, after the first
    /// pooling, after the second pooling.
    pub fn mask_levels(&self) -> [usize; 3] {
        let first = self.spatial.div_ceil(2);
        [self.spatial, first, first.div_ceil(2)]
    }
}

/// What the mask branch contributes to the gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskSource {
    Learned,
    /// Replace `M(x)` with a constant tensor.
    Constant(f32),
}

/// Soft attention block: `G(x) = (1 + M(x)) * T(x)` where the trunk `T` is two
/// residual blocks and the mask `M` is a max-pool/residual encoder, a bilinear
/// decoder back to the input size, two 1x1 convolutions and a sigmoid.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    spec: AttentionBlockSpec,
    trunk: [ResidualBlock; 2],
    encoder: [ResidualBlock; 2],
    head: [Conv; 2],
}

impl AttentionBlock {
    pub fn new(b: &mut LayerBuilder<'_>, name: &str, spec: AttentionBlockSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let unit = ResidualBlockSpec::new(c, spec.inner_channels(), c, 1);
        let mut res = |part: &str| ResidualBlock::new(b, &format!("{name}.{part}"), unit);
        let trunk = [res("trunk1")?, res("trunk2")?];
        let encoder = [res("mask.down1")?, res("mask.down2")?];
        let head = [
            b.conv(&format!("{name}.mask.conv1"), c, c, 1, 1, Padding::Same)?,
            b.conv(&format!("{name}.mask.conv2"), c, c, 1, 1, Padding::Same)?,
        ];
        Ok(AttentionBlock {
            spec,
            trunk,
            encoder,
            head,
        })
    }

    pub fn spec(&self) -> &AttentionBlockSpec {
        &self.spec
    }

    fn check_input(&self, s: &Session<'_>, x: Var) -> Result<()> {
        let (_, c, h, w) = s.value(x).dims4()?;
        let AttentionBlockSpec { channels, spatial } = self.spec;
        if c != channels || h != spatial || w != spatial {
            return Err(Error::shape(
                "attention_block",
                format!(
                    "expected N x {channels} x {spatial} x {spatial}, got {:?}",
                    s.value(x).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn trunk(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.check_input(s, x)?;
        let h = self.trunk[0].forward(s, x)?;
        self.trunk[1].forward(s, h)
    }

    /// The sigmoid gate `M(x)`, same shape as the input.
    pub fn mask(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.check_input(s, x)?;
        let [outer, inner, _] = self.spec.mask_levels();
        let tape = s.tape_mut();
        let h = tape.maxpool2d(x, 2, 2, Padding::Same)?;
        let h = self.encoder[0].forward(s, h)?;
        let h = s.tape_mut().maxpool2d(h, 2, 2, Padding::Same)?;
        let h = self.encoder[1].forward(s, h)?;
        let h = s.tape_mut().resize_bilinear(h, inner, inner)?;
        let h = s.tape_mut().resize_bilinear(h, outer, outer)?;
        let h = self.head[0].forward(s, h)?;
        let h = self.head[1].forward(s, h)?;
        Ok(s.tape_mut().sigmoid(h))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.forward_with_mask(s, x, MaskSource::Learned)
    }

    pub fn forward_with_mask(
        &self,
        s: &mut Session<'_>,
        x: Var,
        source: MaskSource,
    ) -> Result<Var> {
        let t = self.trunk(s, x)?;
        let m = match source {
            MaskSource::Learned => self.mask(s, x)?,
            MaskSource::Constant(v) => {
                let shape = s.value(t).shape().to_vec();
                s.input(Tensor::full(&shape, v))
            }
        };
        let gate = s.tape_mut().add_scalar(m, 1.0);
        s.tape_mut().mul(gate, t)
    }
}
