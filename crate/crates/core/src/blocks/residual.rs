use serde::{Deserialize, Serialize};

use crate::blocks::layers::{BatchNorm, Conv, LayerBuilder, Session};
use crate::engine::{Padding, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualBlockSpec {
    pub fn new(
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        ResidualBlockSpec {
            in_channels,
            mid_channels,
            out_channels,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mid_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "residual block channels must be >= 1, got {self:?}"
            )));
        }
        if self.mid_channels > self.out_channels {
            return Err(Error::Config(format!(
                "residual block bottleneck {} exceeds output width {}",
                self.mid_channels, self.out_channels
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!(
                "residual block stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        Ok(())
    }

    pub fn has_identity_shortcut(&self) -> bool {
        self.in_channels == self.out_channels && self.stride == 1
    }
}

/// One ReLU -> batch norm -> convolution unit of the main path.
#[derive(Clone, Debug)]
pub struct PreActConv {
    pub norm: BatchNorm,
    pub conv: Conv,
}

impl PreActConv {
    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let x = s.tape_mut().relu(x);
        let x = self.norm.forward(s, x)?;
        self.conv.forward(s, x)
    }
}

/// Full pre-activation bottleneck block: three ReLU/BN/conv units
/// (1x1 -> mid, 3x3 -> mid carrying the stride, 1x1 -> out) added to an
/// identity or 1x1 projection shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    spec: ResidualBlockSpec,
    units: [PreActConv; 3],
    shortcut: Option<Conv>,
}

impl ResidualBlock {
    pub fn new(b: &mut LayerBuilder<'_>, name: &str, spec: ResidualBlockSpec) -> Result<Self> {
        spec.validate()?;
        let ResidualBlockSpec {
            in_channels: cin,
            mid_channels: mid,
            out_channels: cout,
            stride,
        } = spec;
        let mut unit = |i: usize, cin: usize, cout: usize, k: usize, stride: usize| -> Result<_> {
            Ok(PreActConv {
                norm: b.batchnorm(&format!("{name}.bn{i}"), cin)?,
                conv: b.conv(
                    &format!("{name}.conv{i}"),
                    cin,
                    cout,
                    k,
                    stride,
                    Padding::Same,
                )?,
            })
        };
        let units = [
            unit(1, cin, mid, 1, 1)?,
            unit(2, mid, mid, 3, stride)?,
            unit(3, mid, cout, 1, 1)?,
        ];
        let shortcut = if spec.has_identity_shortcut() {
            None
        } else {
            Some(b.conv(
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                stride,
                Padding::Same,
            )?)
        };
        Ok(ResidualBlock {
            spec,
            units,
            shortcut,
        })
    }

    pub fn spec(&self) -> &ResidualBlockSpec {
        &self.spec
    }

    pub fn units(&self) -> &[PreActConv; 3] {
        &self.units
    }

    pub fn shortcut(&self) -> Option<&Conv> {
        self.shortcut.as_ref()
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (_, c, _, _) = s.value(x).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "residual_block",
                format!(
                    "input {:?} has {c} channels, block expects {}",
                    s.value(x).shape(),
                    self.spec.in_channels
                ),
            ));
        }
        let mut h = x;
        for unit in &self.units {
            h = unit.forward(s, h)?;
        }
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(s, x)?,
            None => x,
        };
        s.tape_mut().add(h, skip)
    }
}
