use super::{Initializer, ParamId, Session};
use crate::tensor::{Result, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    /// `kernel×kernel` convolution with "same" padding (`kernel / 2`).
    pub fn init(
        init: &mut Initializer<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let area = kernel * kernel;
        Self {
            weight: init.glorot(
                &format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                in_channels * area,
                out_channels * area,
            ),
            bias: init.zeros(&format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn forward_relu(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        s.graph.relu(y)
    }
}
