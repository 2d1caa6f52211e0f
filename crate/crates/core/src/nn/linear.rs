use super::{Initializer, ParamId, Session};
use crate::tensor::{Result, TensorError, Var};

/// `x·W + b` with `W: in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn init(init: &mut Initializer<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: init.glorot(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim),
            bias: init.zeros(&format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// Applies to `[n×in]` or a single `[in]` vector (returned as `[out]`).
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) || shape.len() > 2 {
            return Err(TensorError::Dimension {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let x2 = if shape.len() == 1 {
            s.graph.reshape(x, &[1, self.in_dim])?
        } else {
            x
        };
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(x2, w)?;
        let y = s.graph.add(y, b)?;
        if shape.len() == 1 {
            s.graph.reshape(y, &[self.out_dim])
        } else {
            Ok(y)
        }
    }
}
