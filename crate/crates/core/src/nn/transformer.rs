use super::{Attended, Initializer, LinearParams, MhaParams, ParamId, Session};
use crate::tensor::{Result, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(init: &mut Initializer<'_>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.ones(&format!("{name}.gamma"), &[dim]),
            beta: init.zeros(&format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Two-layer `linear → relu → linear` block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub expand: LinearParams,
    pub contract: LinearParams,
}

impl FeedForward {
    pub fn init(init: &mut Initializer<'_>, name: &str, model_dim: usize, ffn_dim: usize) -> Self {
        Self {
            expand: LinearParams::init(init, &format!("{name}.expand"), model_dim, ffn_dim),
            contract: LinearParams::init(init, &format!("{name}.contract"), ffn_dim, model_dim),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.expand.forward(s, x)?;
        let h = s.graph.relu(h)?;
        self.contract.forward(s, h)
    }
}

fn residual_norm(s: &mut Session<'_>, ln: &LayerNormParams, x: Var, update: Var) -> Result<Var> {
    let sum = s.graph.add(x, update)?;
    ln.forward(s, sum)
}

fn check_width(s: &Session<'_>, x: Var, model_dim: usize, op: &'static str) -> Result<()> {
    let shape = s.graph.shape(x);
    if shape.len() != 2 || shape[1] != model_dim {
        return Err(TensorError::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![model_dim],
        });
    }
    Ok(())
}

/// Post-norm encoder layer: `x ← LN(x + SelfAttn(x)); x ← LN(x + FFN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub self_attn: MhaParams,
    pub ffn: FeedForward,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub output: Var,
    /// Self-attention weights, one `[n×n]` matrix per head.
    pub self_attention: Vec<Var>,
}

impl EncoderLayerParams {
    pub fn init(
        init: &mut Initializer<'_>,
        name: &str,
        model_dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MhaParams::init(init, &format!("{name}.self_attn"), model_dim, heads)?,
            ffn: FeedForward::init(init, &format!("{name}.ffn"), model_dim, ffn_dim),
            norm1: LayerNormParams::init(init, &format!("{name}.norm1"), model_dim),
            norm2: LayerNormParams::init(init, &format!("{name}.norm2"), model_dim),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<LayerOutput> {
        check_width(s, x, self.self_attn.model_dim, "encoder_layer")?;
        let Attended { output, weights } = self.self_attn.forward(s, x, x, x, None)?;
        let x = residual_norm(s, &self.norm1, x, output)?;
        let ff = self.ffn.forward(s, x)?;
        let x = residual_norm(s, &self.norm2, x, ff)?;
        Ok(LayerOutput {
            output: x,
            self_attention: weights,
        })
    }
}

/// Post-norm decoder layer: self-attention over queries, cross-attention
/// into `memory` (keys and values), feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_attn: MhaParams,
    pub cross_attn: MhaParams,
    pub ffn: FeedForward,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub norm3: LayerNormParams,
}

impl DecoderLayerParams {
    pub fn init(
        init: &mut Initializer<'_>,
        name: &str,
        model_dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MhaParams::init(init, &format!("{name}.self_attn"), model_dim, heads)?,
            cross_attn: MhaParams::init(init, &format!("{name}.cross_attn"), model_dim, heads)?,
            ffn: FeedForward::init(init, &format!("{name}.ffn"), model_dim, ffn_dim),
            norm1: LayerNormParams::init(init, &format!("{name}.norm1"), model_dim),
            norm2: LayerNormParams::init(init, &format!("{name}.norm2"), model_dim),
            norm3: LayerNormParams::init(init, &format!("{name}.norm3"), model_dim),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, queries: Var, memory: Var) -> Result<LayerOutput> {
        check_width(s, queries, self.self_attn.model_dim, "decoder_layer")?;
        check_width(s, memory, self.self_attn.model_dim, "decoder_layer memory")?;
        let sa = self.self_attn.forward(s, queries, queries, queries, None)?;
        let x = residual_norm(s, &self.norm1, queries, sa.output)?;
        let ca = self.cross_attn.forward(s, x, memory, memory, None)?;
        let x = residual_norm(s, &self.norm2, x, ca.output)?;
        let ff = self.ffn.forward(s, x)?;
        let x = residual_norm(s, &self.norm3, x, ff)?;
        Ok(LayerOutput {
            output: x,
            self_attention: sa.weights,
        })
    }
}
