use super::{Initializer, LinearParams, Session};
use crate::tensor::{Result, TensorError, Var};

/// Output of an attention call; `weights` holds one row-stochastic
/// `[n_q×n_k]` matrix per head.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `softmax(q·kᵀ/√d, mask)·v`. `key_mask` (one flag per key) excludes keys
/// from every query's normalisation.
pub fn scaled_dot_attention(
    s: &mut Session<'_>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Attended> {
    let (sq, sk, sv) = (s.graph.shape(q), s.graph.shape(k), s.graph.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(TensorError::Dimension {
            op: "scaled_dot_attention",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    let d = sq[1];
    let n_k = sk[0];
    let kt = s.graph.transpose(k)?;
    let logits = s.graph.matmul(q, kt)?;
    let logits = s.graph.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = match key_mask {
        Some(mask) => s.graph.softmax_masked(logits, mask)?,
        None => s.graph.softmax_masked(logits, &vec![true; n_k])?,
    };
    let output = s.graph.matmul(weights, v)?;
    Ok(Attended {
        output,
        weights: vec![weights],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub model_dim: usize,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

impl MhaParams {
    pub fn init(init: &mut Initializer<'_>, name: &str, model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(TensorError::Validation(format!(
                "model_dim {model_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            model_dim,
            query: LinearParams::init(init, &format!("{name}.q"), model_dim, model_dim),
            key: LinearParams::init(init, &format!("{name}.k"), model_dim, model_dim),
            value: LinearParams::init(init, &format!("{name}.v"), model_dim, model_dim),
            output: LinearParams::init(init, &format!("{name}.o"), model_dim, model_dim),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Project, split into `heads` column blocks, attend per head,
    /// concatenate, project out.
    pub fn forward(&self, s: &mut Session<'_>, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Attended> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(TensorError::Validation(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        let qp = self.query.forward(s, q)?;
        let kp = self.key.forward(s, k)?;
        let vp = self.value.forward(s, v)?;
        let hd = self.head_dim();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    s.graph.slice_cols(qp, h * hd, hd)?,
                    s.graph.slice_cols(kp, h * hd, hd)?,
                    s.graph.slice_cols(vp, h * hd, hd)?,
                )
            };
            let att = scaled_dot_attention(s, qh, kh, vh, key_mask)?;
            outputs.push(att.output);
            weights.extend(att.weights);
        }
        let joined = if self.heads == 1 {
            outputs[0]
        } else {
            s.graph.concat_cols(&outputs)?
        };
        let output = self.output.forward(s, joined)?;
        Ok(Attended { output, weights })
    }
}
