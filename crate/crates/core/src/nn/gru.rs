use super::{Initializer, LinearParams, Session};
use crate::tensor::{Result, TensorError, Var};

/// Gated recurrent unit:
///
/// ```text
/// r = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// z = σ(x·W_iz + b_iz + h·W_hz + b_hz)
/// n = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = n + z ⊙ (h − n)          // = (1 − z)⊙n + z⊙h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub input_reset: LinearParams,
    pub input_update: LinearParams,
    pub input_candidate: LinearParams,
    pub hidden_reset: LinearParams,
    pub hidden_update: LinearParams,
    pub hidden_candidate: LinearParams,
}

#[derive(Debug, Clone)]
pub struct GruOutput {
    /// `[t×hidden]`, row `i` is the state after token `i`.
    pub per_step: Var,
    /// `[hidden]`, the state after the last token.
    pub final_state: Var,
}

impl GruParams {
    pub fn init(init: &mut Initializer<'_>, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let lin = |init: &mut Initializer<'_>, part: &str, i: usize| {
            LinearParams::init(init, &format!("{name}.{part}"), i, hidden_dim)
        };
        Self {
            input_dim,
            hidden_dim,
            input_reset: lin(init, "input_reset", input_dim),
            input_update: lin(init, "input_update", input_dim),
            input_candidate: lin(init, "input_candidate", input_dim),
            hidden_reset: lin(init, "hidden_reset", hidden_dim),
            hidden_update: lin(init, "hidden_update", hidden_dim),
            hidden_candidate: lin(init, "hidden_candidate", hidden_dim),
        }
    }

    /// Run the recurrence from `h₀ = 0` over `tokens: [t×input_dim]`.
    pub fn forward(&self, s: &mut Session<'_>, tokens: Var) -> Result<GruOutput> {
        let shape = s.graph.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(TensorError::Dimension {
                op: "gru",
                lhs: shape,
                rhs: vec![self.input_dim],
            });
        }
        let steps = shape[0];
        if steps == 0 {
            return Err(TensorError::Validation("empty sequence".into()));
        }
        // Input projections for all steps at once.
        let xr = self.input_reset.forward(s, tokens)?;
        let xz = self.input_update.forward(s, tokens)?;
        let xn = self.input_candidate.forward(s, tokens)?;
        let mut h = s.constant(crate::tensor::Tensor::zeros(&[1, self.hidden_dim]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xr_t = s.graph.slice_rows(xr, t, 1)?;
            let xz_t = s.graph.slice_rows(xz, t, 1)?;
            let xn_t = s.graph.slice_rows(xn, t, 1)?;
            let hr = self.hidden_reset.forward(s, h)?;
            let hz = self.hidden_update.forward(s, h)?;
            let hn = self.hidden_candidate.forward(s, h)?;
            let r = s.graph.add(xr_t, hr)?;
            let r = s.graph.sigmoid(r)?;
            let z = s.graph.add(xz_t, hz)?;
            let z = s.graph.sigmoid(z)?;
            let gated = s.graph.mul(r, hn)?;
            let n = s.graph.add(xn_t, gated)?;
            let n = s.graph.tanh(n)?;
            let diff = s.graph.sub(h, n)?;
            let keep = s.graph.mul(z, diff)?;
            h = s.graph.add(n, keep)?;
            states.push(h);
        }
        let per_step = if steps == 1 {
            states[0]
        } else {
            s.graph.concat_rows(&states)?
        };
        let final_state = s.graph.reshape(h, &[self.hidden_dim])?;
        Ok(GruOutput { per_step, final_state })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::tensor::{Prng, Tensor};

    fn build(seed: u64, i: usize, h: usize) -> (ParamSet, GruParams) {
        let mut set = ParamSet::new();
        let mut prng = Prng::new(seed);
        let p = GruParams::init(
            &mut Initializer {
                params: &mut set,
                prng: &mut prng,
            },
            "gru",
            i,
            h,
        );
        (set, p)
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar-loop unrolled recurrence.
    fn oracle(set: &ParamSet, p: &GruParams, xs: &Tensor) -> Vec<Vec<f64>> {
        let hd = p.hidden_dim;
        let lin = |l: &LinearParams, v: &[f64]| -> Vec<f64> {
            let w = set.get(l.weight);
            let b = set.get(l.bias);
            (0..l.out_dim)
                .map(|j| (0..l.in_dim).map(|k| v[k] * w.at(&[k, j])).sum::<f64>() + b.at(&[j]))
                .collect()
        };
        let mut h = vec![0.0; hd];
        let mut out = Vec::new();
        for x in xs.data().chunks(p.input_dim) {
            let (ir, iz, inn) = (
                lin(&p.input_reset, x),
                lin(&p.input_update, x),
                lin(&p.input_candidate, x),
            );
            let (hr, hz, hn) = (
                lin(&p.hidden_reset, &h),
                lin(&p.hidden_update, &h),
                lin(&p.hidden_candidate, &h),
            );
            h = (0..hd)
                .map(|j| {
                    let r = sig(ir[j] + hr[j]);
                    let z = sig(iz[j] + hz[j]);
                    let n = (inn[j] + r * hn[j]).tanh();
                    (1.0 - z) * n + z * h[j]
                })
                .collect();
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn zero_parameters_stay_at_zero() {
        let (mut set, p) = build(0, 3, 4);
        let ids: Vec<_> = set.ids().collect();
        for id in ids {
            let shape = set.get(id).shape().to_vec();
            set.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut s = Session::new(&set);
        let x = s.constant(Prng::new(1).uniform(-1.0, 1.0, &[5, 3]).unwrap());
        let out = p.forward(&mut s, x).unwrap();
        assert!(s.value(out.per_step).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_unrolled_oracle() {
        let (set, p) = build(2, 3, 4);
        let xs = Prng::new(3).uniform(-1.0, 1.0, &[3, 3]).unwrap();
        let mut s = Session::new(&set);
        let x = s.constant(xs.clone());
        let out = p.forward(&mut s, x).unwrap();
        let expected = oracle(&set, &p, &xs);
        for (t, row) in expected.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert!((s.value(out.per_step).at(&[t, j]) - e).abs() < 1e-14);
            }
        }
        assert_eq!(s.value(out.final_state).data(), &s.value(out.per_step).data()[8..12]);
    }

    #[test]
    fn single_step_is_one_recurrence() {
        let (set, p) = build(4, 2, 4);
        let xs = Prng::new(5).uniform(-1.0, 1.0, &[1, 2]).unwrap();
        let mut s = Session::new(&set);
        let x = s.constant(xs.clone());
        let out = p.forward(&mut s, x).unwrap();
        let expected = &oracle(&set, &p, &xs)[0];
        for (a, b) in s.value(out.final_state).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
