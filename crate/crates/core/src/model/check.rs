use super::{loss, ForwardOptions, VltConfig, VltParams};
use crate::nn::{ParamId, ParamSet, Session};
use crate::parallel::{map_range, Execution};
use crate::tensor::{Prng, Result, Tensor};

/// Analytic versus central-difference derivative of the training loss with
/// respect to one scalar weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradCheck {
    pub name: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step of the central difference actually used.
    pub eps: f64,
}

/// `count` scalar weights drawn uniformly over all weights of `set`.
pub fn pick_coordinates(set: &ParamSet, count: usize, prng: &mut Prng) -> Vec<(ParamId, usize)> {
    let total = set.numel();
    (0..count)
        .map(|_| {
            let mut flat = prng.below(total);
            for (id, _, t) in set.iter() {
                if flat < t.len() {
                    return (id, flat);
                }
                flat -= t.len();
            }
            unreachable!("flat index below numel")
        })
        .collect()
}

/// Loss and relu sign pattern of one evaluation.
fn loss_value(
    model: &VltParams,
    set: &ParamSet,
    image: &Tensor,
    tokens: &[usize],
    target: &Tensor,
) -> Result<(f64, Vec<bool>)> {
    let mut s = Session::inference(set);
    let vars = model.forward(&mut s, image, tokens, ForwardOptions::default())?;
    let l = loss(&mut s, vars.logits, target)?;
    Ok((s.value(l).item()?, s.graph.relu_pattern()))
}

/// Check the loss gradient of one sample at the listed coordinates.
///
/// The numeric gradient is a Richardson-extrapolated central difference
/// over steps `eps` and `eps/2`. When either side of the stencil changes
/// the sign of some relu input, the stencil straddles a kink. If the other
/// side stays kink-free out to twice the step, extrapolated one-sided
/// differences on that side are used; otherwise the step is divided by
/// ten, at most `shrinks` times. If every step straddles a kink the
/// smallest one is reported.
#[allow(clippy::too_many_arguments)]
pub fn check_parameter_gradients(
    model: &VltParams,
    set: &ParamSet,
    image: &Tensor,
    tokens: &[usize],
    target: &Tensor,
    coords: &[(ParamId, usize)],
    eps: f64,
    shrinks: usize,
) -> Result<Vec<ParamGradCheck>> {
    let (base_loss, base_pattern) = loss_value(model, set, image, tokens, target)?;
    let mut s = Session::new(set);
    let vars = model.forward(&mut s, image, tokens, ForwardOptions::default())?;
    let l = loss(&mut s, vars.logits, target)?;
    let grads = s.backward_params(l)?;
    coords
        .iter()
        .map(|&(id, offset)| {
            let shifted = |delta: f64| -> Result<(f64, Vec<bool>)> {
                let mut copy = set.clone();
                let t = set.get(id);
                let mut data = t.to_vec();
                data[offset] += delta;
                copy.set(id, Tensor::new(t.shape(), data)?)?;
                loss_value(model, &copy, image, tokens, target)
            };
            let mut memo: Vec<(f64, f64, bool)> = Vec::new();
            let mut eval = |delta: f64| -> Result<(f64, bool)> {
                if let Some(&(_, l, smooth)) = memo.iter().find(|m| m.0 == delta) {
                    return Ok((l, smooth));
                }
                let (l, pattern) = shifted(delta)?;
                let smooth = pattern == base_pattern;
                memo.push((delta, l, smooth));
                Ok((l, smooth))
            };
            // Both estimators have an O(h²) leading error, so one Richardson
            // step over h and h/2 cancels it.
            let richardson = |coarse: f64, fine: f64| (4.0 * fine - coarse) / 3.0;
            let mut step = eps;
            let mut numeric;
            let mut attempt = 0;
            loop {
                let (p1, s_p1) = eval(step)?;
                let (m1, s_m1) = eval(-step)?;
                let (p2, s_p2) = eval(step / 2.0)?;
                let (m2, s_m2) = eval(-step / 2.0)?;
                numeric = richardson((p1 - m1) / (2.0 * step), (p2 - m2) / step);
                let (p_smooth, m_smooth) = (s_p1 && s_p2, s_m1 && s_m2);
                if p_smooth && m_smooth || attempt == shrinks {
                    break;
                }
                // One kink-free side: second-order one-sided differences on
                // that side keep the larger step.
                if p_smooth || m_smooth {
                    let dir = if p_smooth { 1.0 } else { -1.0 };
                    let (far, s_far) = eval(2.0 * dir * step)?;
                    if s_far {
                        let (near, half) = if p_smooth { (p1, p2) } else { (m1, m2) };
                        let one_sided = |f1: f64, f2: f64, h: f64| dir * (4.0 * f1 - 3.0 * base_loss - f2) / (2.0 * h);
                        numeric = richardson(one_sided(near, far, step), one_sided(half, near, step / 2.0));
                        break;
                    }
                }
                attempt += 1;
                step /= 10.0;
            }
            let analytic = grads[id.index()].data()[offset];
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            Ok(ParamGradCheck {
                name: set.name(id).to_string(),
                offset,
                analytic,
                numeric,
                rel_error,
                eps: step,
            })
        })
        .collect()
}

/// Randomised end-to-end check: each trial draws fresh parameters, a
/// uniform image, a random expression and a random target, then checks
/// `coords_per_trial` weights. Trials are independent streams of `seed`
/// and run under `exec`; results come back in trial order.
pub fn end_to_end_check(
    config: &VltConfig,
    trials: usize,
    coords_per_trial: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ParamGradCheck>> {
    config.validate()?;
    let per_trial = map_range(exec, trials, |trial| {
        let mut p = Prng::derive(seed, trial as u64);
        let (model, set) = VltParams::init(config, &mut p)?;
        let image = p.uniform(0.0, 1.0, &[3, config.image_height, config.image_width])?;
        let len = 1 + p.below(config.max_words);
        let tokens: Vec<usize> = (0..len).map(|_| 1 + p.below(config.vocab_size - 1)).collect();
        let pixels = config.image_height * config.image_width;
        let target = Tensor::new(
            &[config.image_height, config.image_width],
            (0..pixels).map(|_| (p.next_f64() < 0.3) as u8 as f64).collect(),
        )?;
        let coords = pick_coordinates(&set, coords_per_trial, &mut p);
        check_parameter_gradients(
            &model,
            &set,
            &image,
            &tokens,
            &target,
            &coords,
            END_TO_END_STEP,
            END_TO_END_SHRINKS,
        )
    });
    let mut out = Vec::with_capacity(trials * coords_per_trial);
    for r in per_trial {
        out.extend(r?);
    }
    Ok(out)
}

/// Initial central-difference step of [`end_to_end_check`].
pub const END_TO_END_STEP: f64 = 1e-3;
/// Maximum number of tenfold step reductions near relu kinks.
pub const END_TO_END_SHRINKS: usize = 4;
