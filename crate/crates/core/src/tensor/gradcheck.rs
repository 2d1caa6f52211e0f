use super::{Graph, Prng, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

fn perturbed(t: &Tensor, coord: usize, delta: f64) -> Tensor {
    let mut data = t.to_vec();
    data[coord] += delta;
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Compare reverse-mode gradients of the scalar function `f` against
/// central differences `(f(x+ε) − f(x−ε)) / 2ε` on every coordinate of
/// every input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |c| (i, c)))
        .collect();
    finite_diff_check_at(f, inputs, eps, &coords)
}

/// [`finite_diff_check`] restricted to the listed `(input, coordinate)`
/// pairs.
pub fn finite_diff_check_at<F>(f: F, inputs: &[Tensor], eps: f64, coords: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    for &(i, c) in coords {
        if i >= inputs.len() || c >= inputs[i].len() {
            return Err(TensorError::Validation(format!("no coordinate ({i}, {c})")));
        }
        let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[c]);
        let mut shifted = inputs.to_vec();
        shifted[i] = perturbed(&inputs[i], c, eps);
        let plus = evaluate(&f, &shifted)?;
        shifted[i] = perturbed(&inputs[i], c, -eps);
        let minus = evaluate(&f, &shifted)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, c));
        }
    }
    Ok(report)
}

/// Worst relative error seen for one graph op across a randomized suite.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// Uniform magnitudes in `[lo, hi]` with random signs.
fn signed(p: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = p.uniform_scalar(lo, hi);
            if p.next_f64() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn dim(p: &mut Prng, max: usize) -> usize {
    1 + p.below(max)
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate
/// contributes with a distinct weight.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    g.sum(prod)
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// One random instance of `op`: inputs plus a scalar-valued closure.
fn random_case(op: &'static str, p: &mut Prng) -> Case {
    let (m, n, k) = (dim(p, 4), dim(p, 4), dim(p, 4));
    let x = |p: &mut Prng, s: &[usize]| signed(p, s, 0.1, 1.0);
    let w = |p: &mut Prng, s: &[usize]| signed(p, s, 0.5, 1.5);
    macro_rules! unary {
        ($inputs:expr, $out:expr, |$g:ident, $v:ident| $body:expr) => {{
            let wt = w(p, &$out);
            let f = move |$g: &mut Graph, $v: &[Var]| -> Result<Var> {
                let y = $body?;
                weighted($g, y, &wt)
            };
            ($inputs, Box::new(f) as Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)
        }};
    }
    match op {
        "matmul" => unary!(vec![x(p, &[m, k]), x(p, &[k, n])], [m, n], |g, v| g.matmul(v[0], v[1])),
        "transpose" => unary!(vec![x(p, &[m, n])], [n, m], |g, v| g.transpose(v[0])),
        "add" => unary!(vec![x(p, &[m, n]), x(p, &[m, n])], [m, n], |g, v| g.add(v[0], v[1])),
        "add_broadcast" => unary!(vec![x(p, &[m, n]), x(p, &[n])], [m, n], |g, v| g.add(v[0], v[1])),
        "sub" => unary!(vec![x(p, &[m, n]), x(p, &[m, n])], [m, n], |g, v| g.sub(v[0], v[1])),
        "sub_broadcast" => unary!(vec![x(p, &[m, n]), x(p, &[n])], [m, n], |g, v| g.sub(v[0], v[1])),
        "mul" => unary!(vec![x(p, &[m, n]), x(p, &[m, n])], [m, n], |g, v| g.mul(v[0], v[1])),
        "mul_broadcast" => unary!(vec![x(p, &[m, n]), x(p, &[n])], [m, n], |g, v| g.mul(v[0], v[1])),
        "scale" => {
            let factor = p.uniform_scalar(-2.0, 2.0);
            unary!(vec![x(p, &[m, n])], [m, n], |g, v| g.scale(v[0], factor))
        }
        "relu" => unary!(vec![x(p, &[m, n])], [m, n], |g, v| g.relu(v[0])),
        "sigmoid" => unary!(vec![x(p, &[m, n])], [m, n], |g, v| g.sigmoid(v[0])),
        "tanh" => unary!(vec![x(p, &[m, n])], [m, n], |g, v| g.tanh(v[0])),
        "reshape" => unary!(vec![x(p, &[m, n])], [n * m], |g, v| g.reshape(v[0], &[n * m])),
        "sum" => unary!(vec![x(p, &[m, n])], [1], |g, v| g.sum(v[0])),
        "mean" => unary!(vec![x(p, &[m, n])], [1], |g, v| g.mean(v[0])),
        "sum_rows" => unary!(vec![x(p, &[m, n])], [n], |g, v| g.sum_rows(v[0])),
        "softmax_masked" => {
            let mut mask: Vec<bool> = (0..n).map(|_| p.next_f64() < 0.6).collect();
            let keep = p.below(n);
            mask[keep] = true;
            unary!(vec![x(p, &[m, n])], [m, n], |g, v| g.softmax_masked(v[0], &mask))
        }
        "layer_norm" => {
            let n = n + 1;
            unary!(vec![x(p, &[m, n]), x(p, &[n]), x(p, &[n])], [m, n], |g, v| g
                .layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "conv2d" => {
            let (cin, cout) = (dim(p, 3), dim(p, 3));
            let kernel = if p.next_f64() < 0.5 { 1 } else { 3 };
            let stride = dim(p, 2);
            let (h, wd) = (dim(p, 5), dim(p, 5));
            let geom = super::kernels::ConvGeom {
                channels: cin,
                height: h,
                width: wd,
                kernel,
                stride,
                pad: kernel / 2,
            };
            let (oh, ow) = geom.output_extent().expect("same padding");
            unary!(
                vec![x(p, &[cin, h, wd]), x(p, &[cout, cin, kernel, kernel]), x(p, &[cout])],
                [cout, oh, ow],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, kernel / 2)
            )
        }
        "resize_nearest" => {
            let (oh, ow) = (dim(p, 6), dim(p, 6));
            unary!(vec![x(p, &[k, m, n])], [k, oh, ow], |g, v| g
                .resize_nearest(v[0], oh, ow))
        }
        "concat_cols" => unary!(vec![x(p, &[m, n]), x(p, &[m, k])], [m, n + k], |g, v| g
            .concat_cols(&[v[0], v[1]])),
        "concat_rows" => unary!(vec![x(p, &[m, n]), x(p, &[k, n])], [m + k, n], |g, v| g
            .concat_rows(&[v[0], v[1]])),
        "slice_cols" => {
            let start = p.below(n);
            let len = 1 + p.below(n - start);
            unary!(vec![x(p, &[m, n])], [m, len], |g, v| g.slice_cols(v[0], start, len))
        }
        "slice_rows" => {
            let start = p.below(m);
            let len = 1 + p.below(m - start);
            unary!(vec![x(p, &[m, n])], [len, n], |g, v| g.slice_rows(v[0], start, len))
        }
        "gather_rows" => {
            let ids: Vec<usize> = (0..k + 1).map(|_| p.below(m)).collect();
            let rows = ids.len();
            unary!(vec![x(p, &[m, n])], [rows, n], |g, v| g.gather_rows(v[0], &ids))
        }
        "bce_with_logits" => {
            let targets: Vec<f64> = (0..m * n).map(|_| (p.next_f64() < 0.5) as u8 as f64).collect();
            let targets = Tensor::from_parts(vec![m, n], targets);
            let inputs = vec![signed(p, &[m, n], 0.0, 3.0)];
            let f = move |g: &mut Graph, v: &[Var]| g.bce_with_logits(v[0], &targets);
            (inputs, Box::new(f))
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// Every differentiable graph op covered by [`op_suite`].
pub const SUITE_OPS: [&str; 25] = [
    "matmul",
    "transpose",
    "add",
    "add_broadcast",
    "sub",
    "sub_broadcast",
    "mul",
    "mul_broadcast",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "reshape",
    "sum",
    "mean",
    "sum_rows",
    "softmax_masked",
    "layer_norm",
    "conv2d",
    "resize_nearest",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "slice_rows",
    "gather_rows",
];

/// Randomized finite-difference check of every op in [`SUITE_OPS`] plus
/// `bce_with_logits`, `trials` instances each.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let ops = SUITE_OPS.iter().copied().chain(["bce_with_logits"]);
    ops.enumerate()
        .map(|(i, op)| {
            let mut p = Prng::derive(seed, i as u64);
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let (inputs, f) = random_case(op, &mut p);
                let report = finite_diff_check(f, &inputs, 1e-5)?;
                worst = worst.max(report.max_rel_error);
            }
            Ok(OpCheck {
                op,
                trials,
                max_rel_error: worst,
            })
        })
        .collect()
}
