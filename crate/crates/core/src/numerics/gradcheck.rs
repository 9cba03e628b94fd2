//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use serde::Serialize;

use super::graph::{Axis, Graph, Var};
use super::rng::SeedTree;
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-7)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-7)
}

/// Analytic and numeric gradients of a scalar function of several tensors.
pub struct GradientComparison {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradientComparison {
    /// Worst relative error across inputs.
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(a.data(), n.data()))
            .fold(0.0, f64::max)
    }
}

/// Compare `backward` against central differences with step `h` for every input element.
pub fn compare_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradientComparison>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let root = f(&g, &vars)?;
        Ok(g.scalar(root))
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut gi = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].len() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            gi.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        numeric.push(gi);
    }
    Ok(GradientComparison { analytic, numeric })
}

#[derive(Clone, Debug, Serialize)]
pub struct PrimitiveCheck {
    pub primitive: &'static str,
    pub cases: usize,
    pub worst_relative_error: f64,
    pub passed: bool,
}

type Builder = fn(&Graph, &[Var]) -> Result<Var>;

/// How inputs for a primitive are drawn.
#[derive(Clone, Copy)]
enum Inputs {
    /// one `r×c` tensor
    Single,
    /// two `r×c` tensors
    Pair,
    /// `r×c` and a row `[c]`
    RowBroadcast,
    /// `r×k` and `k×c`
    MatMul,
    /// `r×c` with distinct, well-separated entries
    Separated,
    /// `r×c` strictly positive
    Positive,
    /// `r×c` and `r×c` with the second bounded away from zero
    Divisor,
}

fn weighted_sum(g: &Graph, y: Var) -> Result<Var> {
    // fixed, non-uniform weights so every output element matters differently
    let shape = g.shape(y);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7 + 3) % 11) as f64 / 10.0).collect();
    let wv = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn primitives() -> Vec<(&'static str, Inputs, Builder)> {
    vec![
        ("add", Inputs::RowBroadcast, |g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y) }),
        ("sub", Inputs::Pair, |g, v| { let y = g.sub(v[0], v[1])?; weighted_sum(g, y) }),
        ("mul", Inputs::Pair, |g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y) }),
        ("div", Inputs::Divisor, |g, v| { let y = g.div(v[0], v[1])?; weighted_sum(g, y) }),
        ("scale", Inputs::Single, |g, v| { let y = g.scale(v[0], -1.7); weighted_sum(g, y) }),
        ("matmul", Inputs::MatMul, |g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y) }),
        ("transpose", Inputs::Single, |g, v| { let y = g.transpose(v[0]); weighted_sum(g, y) }),
        ("concat", Inputs::Pair, |g, v| {
            let a = g.concat(&[v[0], v[1]], Axis::Rows)?;
            let b = g.concat(&[v[1], v[0]], Axis::Cols)?;
            let (sa, sb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
            g.add(sa, sb)
        }),
        ("slice", Inputs::Single, |g, v| {
            let s = g.shape(v[0]);
            let (r, c) = (s[0], s[1]);
            let a = g.slice_rows(v[0], r / 2, r)?;
            let b = g.slice_cols(v[0], 0, c.div_ceil(2))?;
            let (sa, sb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
            g.add(sa, sb)
        }),
        ("gather_rows", Inputs::Single, |g, v| {
            let r = g.shape(v[0])[0];
            let idx: Vec<usize> = (0..r + 1).map(|i| (i * 3) % r).collect();
            let y = g.gather_rows(v[0], &idx)?;
            weighted_sum(g, y)
        }),
        ("tanh", Inputs::Single, |g, v| { let y = g.tanh(v[0]); weighted_sum(g, y) }),
        ("sigmoid", Inputs::Single, |g, v| { let y = g.sigmoid(v[0]); weighted_sum(g, y) }),
        ("gelu", Inputs::Single, |g, v| { let y = g.gelu(v[0]); weighted_sum(g, y) }),
        ("square", Inputs::Single, |g, v| { let y = g.square(v[0]); weighted_sum(g, y) }),
        ("exp", Inputs::Single, |g, v| { let y = g.exp(v[0]); weighted_sum(g, y) }),
        ("log", Inputs::Positive, |g, v| { let y = g.log(v[0]); weighted_sum(g, y) }),
        ("softmax", Inputs::Single, |g, v| { let y = g.softmax(v[0]); weighted_sum(g, y) }),
        ("log_softmax", Inputs::Single, |g, v| { let y = g.log_softmax(v[0]); weighted_sum(g, y) }),
        ("l2_normalize", Inputs::Single, |g, v| { let y = g.l2_normalize(v[0]); weighted_sum(g, y) }),
        ("cosine_similarity", Inputs::Pair, |g, v| { let y = g.cosine_similarity(v[0], v[1])?; weighted_sum(g, y) }),
        ("sum", Inputs::Single, |g, v| { let y = g.square(v[0]); Ok(g.sum(y)) }),
        ("mean", Inputs::Single, |g, v| { let y = g.square(v[0]); Ok(g.mean(y)) }),
        ("sum_axis", Inputs::Single, |g, v| {
            let a = g.sum_axis(v[0], Axis::Rows);
            let b = g.mean_axis(v[0], Axis::Cols);
            let (sa, sb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
            g.add(sa, sb)
        }),
        ("min_over_axis", Inputs::Separated, |g, v| {
            let a = g.min_over_axis(v[0], Axis::Rows);
            let b = g.min_over_axis(v[0], Axis::Cols);
            let (sa, sb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
            g.add(sa, sb)
        }),
        ("max_over_axis", Inputs::Separated, |g, v| {
            let a = g.max_over_axis(v[0], Axis::Rows);
            let b = g.max_over_axis(v[0], Axis::Cols);
            let (sa, sb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
            g.add(sa, sb)
        }),
        ("standardize", Inputs::Single, |g, v| {
            let a = g.standardize(v[0], Axis::Rows, 1e-5);
            let b = g.standardize(v[0], Axis::Cols, 1e-5);
            let (sa, sb) = (weighted_sum(g, a)?, weighted_sum(g, b)?);
            g.add(sa, sb)
        }),
    ]
}

fn draw_inputs(rng: &mut impl Rng, kind: Inputs) -> Result<Vec<Tensor>> {
    let r = rng.random_range(1..=4);
    let c = rng.random_range(1..=5);
    let mut uniform = |rows: usize, cols: usize, lo: f64, hi: f64| -> Result<Tensor> {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::matrix(rows, cols, data)
    };
    Ok(match kind {
        Inputs::Single => vec![uniform(r, c, -2.0, 2.0)?],
        Inputs::Pair => vec![uniform(r, c, -2.0, 2.0)?, uniform(r, c, -2.0, 2.0)?],
        Inputs::RowBroadcast => {
            let row = uniform(1, c, -2.0, 2.0)?.reshaped(&[c])?;
            vec![uniform(r, c, -2.0, 2.0)?, row]
        }
        Inputs::MatMul => {
            let k = 1 + (r + c) % 4;
            vec![uniform(r, k, -2.0, 2.0)?, uniform(k, c, -2.0, 2.0)?]
        }
        Inputs::Positive => vec![uniform(r, c, 0.2, 3.0)?],
        Inputs::Divisor => {
            let mut b = uniform(r, c, 0.5, 2.0)?;
            for (i, x) in b.data_mut().iter_mut().enumerate() {
                if i % 2 == 1 {
                    *x = -*x;
                }
            }
            vec![uniform(r, c, -2.0, 2.0)?, b]
        }
        Inputs::Separated => {
            let n = r * c;
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
            let data = order
                .iter()
                .map(|&k| k as f64 * 0.1 - 0.5 + rng.random_range(0.0..0.05))
                .collect();
            vec![Tensor::matrix(r, c, data)?]
        }
    })
}

/// Run every primitive on `cases` random small shapes and report the worst relative error.
pub fn primitive_suite(seed: u64, cases: usize, tolerance: f64) -> Result<Vec<PrimitiveCheck>> {
    let tree = SeedTree::new(seed);
    let checks: Vec<_> = primitives();
    let results = crate::par::map(&checks, |(name, kind, build)| -> Result<PrimitiveCheck> {
        let mut rng = tree.stream(name);
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let inputs = draw_inputs(&mut rng, *kind)?;
            let cmp = compare_gradients(&inputs, DEFAULT_STEP, build)?;
            worst = worst.max(cmp.max_relative_error());
        }
        Ok(PrimitiveCheck {
            primitive: name,
            cases,
            worst_relative_error: worst,
            passed: worst < tolerance,
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_against_constant_matches_finite_differences() {
        let x = Tensor::vector(vec![0.4, -1.1, 2.0, 0.3]);
        let c = Tensor::vector(vec![1.0, 0.5, -0.2, 0.9]);
        let cmp = compare_gradients(&[x, c], 1e-5, |g, v| g.cosine_similarity(v[0], v[1]).map(|y| g.sum(y))).unwrap();
        let err = relative_error(cmp.analytic[0].data(), cmp.numeric[0].data());
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_primitive_passes_small_suite() {
        for check in primitive_suite(3, 10, 1e-4).unwrap() {
            assert!(check.passed, "{} {}", check.primitive, check.worst_relative_error);
        }
    }

    #[test]
    fn backward_is_linear() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.2]);
        let f = |g: &Graph, v: Var| -> Result<Var> { let t = g.tanh(v); Ok(g.sum(t)) };
        let h = |g: &Graph, v: Var| -> Result<Var> { let s = g.square(v); Ok(g.mean(s)) };
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let (fv, hv) = (f(&g, v).unwrap(), h(&g, v).unwrap());
        let both = g.add(fv, hv).unwrap();
        let joint = g.backward(both).unwrap().wrt(v);
        let sep_f = g.backward(fv).unwrap().wrt(v);
        let sep_h = g.backward(hv).unwrap().wrt(v);
        for i in 0..3 {
            assert!((joint.data()[i] - sep_f.data()[i] - sep_h.data()[i]).abs() < 1e-15);
        }
    }
}
