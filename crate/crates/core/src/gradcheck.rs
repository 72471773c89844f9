//! Central finite-difference gradient checks.
//!
//! The numerical side only ever runs forward passes on fresh tapes with
//! every input as a constant, so it shares no code with [`Tape::backward`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lhc::{lhc_forward, LhcConfig, LhcWeights};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome for one input tensor.
#[derive(Debug, Clone)]
pub struct InputCheck {
    pub input: usize,
    pub rel_err: f64,
    pub max_abs_err: f64,
}

/// Named check result, as reported by the suites.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub shapes: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Central differences with step `1e-5·(1+|w|)` for every scalar of every input.
pub fn numerical_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let w = inputs[i].data()[j];
            let h = 1e-5 * (1.0 + w.abs());
            work[i].data_mut()[j] = w + h;
            let plus = eval_scalar(f, &work)?;
            work[i].data_mut()[j] = w - h;
            let minus = eval_scalar(f, &work)?;
            work[i].data_mut()[j] = w;
            *gj = (plus - minus) / (2.0 * h);
        }
        grads.push(Tensor::from_parts(inputs[i].shape().to_vec(), g));
    }
    Ok(grads)
}

/// Reverse-mode gradients of `f` with every input registered as a leaf.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Compares reverse-mode and finite-difference gradients of a scalar function.
pub fn check_gradients<F>(f: F, inputs: &[Tensor]) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numerical_gradients(&f, inputs)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(input, (a, n))| InputCheck {
            input,
            rel_err: relative_error(a, n),
            max_abs_err: a.max_abs_diff(n),
        })
        .collect())
}

/// Worst relative error over all inputs.
pub fn worst_error(checks: &[InputCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}

/// Projects `out` onto a fixed random direction so that every output entry
/// carries a distinct weight in the scalar loss.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.reshape(tape.shape(out).to_vec())?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Uniform values in `[-1, 1]` kept at least 0.1 away from zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::random_uniform(shape.to_vec(), -1.0, 1.0, rng);
    t.map(|v| v.signum() * (0.1 + v.abs()))
}

/// Distinct values with gaps of at least 0.01, shuffled; keeps max-pool
/// winners stable under finite-difference perturbations.
fn well_separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.01 + rng.gen_range(0.0..0.002) - n as f64 * 0.005)
        .collect();
    vals.shuffle(rng);
    Tensor::from_parts(shape.to_vec(), vals)
}

type Primitive = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<Vec<usize>>>,
    separated: bool,
    op: Primitive,
}

fn cases() -> Vec<Case> {
    fn c(name: &'static str, shapes: Vec<Vec<Vec<usize>>>, op: Primitive) -> Case {
        Case {
            name,
            shapes,
            separated: false,
            op,
        }
    }
    let s3 = |shapes: [&[usize]; 3]| shapes.iter().map(|s| vec![s.to_vec()]).collect::<Vec<_>>();
    let pairs = |a: [[usize; 2]; 3]| {
        a.iter()
            .map(|s| vec![s.to_vec(), s.to_vec()])
            .collect::<Vec<_>>()
    };
    let spatial = s3([&[4, 4, 2], &[5, 3, 3], &[6, 6, 1]]);
    vec![
        c("add", pairs([[2, 3], [4, 1], [3, 5]]), |t, v| t.add(v[0], v[1])),
        c("sub", pairs([[2, 3], [4, 1], [3, 5]]), |t, v| t.sub(v[0], v[1])),
        c("mul", pairs([[2, 3], [4, 1], [3, 5]]), |t, v| t.mul(v[0], v[1])),
        c("scale", s3([&[3], &[2, 4], &[2, 2, 2]]), |t, v| Ok(t.scale(v[0], -1.7))),
        c("add_scalar", s3([&[3], &[2, 4], &[2, 2, 2]]), |t, v| Ok(t.add_scalar(v[0], 0.3))),
        c(
            "mul_by_scalar",
            vec![
                vec![vec![3], vec![1]],
                vec![vec![2, 4], vec![]],
                vec![vec![3, 3, 2], vec![1]],
            ],
            |t, v| t.mul_by_scalar(v[0], v[1]),
        ),
        c(
            "matmul",
            vec![
                vec![vec![2, 3], vec![3, 4]],
                vec![vec![5, 1], vec![1, 2]],
                vec![vec![4, 4], vec![4, 3]],
            ],
            |t, v| t.matmul(v[0], v[1]),
        ),
        c("transpose", s3([&[2, 3], &[1, 5], &[4, 4]]), |t, v| t.transpose(v[0])),
        c("reshape", s3([&[2, 3], &[6], &[2, 2, 2]]), |t, v| {
            let n = t.value(v[0]).len();
            t.reshape(v[0], [n])
        }),
        c(
            "add_row_bias",
            vec![
                vec![vec![2, 3], vec![3]],
                vec![vec![4, 1], vec![1]],
                vec![vec![3, 5], vec![5]],
            ],
            |t, v| t.add_row_bias(v[0], v[1]),
        ),
        c(
            "scale_rows",
            vec![
                vec![vec![2, 3], vec![2]],
                vec![vec![4, 1], vec![4]],
                vec![vec![3, 5], vec![3]],
            ],
            |t, v| t.scale_rows(v[0], v[1]),
        ),
        c("sum", s3([&[3], &[2, 4], &[2, 2, 2]]), |t, v| Ok(t.sum(v[0]))),
        c("mean", s3([&[3], &[2, 4], &[2, 2, 2]]), |t, v| Ok(t.mean(v[0]))),
        c("sigmoid", s3([&[3], &[2, 4], &[2, 2, 2]]), |t, v| Ok(t.sigmoid(v[0]))),
        c("tanh", s3([&[3], &[2, 4], &[2, 2, 2]]), |t, v| Ok(t.tanh(v[0]))),
        c("relu", s3([&[3], &[2, 4], &[2, 2, 2]]), |t, v| Ok(t.relu(v[0]))),
        c("exp", s3([&[3], &[2, 4], &[2, 2, 2]]), |t, v| Ok(t.exp(v[0]))),
        c("softmax_rows", s3([&[4], &[3, 5], &[2, 2, 3]]), |t, v| Ok(t.softmax_rows(v[0]))),
        c("mean_rows", s3([&[2, 3], &[4, 1], &[3, 5]]), |t, v| t.mean_rows(v[0])),
        c("avg_pool2d_same", spatial.clone(), |t, v| t.avg_pool2d_same(v[0], 3)),
        Case {
            name: "max_pool2d_same",
            shapes: spatial.clone(),
            separated: true,
            op: |t, v| t.max_pool2d_same(v[0], 3),
        },
        Case {
            name: "max_pool2",
            shapes: spatial.clone(),
            separated: true,
            op: |t, v| t.max_pool2(v[0]),
        },
        c(
            "conv2d_same",
            vec![
                vec![vec![4, 4, 2], vec![3, 3, 2, 3], vec![3]],
                vec![vec![5, 3, 1], vec![3, 3, 1, 2], vec![2]],
                vec![vec![3, 4, 3], vec![1, 1, 3, 2], vec![2]],
            ],
            |t, v| t.conv2d_same(v[0], v[1], v[2]),
        ),
        c("global_avg_pool", spatial.clone(), |t, v| t.global_avg_pool(v[0])),
        c("to_channel_matrix", spatial.clone(), |t, v| t.to_channel_matrix(v[0])),
        c("from_channel_matrix", s3([&[2, 16], &[3, 15], &[1, 36]]), |t, v| {
            let hw = t.shape(v[0])[1];
            let h = [4usize, 5, 6].into_iter().find(|h| hw % h == 0).unwrap_or(1);
            t.from_channel_matrix(v[0], h, hw / h)
        }),
        c("slice_cols", s3([&[2, 6], &[3, 4], &[1, 5]]), |t, v| t.slice_cols(v[0], 1, 2)),
        c("concat_cols", pairs([[2, 3], [4, 1], [3, 5]]), |t, v| t.concat_cols(&[v[0], v[1]])),
        c("stack", pairs([[2, 3], [4, 1], [3, 5]]), |t, v| t.stack(&[v[0], v[1]])),
        c("softmax_cross_entropy", s3([&[2, 7], &[1, 3], &[4, 5]]), |t, v| {
            let b = t.shape(v[0])[0];
            let k = t.shape(v[0])[1];
            let labels: Vec<usize> = (0..b).map(|i| (i * 2 + 1) % k).collect();
            t.softmax_cross_entropy(v[0], &labels)
        }),
    ]
}

/// Finite-difference checks of every differentiable primitive on three
/// input shapes each. Non-scalar outputs are reduced with a fixed random
/// weighting so that every output entry is exercised.
pub fn primitive_suite(seed: u64, tolerance: f64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for case in cases() {
        for shapes in &case.shapes {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    if case.separated {
                        well_separated(s, &mut rng)
                    } else {
                        away_from_zero(s, &mut rng)
                    }
                })
                .collect();
            let op = case.op;
            let mut tape = Tape::new();
            let probe: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let probe_out = op(&mut tape, &probe)?;
            let out_shape = tape.shape(probe_out).to_vec();
            let weights = Tensor::random_uniform(out_shape, -1.0, 1.0, &mut rng);
            let f = move |t: &mut Tape, v: &[Var]| {
                let out = op(t, v)?;
                weighted_sum(t, out, &weights)
            };
            let checks = check_gradients(f, &inputs)?;
            reports.push(CheckReport {
                name: case.name.to_string(),
                shapes: format!("{shapes:?}"),
                rel_err: worst_error(&checks),
                tolerance,
            });
        }
    }
    Ok(reports)
}

/// Finite-difference check of a whole block `x + LHC(x)` with respect to the
/// input and every weight, seeded random input and weights.
pub fn lhc_block_check(cfg: &LhcConfig, seed: u64, tolerance: f64) -> Result<CheckReport> {
    let weights = LhcWeights::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::random_uniform(cfg.input_shape.to_vec(), -1.0, 1.0, &mut rng);
    let proj = Tensor::random_uniform(cfg.input_shape.to_vec(), -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(weights.iter().cloned());
    let f = |tape: &mut Tape, v: &[Var]| {
        let mut rest = v[1..].iter().copied();
        let p = weights.map(|_| rest.next().expect("one var per weight"));
        let y = lhc_forward(tape, v[0], cfg, &p)?;
        weighted_sum(tape, y, &proj)
    };
    let checks = check_gradients(f, &inputs)?;
    Ok(CheckReport {
        name: "lhc_block".into(),
        shapes: format!("{:?} n={} d={}", cfg.input_shape, cfg.heads, cfg.dim),
        rel_err: worst_error(&checks),
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_check_on_tiny_config() {
        let cfg = LhcConfig::new(2, 2, 3, 1.0, 3, [4, 4, 3]);
        let report = lhc_block_check(&cfg, 11, 1e-3).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn every_primitive_passes() {
        let reports = primitive_suite(7, 1e-4).unwrap();
        assert!(reports.len() >= 90);
        for r in &reports {
            assert!(r.passed(), "{} {} rel err {}", r.name, r.shapes, r.rel_err);
        }
    }

    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random_uniform([3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform([4, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform([2], -1.0, 1.0, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row_bias(h, v[2])?;
            let h = t.tanh(h);
            let s = t.softmax_rows(h);
            let e = t.exp(s);
            let m = t.mean_rows(e)?;
            let sg = t.sigmoid(m);
            let sq = t.mul(sg, sg)?;
            Ok(t.sum(sq))
        };
        let checks = check_gradients(f, &[x, w, b]).unwrap();
        assert!(worst_error(&checks) < 1e-4, "{checks:?}");
    }

    #[test]
    fn relative_error_floors_denominator() {
        let z = Tensor::zeros([3]);
        assert_eq!(relative_error(&z, &z), 0.0);
        let a = Tensor::vector(vec![1.0, 0.0]);
        let n = Tensor::vector(vec![1.0, 1e-3]);
        assert!((relative_error(&a, &n) - 1e-3).abs() < 1e-6);
    }
}
