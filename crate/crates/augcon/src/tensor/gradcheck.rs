//! Central finite-difference verification of the tape's adjoints.
//!
//! `grad_check` rebuilds the graph for every perturbed evaluation, so the
//! closure must be a deterministic function of the parameter values. All
//! checking runs in f64.

use super::{Tape, Tensor, Var};
use crate::Result;

/// Default perturbation for central differences.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative. Both being
/// essentially zero counts as exact agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares the tape gradient of `f` against central finite differences,
/// coordinate by coordinate, and returns the maximum relative error.
/// A parameter-free function trivially returns 0.
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    params: &[Tensor<f64>],
    eps: f64,
) -> Result<f64> {
    if params.iter().map(Tensor::numel).sum::<usize>() == 0 {
        return Ok(0.0);
    }

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.scalar_value(loss)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut perturbed = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_default();
        for c in 0..params[p].numel() {
            let original = perturbed[p].data()[c];
            perturbed[p].data_mut()[c] = original + eps;
            let up = eval(&perturbed)?;
            perturbed[p].data_mut()[c] = original - eps;
            let down = eval(&perturbed)?;
            perturbed[p].data_mut()[c] = original;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(c).copied().unwrap_or(0.0);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// One named gradient check with its tolerance.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn filled(shape: Vec<usize>, f: impl Fn(usize) -> f64) -> Tensor<f64> {
    Tensor::from_fn(shape, f)
}

/// Finite-difference checks for every primitive op, each against a 1e-6
/// relative tolerance. ReLU inputs are kept at least 1e-3 away from the
/// kink so the central difference is valid.
pub fn primitive_battery() -> Result<Vec<CheckReport>> {
    const TOL: f64 = 1e-6;
    let mut reports = Vec::new();
    let mut check = |name: &'static str,
                     params: Vec<Tensor<f64>>,
                     f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>|
     -> Result<()> {
        let max_rel_err = grad_check(f, &params, DEFAULT_EPS)?;
        reports.push(CheckReport {
            name,
            max_rel_err,
            tolerance: TOL,
        });
        Ok(())
    };

    check(
        "matmul",
        vec![
            filled(vec![3, 4], |i| (i as f64 * 0.7).sin()),
            filled(vec![4, 2], |i| (i as f64 * 1.3).cos()),
        ],
        Box::new(|tape, p| {
            let c = tape.matmul(p[0], p[1])?;
            Ok(tape.scalar_mean(c))
        }),
    )?;

    check(
        "conv2d",
        vec![
            filled(vec![2, 2, 5, 6], |i| (i as f64 * 0.31).sin()),
            filled(vec![3, 2, 3, 3], |i| (i as f64 * 0.17).cos() * 0.5),
            filled(vec![3], |i| i as f64 * 0.1 - 0.1),
        ],
        Box::new(|tape, p| {
            let c = tape.conv2d(p[0], p[1], p[2], 1)?;
            Ok(tape.scalar_mean(c))
        }),
    )?;

    check(
        "conv2d_stride2",
        vec![
            filled(vec![1, 1, 7, 7], |i| (i as f64 * 0.23).sin()),
            filled(vec![2, 1, 3, 3], |i| (i as f64 * 0.11).cos()),
            filled(vec![2], |_| 0.2),
        ],
        Box::new(|tape, p| {
            let c = tape.conv2d(p[0], p[1], p[2], 2)?;
            Ok(tape.scalar_mean(c))
        }),
    )?;

    check(
        "add",
        vec![
            filled(vec![3, 3], |i| i as f64 * 0.4 - 1.0),
            filled(vec![3, 3], |i| (i as f64 * 0.9).sin()),
        ],
        Box::new(|tape, p| {
            let s = tape.add(p[0], p[1])?;
            let sq = tape.mul(s, s)?;
            Ok(tape.scalar_mean(sq))
        }),
    )?;

    check(
        "add_bias",
        vec![
            filled(vec![4, 3], |i| (i as f64 * 0.6).cos()),
            filled(vec![3], |i| i as f64 * 0.2),
        ],
        Box::new(|tape, p| {
            let s = tape.add_bias(p[0], p[1])?;
            let t = tape.tanh(s);
            Ok(tape.scalar_mean(t))
        }),
    )?;

    check(
        "mul",
        vec![
            filled(vec![5], |i| i as f64 * 0.3 + 0.1),
            filled(vec![5], |i| (i as f64 * 1.1).sin() + 2.0),
        ],
        Box::new(|tape, p| {
            let m = tape.mul(p[0], p[1])?;
            Ok(tape.scalar_sum(m))
        }),
    )?;

    check(
        "tanh",
        vec![filled(vec![6], |i| i as f64 * 0.5 - 1.5)],
        Box::new(|tape, p| {
            let t = tape.tanh(p[0]);
            let sq = tape.mul(t, t)?;
            Ok(tape.scalar_mean(sq))
        }),
    )?;

    check(
        "relu",
        // Inputs bounded away from the kink at zero.
        vec![filled(vec![6], |i| {
            let v = (i as f64 * 0.8).sin();
            if v.abs() < 1e-3 {
                1e-3
            } else {
                v
            }
        })],
        Box::new(|tape, p| {
            let r = tape.relu(p[0]);
            let sq = tape.mul(r, r)?;
            Ok(tape.scalar_mean(sq))
        }),
    )?;

    check(
        "mean_pool2",
        vec![filled(vec![1, 2, 5, 5], |i| (i as f64 * 0.37).sin())],
        Box::new(|tape, p| {
            let m = tape.mean_pool2(p[0])?;
            let sq = tape.mul(m, m)?;
            Ok(tape.scalar_mean(sq))
        }),
    )?;

    check(
        "global_mean_pool",
        vec![filled(vec![2, 3, 4, 4], |i| (i as f64 * 0.29).cos())],
        Box::new(|tape, p| {
            let m = tape.global_mean_pool(p[0])?;
            let sq = tape.mul(m, m)?;
            Ok(tape.scalar_mean(sq))
        }),
    )?;

    check(
        "reshape_transpose",
        vec![filled(vec![3, 4], |i| (i as f64 * 0.51).sin())],
        Box::new(|tape, p| {
            let t = tape.transpose(p[0])?;
            let r = tape.reshape(t, vec![2, 6])?;
            let sq = tape.mul(r, r)?;
            Ok(tape.scalar_mean(sq))
        }),
    )?;

    check(
        "softmax_cross_entropy",
        vec![filled(vec![3, 4], |i| (i as f64 * 0.83).sin() * 2.0)],
        Box::new(|tape, p| {
            let losses = tape.softmax_cross_entropy(p[0], &[1, 0, 3])?;
            Ok(tape.scalar_mean(losses))
        }),
    )?;

    check(
        "scalar_mean",
        vec![filled(vec![7], |i| i as f64 * 0.2 - 0.7)],
        Box::new(|tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            Ok(tape.scalar_mean(sq))
        }),
    )?;

    check(
        "scalar_sum",
        vec![filled(vec![7], |i| (i as f64 * 0.4).cos())],
        Box::new(|tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            Ok(tape.scalar_sum(sq))
        }),
    )?;

    Ok(reports)
}
