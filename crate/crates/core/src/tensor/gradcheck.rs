//! Central-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check over one or more input tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::NonScalarOutput(g.shape(out).to_vec()))
}

/// Compares the graph gradient of `f` at `points` with central differences
/// of step `eps` on every coordinate of every input.
///
/// A non-finite function value at any probe is reported as
/// [`Error::NonFinite`] rather than as a numeric error.
pub fn check_gradients<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let y = g
        .value(out)
        .item()
        .ok_or_else(|| Error::NonScalarOutput(g.shape(out).to_vec()))?;
    if !y.is_finite() {
        return Err(Error::NonFinite("function value at the base point".into()));
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = points.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param leaf has a gradient");
        for i in 0..points[t].len() {
            let base = points[t].data()[i];
            probe[t].data_mut()[i] = base + eps;
            let plus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = base - eps;
            let minus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "function value while probing input {t}, coordinate {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (t, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`check_gradients`]; returns the max relative error.
pub fn finite_difference_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_gradients(|g, v| f(g, v[0]), std::slice::from_ref(point), eps)
        .map(|r| r.max_rel_error)
}

/// Derivative of a scalar function at `x` by Ridders' extrapolation of
/// central differences, starting at step `h` and shrinking by 1.4 per
/// stage. Returns (estimate, error estimate).
pub fn ridders_derivative<F>(mut f: F, x: f64, h: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    const SHRINK: f64 = 1.4;
    const STAGES: usize = 10;
    const SAFE: f64 = 2.0;
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut central = |hh: f64| -> Result<f64> {
        let (p, m) = (f(x + hh)?, f(x - hh)?);
        if !p.is_finite() || !m.is_finite() {
            return Err(Error::NonFinite(format!("function value at step {hh:e}")));
        }
        Ok((p - m) / (2.0 * hh))
    };
    let mut table = [[0.0f64; STAGES]; STAGES];
    let mut hh = h;
    table[0][0] = central(hh)?;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..STAGES {
        hh /= SHRINK;
        table[0][i] = central(hh)?;
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok((best, err))
}
