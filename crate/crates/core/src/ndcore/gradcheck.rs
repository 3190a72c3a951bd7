//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Gradients within `|analytic − numeric| ≤ tol · max(|analytic|, |numeric|, floor)`
/// count as matching; this is the `floor` used.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Input index and flat element of the worst mismatch.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `step`, over every element of `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").clone();
        for k in 0..xs[i].len() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + step;
            let up = eval(&xs)?;
            xs[i].data_mut()[k] = orig - step;
            let down = eval(&xs)?;
            xs[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            if err > report.max_rel_err || err.is_nan() {
                report = GradReport {
                    max_rel_err: err,
                    worst: (i, k),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
