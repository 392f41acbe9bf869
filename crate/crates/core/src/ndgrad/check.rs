use super::{GradError, Graph, Tensor, Var};

/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-3).
///
/// The floor keeps near-zero gradients from inflating the ratio with
/// finite-difference round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every coordinate of every input, returning the worst [`relative_error`].
///
/// `f` receives a fresh 64-bit graph and the input vars (registered as
/// differentiable leaves, in order) and must return a scalar var.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, GradError>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var, GradError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(GradError::BadStep(eps));
    }
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).item().is_finite() {
            return Err(GradError::NonFiniteObjective);
        }
        let grads = g.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect()
    };

    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64, GradError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(GradError::NonFiniteObjective);
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.len() {
            let x0 = t.data()[ci];
            work[ti].data_mut()[ci] = x0 + eps;
            let hi = eval(&work)?;
            work[ti].data_mut()[ci] = x0 - eps;
            let lo = eval(&work)?;
            work[ti].data_mut()[ci] = x0;
            let numeric = (hi - lo) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[ti].data()[ci], numeric));
        }
    }
    Ok(worst)
}
