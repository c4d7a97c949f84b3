use super::{Graph, NumericsError, Tensor, Var};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` receives a fresh graph and one leaf per tensor in `point` and must return
/// a scalar. Elements whose gradient magnitudes are both below `floor` are
/// compared in absolute terms against `floor`.
pub fn finite_difference_check<F>(
    f: F,
    point: &[Tensor],
    eps: f64,
    floor: f64,
) -> Result<GradCheck, NumericsError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |pt: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = pt.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor> = point.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point[ti].shape()));
        for j in 0..point[ti].numel() {
            let x0 = point[ti].data()[j];
            work[ti].data_mut()[j] = x0 + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = x0 - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
