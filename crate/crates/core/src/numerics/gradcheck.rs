//! Central-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use super::NumericsError;

/// Largest disagreement found by [`grad_check_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn evaluate<F>(f: &F, params: &ParameterStore<f64>) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var, NumericsError>,
{
    let mut g = Graph::inference();
    let out = f(&mut g, params)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(NumericsError::Eval(format!("objective must be scalar, got {:?}", v.shape())));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(NumericsError::Eval("objective is not finite".into()));
    }
    Ok(y)
}

/// Max over all parameter scalars of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, params: &ParameterStore<f64>, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var, NumericsError>,
{
    grad_check_report(f, params, eps).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, params: &ParameterStore<f64>, eps: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    if !g.value(out).item().is_finite() {
        return Err(NumericsError::Eval("objective is not finite".into()));
    }
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut work = params.clone();
    for (name, tensor) in params.iter() {
        let grad = analytic.get(name);
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work.get_mut(name).expect("same layout").data_mut()[i] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work.get_mut(name).expect("same layout").data_mut()[i] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work.get_mut(name).expect("same layout").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map_or(0.0, |t| t.data()[i]);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_parameter = name.to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
