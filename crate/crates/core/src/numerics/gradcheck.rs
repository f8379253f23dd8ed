//! Central finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use super::array::{Array, ParamStore};
use super::graph::{Graph, GraphError, NodeId};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is at float64 noise level are compared on an absolute scale.
///
/// A central difference with step 1e-5 carries roundoff near 1e-11 on an
/// O(1) loss, so gradients much below 1e-7 cannot be resolved to 1e-3.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn scalar_output(graph: &Graph<f64>, output: NodeId) -> Result<(), GraphError> {
    let (rows, cols) = graph.shape(output);
    if (rows, cols) != (1, 1) {
        return Err(GraphError::NonScalarOutput { rows, cols });
    }
    Ok(())
}

/// Analytic gradient of a scalar output for every parameter that requires one.
pub fn analytic_gradients(
    graph: &mut Graph<f64>,
    params: &mut ParamStore<f64>,
    output: NodeId,
    inputs: &[(&str, Array<f64>)],
) -> Result<Vec<Option<Array<f64>>>, GraphError> {
    scalar_output(graph, output)?;
    graph.evaluate(params, inputs)?;
    params.zero_grad();
    graph.backpropagate(params, output, &Array::scalar(1.0))?;
    Ok(params.iter().map(|p| if p.requires_grad { p.grad.clone() } else { None }).collect())
}

/// Central-difference gradient, one pair of evaluations per parameter entry.
pub fn numeric_gradients(
    graph: &mut Graph<f64>,
    params: &mut ParamStore<f64>,
    output: NodeId,
    inputs: &[(&str, Array<f64>)],
    epsilon: f64,
) -> Result<Vec<Option<Array<f64>>>, GraphError> {
    scalar_output(graph, output)?;
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let id = super::array::ParamId(pi);
        if !params.get(id).requires_grad {
            out.push(None);
            continue;
        }
        let mut grad = Array::zeros(params.get(id).value.shape());
        for j in 0..grad.len() {
            let orig = params.get(id).value.values()[j];
            params.get_mut(id).value.values_mut()[j] = orig + epsilon;
            graph.evaluate(params, inputs)?;
            let plus = graph.value_slice(output)[0];
            params.get_mut(id).value.values_mut()[j] = orig - epsilon;
            graph.evaluate(params, inputs)?;
            let minus = graph.value_slice(output)[0];
            params.get_mut(id).value.values_mut()[j] = orig;
            grad.values_mut()[j] = (plus - minus) / (2.0 * epsilon);
        }
        out.push(Some(grad));
    }
    Ok(out)
}

/// Compares two gradient sets entry by entry.
pub fn compare_gradients(
    params: &ParamStore<f64>,
    analytic: &[Option<Array<f64>>],
    numeric: &[Option<Array<f64>>],
    tolerance: f64,
    floor: f64,
) -> GradCheckReport {
    let mut checks = Vec::new();
    for ((p, a), n) in params.iter().zip(analytic).zip(numeric) {
        let Some(n) = n else { continue };
        let zeros;
        let a = match a {
            Some(a) => a,
            None => {
                zeros = Array::zeros(n.shape());
                &zeros
            }
        };
        let mut worst = (0.0f64, 0usize);
        for (j, (&av, &nv)) in a.values().iter().zip(n.values()).enumerate() {
            let e = relative_error(av, nv, floor);
            if e > worst.0 || e.is_nan() {
                worst = (if e.is_nan() { f64::INFINITY } else { e }, j);
            }
        }
        checks.push(ParamCheck {
            name: p.name.clone(),
            entries: n.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic: a.values()[worst.1],
            numeric: n.values()[worst.1],
            pass: worst.0 < tolerance,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    GradCheckReport { params: checks, tolerance, pass }
}

/// Full check: analytic vs central-difference gradient on every parameter entry.
pub fn finite_difference_check(
    graph: &mut Graph<f64>,
    params: &mut ParamStore<f64>,
    output: NodeId,
    inputs: &[(&str, Array<f64>)],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GraphError> {
    let analytic = analytic_gradients(graph, params, output, inputs)?;
    let numeric = numeric_gradients(graph, params, output, inputs, epsilon)?;
    Ok(compare_gradients(params, &analytic, &numeric, tolerance, DEFAULT_ABS_FLOOR))
}
