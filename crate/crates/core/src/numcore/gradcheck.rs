//! Central-difference verification of analytic gradients (64-bit).

use std::fmt;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Result, RfnError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor: `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-6,
            floor: 1e-3,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "  {:<24} max rel err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})",
                p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            )?;
        }
        write!(
            f,
            "  {} (max {:.3e}, tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )
    }
}

/// A scalar-valued function of named tensor inputs, expressed on a graph.
pub trait Objective: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> Objective for F {}

pub fn evaluate(f: &impl Objective, inputs: &[(String, Tensor<f64>)]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Loss value and reverse-mode gradient for every input.
pub fn analytic_gradient(
    f: &impl Objective,
    inputs: &[(String, Tensor<f64>)],
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok((g.value(out).item(), grads))
}

/// `(f(p + ε) − f(p − ε)) / 2ε` for every input element.
pub fn numeric_gradient(
    f: &impl Objective,
    inputs: &[(String, Tensor<f64>)],
    epsilon: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<(String, Tensor<f64>)> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for p in 0..work.len() {
        let mut grad = Tensor::zeros(work[p].1.shape());
        for i in 0..work[p].1.len() {
            let orig = work[p].1.data()[i];
            let probe = |delta: f64, work: &mut Vec<(String, Tensor<f64>)>| -> Result<f64> {
                work[p].1.data_mut()[i] = orig + delta;
                let v = evaluate(f, work).map_err(|e| match e {
                    RfnError::NonFinite { .. } => RfnError::GradCheck {
                        param: work[p].0.clone(),
                        index: i,
                    },
                    other => other,
                })?;
                if !v.is_finite() {
                    return Err(RfnError::GradCheck {
                        param: work[p].0.clone(),
                        index: i,
                    });
                }
                Ok(v)
            };
            let plus = probe(epsilon, &mut work)?;
            let minus = probe(-epsilon, &mut work)?;
            work[p].1.data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
        }
        out.push(grad);
    }
    Ok(out)
}

pub fn compare(
    names: &[String],
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    config: &GradCheckConfig,
) -> GradCheckReport {
    let params = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let mut worst = ParamReport {
                name: name.clone(),
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
                let denom = av.abs().max(nv.abs()).max(config.floor);
                let rel = (av - nv).abs() / denom;
                if rel > worst.max_rel_error || i == 0 {
                    worst.max_rel_error = rel;
                    worst.worst_index = i;
                    worst.analytic = av;
                    worst.numeric = nv;
                }
            }
            worst
        })
        .collect();
    GradCheckReport {
        params,
        tolerance: config.tolerance,
    }
}

pub fn grad_check(
    f: &impl Objective,
    inputs: &[(String, Tensor<f64>)],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let value = evaluate(f, inputs)?;
    if !value.is_finite() {
        return Err(RfnError::NonFinite {
            op: "gradient-check objective".into(),
        });
    }
    let (_, analytic) = analytic_gradient(f, inputs)?;
    let numeric = numeric_gradient(f, inputs, config.epsilon)?;
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    Ok(compare(&names, &analytic, &numeric, config))
}
