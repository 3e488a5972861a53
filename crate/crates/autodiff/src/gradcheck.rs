//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
    pub rel_err: f64,
}

/// Checks gradients of a scalar function of several tensors.
///
/// `build` receives a fresh graph and one `Var` per input (all bound as
/// trainable leaves) and must return a scalar loss. Every input element is
/// perturbed by `±h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, mut build: F) -> Result<Vec<GradCheck>>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).into_data()).collect();

    let mut values = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (k, analytic) in analytic.into_iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + h;
            let plus = eval(&values, &mut build)?;
            values[k].data_mut()[i] = orig - h;
            let minus = eval(&values, &mut build)?;
            values[k].data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(analytic.iter().copied())
            .max(norm(numeric.iter().copied()))
            .max(1e-8);
        out.push(GradCheck {
            rel_err: diff / scale,
            analytic,
            numeric,
        });
    }
    Ok(out)
}

fn eval<F>(values: &[Tensor], build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest relative error across all inputs of a check.
pub fn max_rel_err(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}
