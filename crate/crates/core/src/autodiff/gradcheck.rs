//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use super::{Graph, Tensor, TensorError, Var};

/// Step used for `(f(x+h) - f(x-h)) / 2h`.
pub const STEP: f64 = 1e-5;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per-input `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-8)`.
    pub relative_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F, E>(f: &F, inputs: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.value(root).item())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, for every input tensor.
pub fn check<F, E>(f: F, inputs: &[Tensor]) -> Result<GradReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("tracked leaf").to_vec())
        .collect();

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, an) in analytic.iter().enumerate() {
        let mut num = vec![0.0; an.len()];
        for j in 0..an.len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let fp = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let fm = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            num[j] = (fp - fm) / (2.0 * STEP);
        }
        let diff = an
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = an.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        relative_errors.push(diff / na.max(nn).max(1e-8));
    }
    Ok(GradReport { relative_errors })
}
