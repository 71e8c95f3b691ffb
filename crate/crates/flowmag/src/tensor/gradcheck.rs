//! Central finite-difference oracle for analytic gradients. Lives in the
//! library so integration suites can reuse it; the checked quantity is
//! always recomputed from two plain forward passes, independent of the
//! backward implementation.

use super::{Tape, Tensor, Var};

/// Builds the graph over leaf inputs and returns a scalar output.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

fn eval(build: ScalarFn, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item()
}

/// Analytic gradients of the scalar function w.r.t. every input.
pub fn analytic_gradients(build: ScalarFn, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let mut grads = tape.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

/// Central finite differences, element by element.
pub fn numeric_gradients(build: ScalarFn, inputs: &[Tensor], step: f64) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            grad.data_mut()[j] = (eval(build, &plus) - eval(build, &minus)) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Compares analytic and finite-difference gradients. An element passes when
/// |a - n| <= atol + rtol * max(|a|, |n|). Returns the worst relative error
/// on success and a located report on failure.
pub fn check_gradients(
    build: ScalarFn,
    inputs: &[Tensor],
    step: f64,
    rtol: f64,
    atol: f64,
) -> Result<f64, String> {
    let analytic = analytic_gradients(build, inputs);
    let numeric = numeric_gradients(build, inputs, step);
    let mut worst = 0.0f64;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let scale = av.abs().max(nv.abs());
            let diff = (av - nv).abs();
            if diff > atol + rtol * scale {
                return Err(format!(
                    "gradient mismatch at input {i} element {j}: analytic {av:.9e} vs numeric {nv:.9e} (diff {diff:.3e}, rtol {rtol:.1e}, atol {atol:.1e})"
                ));
            }
            if scale > 1e-12 {
                worst = worst.max(diff / scale);
            }
        }
    }
    Ok(worst)
}
