//! Central finite-difference gradient checks.

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, falling back to the
/// absolute error when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn scalar_output(var: Var<'_>) -> Result<f64> {
    let v = var.value();
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of a scalar function of `inputs` against
/// central differences. Returns the worst relative error over the inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        scalar_output(f(&tape, &vars)?)
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = x - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = x;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic[k].data(), &numeric));
    }
    Ok(worst)
}

/// Finite-difference check of parameter gradients for a scalar function of a
/// parameter store. Returns `(parameter, relative error)` per checked id.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], f: F) -> Result<Vec<(ParamId, f64)>>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let out = f(&tape, store)?;
    tape.backward(out)?;
    let grads = tape.param_grads();
    drop(tape);

    let mut report = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let n = store.value(id).numel();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x + FD_STEP;
            let plus = {
                let tape = Tape::new();
                scalar_output(f(&tape, store)?)?
            };
            store.value_mut(id).data_mut()[i] = x - FD_STEP;
            let minus = {
                let tape = Tape::new();
                scalar_output(f(&tape, store)?)?
            };
            store.value_mut(id).data_mut()[i] = x;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        report.push((id, relative_error(analytic.data(), &numeric)));
    }
    Ok(report)
}
