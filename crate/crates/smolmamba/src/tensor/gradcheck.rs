//! Central finite-difference validation of analytic gradients.

use super::tape::{Tape, Var};
use super::{DenseTensor, TensorError};

/// Compares the tape's analytic gradients of a scalar-valued function
/// against central finite differences, entry by entry, and returns the
/// maximum relative error `|analytic - fd| / max(1, |fd|)`.
///
/// `f` must be deterministic. All evaluation runs in 64-bit.
pub fn check_gradients<F>(f: F, params: &[DenseTensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    assert!(
        (1e-6..=1e-3).contains(&eps),
        "finite-difference step must lie in [1e-6, 1e-3]"
    );

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(TensorError::NonFiniteLoss);
    }
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[DenseTensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(TensorError::NonFiniteLoss);
        }
        Ok(v)
    };

    let mut work: Vec<DenseTensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let zero;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zero = DenseTensor::zeros(params[pi].shape());
                &zero
            }
        };
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (analytic.data()[j] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
