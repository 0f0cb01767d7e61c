use super::{AutodiffError, Tape, Tensor, Var};

/// Denominator floor for [`grad_check`]'s relative error.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares tape gradients against central finite differences.
///
/// `f` builds a scalar from the bound parameters. Returns the maximum over
/// every parameter element of
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
///
/// The floor keeps components whose true gradient is zero (for example a
/// bias feeding a softmax) from turning finite-difference rounding noise
/// into a relative error of one.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AutodiffError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&tape, &vars)?;
    if !loss.item().is_finite() {
        return Err(AutodiffError::NonFinite {
            context: "grad_check base evaluation".into(),
            index: 0,
        });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |ps: &[Tensor]| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    let mut flat_index = 0;
    for (pi, a) in analytic.iter().enumerate() {
        for (k, &ga) in a.iter().enumerate() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AutodiffError::NonFinite {
                    context: format!("grad_check perturbation of parameter {pi}"),
                    index: flat_index,
                });
            }
            let gn = (plus - minus) / (2.0 * step);
            let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            flat_index += 1;
        }
    }
    Ok(worst)
}
