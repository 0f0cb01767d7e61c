use super::GatError;
use crate::autodiff::{Tape, Tensor, Var};

/// Additive constant in the scalewise denominator.
pub const SCALE_EPS: f64 = 1e-8;

fn check_tau(tau: f64) -> Result<(), GatError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(GatError::BadTemperature(tau))
    }
}

/// Contrastive InfoMax over cosine similarities: each node's positive is
/// the graph embedding `g`, its negatives are all other nodes.
pub fn infomax_loss_var<'t>(h: Var<'t>, g: Var<'t>, tau: f64) -> Result<Var<'t>, GatError> {
    check_tau(tau)?;
    let tape = h.tape();
    let n = h.shape()[0];
    if n == 0 {
        return Err(GatError::Empty("infomax_loss"));
    }
    let inv = 1.0 / tau;
    let u = h.l2_normalize_rows()?;
    let gn = g.l2_normalize_rows()?;
    let pos = u.matmul(gn.transpose()?)?.scale(inv).reshape(vec![n])?;
    let sims = u.matmul(u.transpose()?)?.scale(inv);
    let mask: Vec<f64> = (0..n * n)
        .map(|k| if k / n == k % n { 0.0 } else { 1.0 })
        .collect();
    let mask = tape.constant_data(vec![n, n], mask)?;
    // Cosines are at most 1, so shifting by 1/tau keeps every exponent <= 0.
    let neg = sims.add_scalar(-inv).exp().mul(mask)?.sum_axis(1)?;
    let den = neg.add(pos.add_scalar(-inv).exp())?;
    Ok(den.ln().sub(pos)?.mean().add_scalar(inv))
}

/// Pairwise level-consistency loss weighted by `w_m w_l`; `sim` between two
/// levels is the mean cosine over all cross-level node pairs. With
/// `contrastive`, the mean intra-level cosine of both levels joins the
/// denominator as negatives.
pub fn scalewise_loss_var<'t>(
    tape: &'t Tape,
    levels: &[Var<'t>],
    weights: &[f64],
    tau: f64,
    contrastive: bool,
) -> Result<Var<'t>, GatError> {
    check_tau(tau)?;
    if weights.len() != levels.len() {
        return Err(GatError::LevelMismatch {
            expected: levels.len(),
            actual: weights.len(),
        });
    }
    let inv = 1.0 / tau;
    let mut means = Vec::with_capacity(levels.len());
    for h in levels {
        if h.shape()[0] == 0 {
            return Err(GatError::Empty("scalewise_loss level"));
        }
        means.push(h.l2_normalize_rows()?.mean_axis(0)?);
    }
    let intra = |k: usize| -> Result<Option<Var<'t>>, GatError> {
        let n = levels[k].shape()[0];
        if n < 2 {
            return Ok(None);
        }
        let sq = means[k].matmul(means[k].transpose()?)?;
        let s = sq.scale(n as f64 / (n - 1) as f64).add_scalar(-1.0 / (n - 1) as f64);
        Ok(Some(s.scale(inv).exp()))
    };
    let mut total = tape.scalar(0.0);
    for m in 0..levels.len() {
        for l in m + 1..levels.len() {
            let w = weights[m] * weights[l];
            let x = means[m].matmul(means[l].transpose()?)?.scale(inv);
            let term = if contrastive {
                let mut den = x.exp().add_scalar(SCALE_EPS);
                for k in [m, l] {
                    if let Some(e) = intra(k)? {
                        den = den.add(e)?;
                    }
                }
                den.ln().sub(x)?
            } else {
                x.neg().exp().scale(SCALE_EPS).ln_1p()
            };
            total = total.add(term.reshape(vec![1])?.scale(w))?;
        }
    }
    Ok(total)
}

pub fn infomax_loss(node_embeddings: &Tensor, g: &[f64], tau: f64) -> Result<f64, GatError> {
    let tape = Tape::new();
    let h = tape.constant(node_embeddings);
    let gv = tape.constant_data(vec![1, g.len()], g.to_vec())?;
    if node_embeddings.shape().len() != 2 || node_embeddings.cols() != g.len() {
        return Err(GatError::WidthMismatch {
            expected: g.len(),
            actual: node_embeddings.shape().last().copied().unwrap_or(0),
        });
    }
    Ok(infomax_loss_var(h, gv, tau)?.item())
}

pub fn scalewise_loss(
    levels: &[Tensor],
    weights: &[f64],
    tau: f64,
    contrastive: bool,
) -> Result<f64, GatError> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = levels.iter().map(|t| tape.constant(t)).collect();
    Ok(scalewise_loss_var(&tape, &vars, weights, tau, contrastive)?.item())
}
