use ndarray::Array2;

use crate::error::{Error, Result};

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Largest relative error between `analytic` gradients of `loss` and central
/// finite differences with step `h`, over every entry of every tensor.
///
/// `perturb(p, slot, row, col, delta)` must return a copy of `p` with that
/// single entry shifted by `delta`.
pub fn max_relative_error<P, L, F>(
    params: &P,
    analytic: &[Option<Array2<f64>>],
    h: f64,
    loss: L,
    perturb: F,
) -> Result<f64>
where
    L: Fn(&P) -> Result<f64>,
    F: Fn(&P, usize, usize, usize, f64) -> P,
{
    let mut worst: f64 = 0.0;
    for (slot, g) in analytic.iter().enumerate() {
        let Some(g) = g else { continue };
        for ((r, c), &a) in g.indexed_iter() {
            let up = loss(&perturb(params, slot, r, c, h))?;
            let down = loss(&perturb(params, slot, r, c, -h))?;
            let num = (up - down) / (2.0 * h);
            if !num.is_finite() {
                return Err(Error::Numerical(format!("finite difference at slot {slot} ({r},{c}) is {num}")));
            }
            let err = (a - num).abs() / a.abs().max(num.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
