//! Smoothed iteratively-reweighted least squares fallback.
//!
//! Minimizes the check loss through the weighted-L2 representation
//! rho_u(r) = w(r) r^2 with w(r) = (u 1{r>0} + (1-u) 1{r<0}) / |r|, the
//! residual magnitude floored at a small epsilon. Slower and slightly less
//! exact than the interior-point path; used only when that path stalls.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::check_objective_unchecked;

pub(crate) fn solve(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    u: f64,
    max_iter: usize,
) -> Option<(DVector<f64>, usize)> {
    let n = z.nrows();
    let j = z.ncols();
    let scale = 1.0 + y.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let floor = 1e-10 * scale;

    // OLS start.
    let ztz = z.transpose() * z;
    let zty = z.transpose() * y;
    let mut coef = Cholesky::new(ztz)?.solve(&zty);

    let mut best = coef.clone();
    let mut best_obj = check_objective_unchecked(z, y, u, &coef);
    let mut wz = DMatrix::<f64>::zeros(n, j);

    for iter in 1..=max_iter {
        let r = y - z * &coef;
        for i in 0..n {
            let ri = r[i];
            let side = if ri >= 0.0 { u } else { 1.0 - u };
            let w = side / ri.abs().max(floor);
            for k in 0..j {
                wz[(i, k)] = w * z[(i, k)];
            }
        }
        let m = z.transpose() * &wz;
        let rhs = wz.transpose() * y;
        let next = match Cholesky::new(m.clone()) {
            Some(ch) => ch.solve(&rhs),
            None => m.lu().solve(&rhs)?,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Some((best, iter));
        }
        let obj = check_objective_unchecked(z, y, u, &next);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from(&next);
        }
        let delta = (&next - &coef).norm();
        coef = next;
        if delta <= 1e-12 * (1.0 + coef.norm()) {
            return Some((best, iter));
        }
    }
    Some((best, max_iter))
}
