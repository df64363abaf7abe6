//! First estimation step: linear quantile regression fitted independently
//! on every (group, time) cell.
//!
//! Each cell solves min_a sum_i rho_u(y_i - z_i'a) with the check loss
//! rho_u(v) = (u - 1{v < 0}) v. The solver is a primal-dual interior-point
//! method on the LP dual with a smoothed IRLS fallback for the rare stalled
//! case. Cells are independent, so the (s, t, u) sweep runs in parallel and
//! results are assembled deterministically by grid position.

mod interior_point;
mod irls;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{MicroPanel, Quantile};

/// Duality-gap stopping tolerance for the interior-point iteration.
pub const IP_GAP_TOL: f64 = 1e-9;
/// Iteration cap for the interior-point solver.
pub const IP_MAX_ITER: usize = 100;
/// Iteration cap for the IRLS fallback.
const IRLS_MAX_ITER: usize = 500;

/// Check loss rho_u(v) = (u - 1{v < 0}) v.
///
/// Nonnegative and piecewise linear with a kink at zero; u outside (0, 1)
/// is a domain error.
pub fn check_loss(v: f64, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidQuantile(u));
    }
    Ok(rho(v, u))
}

#[inline]
fn rho(v: f64, u: f64) -> f64 {
    if v < 0.0 {
        (u - 1.0) * v
    } else {
        u * v
    }
}

/// Total check loss of coefficients `a` on a cell (no quantile validation).
pub(crate) fn check_objective_unchecked(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    u: f64,
    a: &DVector<f64>,
) -> f64 {
    let fitted = z * a;
    let mut acc = 0.0;
    for i in 0..y.len() {
        acc += rho(y[i] - fitted[i], u);
    }
    acc
}

/// Total check loss sum_i rho_u(y_i - z_i'a).
pub fn check_objective(z: &DMatrix<f64>, y: &DVector<f64>, u: f64, a: &DVector<f64>) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidQuantile(u));
    }
    Ok(check_objective_unchecked(z, y, u, a))
}

/// How a cell fit was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QrStatus {
    /// Interior-point iteration reached the duality-gap target.
    InteriorPoint,
    /// Interior point stalled; the IRLS fallback produced the fit.
    IrlsFallback,
}

/// A fitted cell: coefficients plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct QrFit {
    pub coefficients: DVector<f64>,
    /// Achieved check loss at the returned coefficients.
    pub objective: f64,
    pub iterations: usize,
    pub status: QrStatus,
}

/// Fit one quantile regression by check-loss minimization.
///
/// Requires N >= J and a numerically full-rank design. Quantile-regression
/// solutions can be set valued; the converged point is reported and only the
/// achieved objective is contractual.
pub fn fit_qr(z: &DMatrix<f64>, y: &DVector<f64>, u: f64) -> Result<QrFit> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidQuantile(u));
    }
    let (n, j) = (z.nrows(), z.ncols());
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "quantile regression inputs",
            expected: format!("{n} outcomes"),
            got: format!("{}", y.len()),
        });
    }
    if j == 0 || n < j {
        return Err(Error::DimensionMismatch {
            what: "quantile regression design",
            expected: format!("N >= J >= 1"),
            got: format!("N={n}, J={j}"),
        });
    }
    check_column_rank(z)?;

    let out = interior_point::solve(z, y, u, IP_GAP_TOL, IP_MAX_ITER);
    if out.converged {
        let objective = check_objective_unchecked(z, y, u, &out.coefficients);
        return Ok(QrFit {
            coefficients: out.coefficients,
            objective,
            iterations: out.iterations,
            status: QrStatus::InteriorPoint,
        });
    }

    // Stalled interior point: try the smoothed reweighting path and keep
    // whichever point achieves the lower loss.
    let ip_obj = check_objective_unchecked(z, y, u, &out.coefficients);
    if let Some((coef, its)) = irls::solve(z, y, u, IRLS_MAX_ITER) {
        let obj = check_objective_unchecked(z, y, u, &coef);
        if obj.is_finite() {
            if ip_obj.is_finite() && ip_obj <= obj {
                return Ok(QrFit {
                    coefficients: out.coefficients,
                    objective: ip_obj,
                    iterations: out.iterations,
                    status: QrStatus::IrlsFallback,
                });
            }
            return Ok(QrFit {
                coefficients: coef,
                objective: obj,
                iterations: out.iterations + its,
                status: QrStatus::IrlsFallback,
            });
        }
    }
    Err(Error::SolverFailure {
        iterations: out.iterations,
        gap: out.gap,
    })
}

/// Numerical rank check, naming the offending columns.
///
/// A column is flagged when its residual after projection on the previously
/// accepted columns falls below a relative tolerance (modified Gram-Schmidt
/// sweep; deterministic and cheap at micro-regression widths).
fn check_column_rank(z: &DMatrix<f64>) -> Result<()> {
    let j = z.ncols();
    let tol = 1e-10;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(j);
    let mut offending = Vec::new();
    let mut smallest_ratio = f64::INFINITY;
    for k in 0..j {
        let mut col = z.column(k).clone_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 {
            offending.push(k);
            continue;
        }
        for q in &basis {
            let proj = q.dot(&col);
            col.axpy(-proj, q, 1.0);
        }
        let ratio = col.norm() / norm0;
        smallest_ratio = smallest_ratio.min(ratio);
        if ratio < tol {
            offending.push(k);
        } else {
            col /= col.norm();
            basis.push(col);
        }
    }
    if offending.is_empty() {
        Ok(())
    } else {
        Err(Error::SingularDesign {
            columns: offending,
            smallest_sv: smallest_ratio,
        })
    }
}

/// Per-cell solver diagnostics retained in the first-step output.
#[derive(Debug, Clone, Serialize)]
pub struct CellDiagnostics {
    pub status: QrStatus,
    pub iterations: usize,
    pub objective: f64,
}

/// First-step estimates for one quantile level: one coefficient vector per
/// (group, time) cell.
#[derive(Debug, Clone)]
pub struct QuantileCoefficientPanel {
    u: Quantile,
    s_count: usize,
    t_count: usize,
    /// Coefficients, indexed s * T + t.
    alpha: Vec<DVector<f64>>,
    diagnostics: Vec<CellDiagnostics>,
}

impl QuantileCoefficientPanel {
    pub fn quantile(&self) -> Quantile {
        self.u
    }

    pub fn num_groups(&self) -> usize {
        self.s_count
    }

    pub fn num_periods(&self) -> usize {
        self.t_count
    }

    pub fn num_regressors(&self) -> usize {
        self.alpha[0].len()
    }

    /// Coefficient vector of cell (s, t).
    pub fn alpha(&self, s: usize, t: usize) -> &DVector<f64> {
        &self.alpha[s * self.t_count + t]
    }

    pub fn diagnostics(&self, s: usize, t: usize) -> &CellDiagnostics {
        &self.diagnostics[s * self.t_count + t]
    }

    /// The S x T panel of estimates for coefficient `j`, the response panel
    /// of the second step.
    pub fn coefficient_panel(&self, j: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.s_count, self.t_count, |s, t| {
            self.alpha[s * self.t_count + t][j]
        })
    }
}

/// Run the first step: fit every (group, time) cell at every quantile.
///
/// Cells are independent and the sweep is parallel; output containers are
/// assembled by grid position, so results do not depend on evaluation
/// order. Any failing cell aborts the whole step, annotated with its
/// (group, time, u) coordinates: the second step needs the complete grid.
pub fn fit_first_step(
    panel: &MicroPanel,
    quantiles: &[f64],
) -> Result<BTreeMap<Quantile, QuantileCoefficientPanel>> {
    let levels: Vec<Quantile> = quantiles
        .iter()
        .map(|&u| Quantile::new(u))
        .collect::<Result<_>>()?;

    let s_count = panel.num_groups();
    let t_count = panel.num_periods();
    let n_cells = s_count * t_count;

    let jobs: Vec<(usize, usize)> = (0..levels.len())
        .flat_map(|q| (0..n_cells).map(move |c| (q, c)))
        .collect();

    let fits: Vec<Result<QrFit>> = jobs
        .par_iter()
        .map(|&(q, c)| {
            let (s, t) = (c / t_count, c % t_count);
            let cell = panel.cell(s, t);
            fit_qr(&cell.z, &cell.y, levels[q].value()).map_err(|e| {
                e.at_cell(
                    panel.group_labels()[s],
                    panel.time_labels()[t],
                    levels[q].value(),
                )
            })
        })
        .collect();

    let mut out = BTreeMap::new();
    let mut iter = fits.into_iter();
    for &u in &levels {
        let mut alpha = Vec::with_capacity(n_cells);
        let mut diagnostics = Vec::with_capacity(n_cells);
        for _ in 0..n_cells {
            let fit = iter.next().expect("job count mismatch")?;
            alpha.push(fit.coefficients);
            diagnostics.push(CellDiagnostics {
                status: fit.status,
                iterations: fit.iterations,
                objective: fit.objective,
            });
        }
        out.insert(
            u,
            QuantileCoefficientPanel {
                u,
                s_count,
                t_count,
                alpha,
                diagnostics,
            },
        );
    }
    Ok(out)
}

/// Subgradient optimality diagnostic.
///
/// For each column k returns (|sum_i z_ik psi_i|, sum over residual-zero
/// rows of |z_ik|): the first must not exceed the second at an optimum,
/// where psi_i = u - 1{r_i < 0} over rows with nonzero residual.
pub fn subgradient_slack(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    u: f64,
    a: &DVector<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let n = z.nrows();
    let j = z.ncols();
    let fitted = z * a;
    let scale = 1.0 + y.amax();
    let ztol = 1e-7 * scale;
    let mut lhs = vec![0.0; j];
    let mut slack = vec![0.0; j];
    for i in 0..n {
        let r = y[i] - fitted[i];
        if r.abs() <= ztol {
            for k in 0..j {
                slack[k] += z[(i, k)].abs();
            }
        } else {
            let psi = u - if r < 0.0 { 1.0 } else { 0.0 };
            for k in 0..j {
                lhs[k] += z[(i, k)] * psi;
            }
        }
    }
    (lhs.into_iter().map(f64::abs).collect(), slack)
}

#[cfg(test)]
mod tests;
