//! Second estimation step: least squares with interactive fixed effects on
//! the group-level coefficient panel.
//!
//! For one (coefficient, quantile) pair the S x T panel A of first-step
//! estimates is modeled as
//!
//!   A_s = D_s delta + X_s beta + F lambda_s + eta_s,
//!
//! where D_s = d_s [e_{t0}, ..., e_T] selects the post-policy periods, F is
//! a T x r factor matrix normalized by F'F/T = I_r, and the loadings
//! satisfy a diagonal Lambda'Lambda/S. The sum of squared residuals is
//! minimized by alternating
//!
//!   - a PCA step: F = sqrt(T) times the top-r eigenvectors of the T x T
//!     second-moment matrix of the de-regressed panel, Lambda = W F / T;
//!   - a coefficient step: the joint closed-form least-squares update of
//!     (delta, beta) at fixed (F, Lambda).
//!
//! Each block update is exact, so the SSR trace is non-increasing at a
//! fixed factor count. The factor count is re-selected every iteration by
//! the eigen-ratio rule unless pinned via [`IfeConfig::r_fixed`].
//!
//! Convergence is declared when the Euclidean changes of delta and beta and
//! the Frobenius change of the common component F Lambda' all fall below
//! the tolerance. The Frobenius norm is used for the matrix criterion; the
//! product F Lambda' rather than its factors is compared because the
//! factorization is identified only up to rotation.

mod select;

pub use select::{select_num_factors, FactorSelection};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::GroupDesign;

/// Default convergence tolerance on parameter and common-component changes.
pub const DEFAULT_TOL: f64 = 1e-5;
/// Default iteration cap; typical fits converge within a handful of rounds.
pub const DEFAULT_MAX_ITER: usize = 1000;

/// Controls for the iterative fit.
#[derive(Debug, Clone)]
pub struct IfeConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Pin the factor count instead of re-selecting it each iteration.
    pub r_fixed: Option<usize>,
}

impl Default for IfeConfig {
    fn default() -> Self {
        IfeConfig {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            r_fixed: None,
        }
    }
}

/// One iteration of the alternating minimization.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// SSR at the iteration's final (delta, beta, F, Lambda).
    pub ssr: f64,
    pub delta_change: f64,
    pub beta_change: f64,
    /// Frobenius change of the common component F Lambda'.
    pub common_change: f64,
    /// Factor count used this iteration.
    pub r: usize,
    /// Post-period policy coefficients after this iteration.
    #[serde(skip)]
    pub delta: DVector<f64>,
}

/// A converged (or capped) interactive-fixed-effects fit.
#[derive(Debug, Clone)]
pub struct FactorModelFit {
    /// Policy-effect path over the post-policy periods, length T - t0.
    pub delta: DVector<f64>,
    /// Group-covariate coefficients, length K.
    pub beta: DVector<f64>,
    /// T x r factors with F'F/T = I_r.
    pub f: DMatrix<f64>,
    /// S x r loadings with Lambda'Lambda/S diagonal, entries descending.
    pub lambda: DMatrix<f64>,
    /// S x T residuals, exactly A - D delta - X beta - Lambda F'.
    pub eta: DMatrix<f64>,
    /// Selected factor count.
    pub r: usize,
    /// Descending spectrum of the de-regressed second-moment matrix at the
    /// final iteration.
    pub eigenvalues: Vec<f64>,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FactorModelFit {
    /// The common component Lambda F', an S x T matrix.
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.lambda * self.f.transpose()
    }

    /// Residual variance profile is occasionally useful downstream; the
    /// achieved SSR is the squared Frobenius norm of `eta`.
    pub fn ssr(&self) -> f64 {
        self.eta.iter().map(|e| e * e).sum()
    }
}

fn check_panel_conformity(a: &DMatrix<f64>, design: &GroupDesign) -> Result<()> {
    if a.nrows() != design.num_groups() || a.ncols() != design.num_periods() {
        return Err(Error::DimensionMismatch {
            what: "coefficient panel",
            expected: format!("{} x {}", design.num_groups(), design.num_periods()),
            got: format!("{} x {}", a.nrows(), a.ncols()),
        });
    }
    Ok(())
}

/// Sum of squared residuals sum_s ||A_s - D_s delta - X_s beta - F lambda_s||^2.
pub fn ssr(
    a: &DMatrix<f64>,
    design: &GroupDesign,
    delta: &DVector<f64>,
    beta: &DVector<f64>,
    f: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
) -> Result<f64> {
    check_panel_conformity(a, design)?;
    let p = design.num_post_periods();
    let k = design.num_covariates();
    let r = f.ncols();
    if delta.len() != p || beta.len() != k {
        return Err(Error::DimensionMismatch {
            what: "ssr coefficients",
            expected: format!("delta {p}, beta {k}"),
            got: format!("delta {}, beta {}", delta.len(), beta.len()),
        });
    }
    if f.nrows() != design.num_periods() || lambda.nrows() != design.num_groups() || lambda.ncols() != r {
        return Err(Error::DimensionMismatch {
            what: "ssr factor structure",
            expected: format!("F {} x {r}, Lambda {} x {r}", design.num_periods(), design.num_groups()),
            got: format!(
                "F {} x {}, Lambda {} x {}",
                f.nrows(),
                f.ncols(),
                lambda.nrows(),
                lambda.ncols()
            ),
        });
    }
    let mut resid = residual_panel(a, design, delta, beta);
    resid -= lambda * f.transpose();
    Ok(resid.iter().map(|e| e * e).sum())
}

/// The de-regressed panel W with W_st = A_st - d_st delta_{t} - x_st' beta.
fn residual_panel(
    a: &DMatrix<f64>,
    design: &GroupDesign,
    delta: &DVector<f64>,
    beta: &DVector<f64>,
) -> DMatrix<f64> {
    let t0 = design.t0_index();
    let t_count = design.num_periods();
    let mut w = a.clone();
    for s in 0..design.num_groups() {
        let xb = design.x(s) * beta;
        let ds = design.d()[s];
        for t in 0..t_count {
            let mut v = w[(s, t)] - xb[t];
            if ds == 1.0 && t >= t0 {
                v -= delta[t - t0];
            }
            w[(s, t)] = v;
        }
    }
    w
}

/// Precomputed normal equations of the (delta, beta) least-squares block.
///
/// The system matrix depends only on the design, so one factorization
/// serves the initial estimate and every subsequent coefficient step.
struct CoefficientSolver {
    p: usize,
    k: usize,
    t0: usize,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl CoefficientSolver {
    fn new(design: &GroupDesign) -> Result<Self> {
        let p = design.num_post_periods();
        let k = design.num_covariates();
        let t0 = design.t0_index();
        let t_count = design.num_periods();
        let n_d: f64 = design.d().iter().sum();

        let mut m = DMatrix::<f64>::zeros(p + k, p + k);
        for i in 0..p {
            m[(i, i)] = n_d;
        }
        if k > 0 {
            // Cross block sum_s d_s X_s[t0.., :] and the covariate Gram.
            let mut cross = DMatrix::<f64>::zeros(p, k);
            let mut gram = DMatrix::<f64>::zeros(k, k);
            for s in 0..design.num_groups() {
                let xs = design.x(s);
                gram += xs.transpose() * xs;
                if design.d()[s] == 1.0 {
                    for t in t0..t_count {
                        for c in 0..k {
                            cross[(t - t0, c)] += xs[(t, c)];
                        }
                    }
                }
            }
            m.view_mut((0, p), (p, k)).copy_from(&cross);
            m.view_mut((p, 0), (k, p)).copy_from(&cross.transpose());
            m.view_mut((p, p), (k, k)).copy_from(&gram);
        }

        let chol = Cholesky::new(m).ok_or_else(|| {
            Error::Identification(
                "normal equations of the policy/covariate block are singular".into(),
            )
        })?;
        Ok(CoefficientSolver { p, k, t0, chol })
    }

    /// Joint minimizer of ||target_s - D_s delta - X_s beta||^2 over s.
    fn solve(&self, target: &DMatrix<f64>, design: &GroupDesign) -> (DVector<f64>, DVector<f64>) {
        let t_count = design.num_periods();
        let mut rhs = DVector::<f64>::zeros(self.p + self.k);
        for s in 0..design.num_groups() {
            if design.d()[s] == 1.0 {
                for t in self.t0..t_count {
                    rhs[t - self.t0] += target[(s, t)];
                }
            }
            if self.k > 0 {
                let xs = design.x(s);
                for c in 0..self.k {
                    let mut acc = 0.0;
                    for t in 0..t_count {
                        acc += xs[(t, c)] * target[(s, t)];
                    }
                    rhs[self.p + c] += acc;
                }
            }
        }
        let sol = self.chol.solve(&rhs);
        let delta = DVector::from_fn(self.p, |i, _| sol[i]);
        let beta = DVector::from_fn(self.k, |i, _| sol[self.p + i]);
        (delta, beta)
    }
}

/// Least-squares estimate of (delta, beta) with the factor component absent.
pub fn initial_estimate(
    a: &DMatrix<f64>,
    design: &GroupDesign,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_panel_conformity(a, design)?;
    let solver = CoefficientSolver::new(design)?;
    Ok(solver.solve(a, design))
}

/// Joint update of (delta, beta) at a fixed factor structure.
pub fn coef_step(
    a: &DMatrix<f64>,
    design: &GroupDesign,
    f: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_panel_conformity(a, design)?;
    let solver = CoefficientSolver::new(design)?;
    let target = a - lambda * f.transpose();
    Ok(solver.solve(&target, design))
}

/// Output of one principal-component extraction.
#[derive(Debug, Clone)]
pub struct PcaStep {
    /// T x r factors, F'F/T = I_r.
    pub f: DMatrix<f64>,
    /// S x r loadings, Lambda'Lambda/S = diag of the leading eigenvalues.
    pub lambda: DMatrix<f64>,
    /// Full descending spectrum of the second-moment matrix.
    pub eigenvalues: Vec<f64>,
    /// Set when the r-th and (r+1)-th eigenvalues are numerically tied and
    /// the extracted basis is therefore ambiguous.
    pub tied: bool,
}

/// Extract r principal components from the de-regressed panel.
///
/// The factors are the top-r eigenvectors of W'W/(ST) scaled by sqrt(T);
/// the loadings follow as W F / T. Each factor column is sign-normalized so
/// its largest-magnitude loading is positive, which leaves the product
/// F Lambda' untouched but makes traces comparable across runs.
pub fn pca_step(
    a: &DMatrix<f64>,
    design: &GroupDesign,
    delta: &DVector<f64>,
    beta: &DVector<f64>,
    r: usize,
) -> Result<PcaStep> {
    check_panel_conformity(a, design)?;
    let w = residual_panel(a, design, delta, beta);
    pca_of_residual(&w, r)
}

fn second_moment(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (s_count, t_count) = (w.nrows(), w.ncols());
    let mut l = w.transpose() * w;
    l /= (s_count * t_count) as f64;
    // Kill round-off asymmetry before the symmetric eigensolver.
    let lt = l.transpose();
    l = (l + lt) * 0.5;
    l
}

fn sorted_spectrum(l: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new(l.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigendecomposition produced non-finite values".into()));
    }
    let t = l.nrows();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::<f64>::zeros(t, t);
    for (c, &i) in order.iter().enumerate() {
        vectors.column_mut(c).copy_from(&eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

fn pca_of_residual(w: &DMatrix<f64>, r: usize) -> Result<PcaStep> {
    let (s_count, t_count) = (w.nrows(), w.ncols());
    if r > s_count.min(t_count) {
        return Err(Error::DimensionMismatch {
            what: "factor count",
            expected: format!("r <= min(S, T) = {}", s_count.min(t_count)),
            got: format!("{r}"),
        });
    }
    let l = second_moment(w);
    let (values, vectors) = sorted_spectrum(&l)?;

    let tied = r >= 1
        && r < t_count
        && (values[r - 1] - values[r]).abs() <= 1e-12 * values[0].abs().max(1.0);

    let sqrt_t = (t_count as f64).sqrt();
    let mut f = DMatrix::<f64>::zeros(t_count, r);
    for c in 0..r {
        f.column_mut(c).copy_from(&(vectors.column(c) * sqrt_t));
    }
    let mut lambda = w * &f / t_count as f64;

    // Sign convention: largest-magnitude loading in each column positive.
    for c in 0..r {
        let mut idx = 0;
        let mut max_abs = 0.0;
        for s in 0..s_count {
            let v = lambda[(s, c)].abs();
            if v > max_abs {
                max_abs = v;
                idx = s;
            }
        }
        if lambda[(idx, c)] < 0.0 {
            lambda.column_mut(c).neg_mut();
            f.column_mut(c).neg_mut();
        }
    }

    Ok(PcaStep {
        f,
        lambda,
        eigenvalues: values,
        tied,
    })
}

/// Fit the interactive-fixed-effects model by alternating least squares.
///
/// Non-convergence within the iteration cap is not an error; the fit is
/// returned with `converged = false`.
pub fn fit_ife(a: &DMatrix<f64>, design: &GroupDesign, cfg: &IfeConfig) -> Result<FactorModelFit> {
    check_panel_conformity(a, design)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("coefficient panel contains non-finite values".into()));
    }
    if let Some(r) = cfg.r_fixed {
        if r > design.num_groups().min(design.num_periods()) {
            return Err(Error::DimensionMismatch {
                what: "fixed factor count",
                expected: format!(
                    "r <= min(S, T) = {}",
                    design.num_groups().min(design.num_periods())
                ),
                got: format!("{r}"),
            });
        }
    }

    let s_count = design.num_groups();
    let solver = CoefficientSolver::new(design)?;
    let (mut delta, mut beta) = solver.solve(a, design);

    let mut warnings = Vec::new();
    let mut trace = Vec::new();
    let mut prev_common = DMatrix::<f64>::zeros(s_count, design.num_periods());
    let mut f = DMatrix::<f64>::zeros(design.num_periods(), 0);
    let mut lambda = DMatrix::<f64>::zeros(s_count, 0);
    let mut eigenvalues = Vec::new();
    let mut converged = false;

    for iteration in 1..=cfg.max_iter {
        let w = residual_panel(a, design, &delta, &beta);
        let l = second_moment(&w);
        let (values, _) = sorted_spectrum(&l)?;
        let r = match cfg.r_fixed {
            Some(r) => r,
            None => {
                let sel = select_num_factors(&values, s_count)?;
                if sel.no_structure && iteration == 1 {
                    warnings.push("no factor structure detected in the spectrum".into());
                }
                sel.r
            }
        };

        let step = pca_of_residual(&w, r)?;
        if step.tied && warnings.iter().all(|w: &String| !w.starts_with("tied")) {
            warnings.push(format!(
                "tied eigenvalues at the factor-count boundary (iteration {iteration}); basis is ambiguous"
            ));
        }
        f = step.f;
        lambda = step.lambda;
        eigenvalues = step.eigenvalues;

        let common = &lambda * f.transpose();
        let target = a - &common;
        let (delta_new, beta_new) = solver.solve(&target, design);

        let delta_change = (&delta_new - &delta).norm();
        let beta_change = (&beta_new - &beta).norm();
        let common_change = (&common - &prev_common).norm();

        delta = delta_new;
        beta = beta_new;
        prev_common = common;

        let resid = residual_panel(a, design, &delta, &beta) - &prev_common;
        let ssr_value: f64 = resid.iter().map(|e| e * e).sum();

        trace.push(IterationRecord {
            iteration,
            ssr: ssr_value,
            delta_change,
            beta_change,
            common_change,
            r,
            delta: delta.clone(),
        });

        if delta_change <= cfg.tol && beta_change <= cfg.tol && common_change <= cfg.tol {
            converged = true;
            break;
        }
    }

    let eta = residual_panel(a, design, &delta, &beta) - &prev_common;
    let r = f.ncols();
    Ok(FactorModelFit {
        delta,
        beta,
        f,
        lambda,
        eta,
        r,
        eigenvalues,
        trace,
        converged,
        warnings,
    })
}

#[cfg(test)]
mod tests;
