//! Primal-dual interior-point solver for the check-loss minimization.
//!
//! The problem min_a sum_i rho_u(y_i - z_i'a) is solved through its LP dual
//!
//!   max { y'x : Z'x = (1 - u) Z'1, 0 <= x <= 1 },
//!
//! whose equality multiplier is exactly the coefficient vector a. The
//! iteration is a Mehrotra predictor-corrector on the bounded-variable dual
//! (the classic Frisch-Newton scheme for quantile regression). Each step
//! solves a J x J normal-equation system, so the cost per iteration is
//! O(N J^2).
//!
//! The starting point x = (1 - u) 1 is exactly feasible, and dual
//! feasibility is arranged at initialization, so the duality gap
//! P(a) - D(x) between the achieved check loss and the dual objective is a
//! valid optimality certificate throughout.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Outcome of one interior-point solve.
pub(crate) struct IpOutcome {
    pub coefficients: DVector<f64>,
    pub iterations: usize,
    pub gap: f64,
    pub converged: bool,
}

/// Largest fraction of the distance to the boundary taken per step.
const STEP_DAMPING: f64 = 0.9995;
/// Consecutive iterations without meaningful gap reduction before the
/// iteration is declared stalled.
const STALL_LIMIT: usize = 8;

pub(crate) fn solve(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    u: f64,
    gap_tol: f64,
    max_iter: usize,
) -> IpOutcome {
    let n = z.nrows();
    let j = z.ncols();

    // Right-hand side of the dual equality constraint and data scale.
    let mut b = vec![0.0; j];
    for k in 0..j {
        b[k] = (1.0 - u) * z.column(k).sum();
    }
    let sum_y: f64 = y.sum();

    // Interior starting point: exactly primal feasible.
    let mut a = vec![1.0 - u; n];
    let mut s = vec![u; n];

    // Multiplier start: least-squares fit, so dual feasibility can be made
    // exact by splitting the residual into the bound multipliers.
    let ztz = z.transpose() * z;
    let zty = z.transpose() * y;
    let mut v: DVector<f64> = match Cholesky::new(ztz.clone()) {
        Some(ch) => ch.solve(&zty),
        None => ztz
            .lu()
            .solve(&zty)
            .unwrap_or_else(|| DVector::zeros(j)),
    };

    let mut zv = z * &v;
    let mut g: Vec<f64> = (0..n).map(|i| y[i] - zv[i]).collect();
    let g_scale = g.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    let eps0 = 0.1 * (1.0 + g_scale);
    let mut zl: Vec<f64> = g.iter().map(|&gi| (-gi).max(0.0) + eps0).collect();
    let mut zu: Vec<f64> = g.iter().map(|&gi| gi.max(0.0) + eps0).collect();

    // Work buffers.
    let mut theta = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut da = vec![0.0; n];
    let mut ds = vec![0.0; n];
    let mut dzl = vec![0.0; n];
    let mut dzu = vec![0.0; n];
    let mut da_aff = vec![0.0; n];
    let mut ds_aff = vec![0.0; n];
    let mut dzl_aff = vec![0.0; n];
    let mut dzu_aff = vec![0.0; n];
    let mut m = DMatrix::<f64>::zeros(j, j);
    let mut rhs_v = DVector::<f64>::zeros(j);
    let mut zdv = DVector::<f64>::zeros(n);

    let mut gap = f64::INFINITY;
    let mut stall = 0usize;

    for iter in 1..=max_iter {
        // Optimality certificate: achieved check loss vs dual objective.
        let mut primal = 0.0;
        for i in 0..n {
            let r = g[i];
            primal += if r < 0.0 { (u - 1.0) * r } else { u * r };
        }
        let dual = y
            .iter()
            .zip(a.iter())
            .map(|(&yi, &ai)| yi * ai)
            .sum::<f64>()
            - (1.0 - u) * sum_y;
        let new_gap = primal - dual;

        if !new_gap.is_finite() {
            return IpOutcome {
                coefficients: v,
                iterations: iter - 1,
                gap: new_gap,
                converged: false,
            };
        }
        if new_gap <= gap_tol * (1.0 + primal.abs()) {
            return IpOutcome {
                coefficients: v,
                iterations: iter - 1,
                gap: new_gap,
                converged: true,
            };
        }
        if new_gap > 0.95 * gap {
            stall += 1;
            if stall >= STALL_LIMIT {
                return IpOutcome {
                    coefficients: v,
                    iterations: iter - 1,
                    gap: new_gap,
                    converged: false,
                };
            }
        } else {
            stall = 0;
        }
        gap = new_gap;

        let mu = {
            let mut acc = 0.0;
            for i in 0..n {
                acc += a[i] * zl[i] + s[i] * zu[i];
            }
            acc / (2.0 * n as f64)
        };

        // Linear residuals (kept for robustness; zero at the start and
        // preserved by the Newton steps up to round-off).
        let mut rp = vec![0.0; j];
        for k in 0..j {
            let col = z.column(k);
            let mut acc = 0.0;
            for i in 0..n {
                acc += col[i] * a[i];
            }
            rp[k] = b[k] - acc;
        }

        for i in 0..n {
            let q = zl[i] / a[i] + zu[i] / s[i];
            theta[i] = 1.0 / q.max(1e-300);
        }

        // Predictor (affine scaling) direction.
        for i in 0..n {
            let rb = 1.0 - a[i] - s[i];
            let rd = g[i] - zu[i] + zl[i];
            rhs[i] = rd + zu[i] - zl[i] + (zu[i] / s[i]) * rb;
        }
        build_normal_matrix(z, &theta, &mut m);
        let chol = match factor_with_jitter(&mut m) {
            Some(c) => c,
            None => {
                return IpOutcome {
                    coefficients: v,
                    iterations: iter - 1,
                    gap,
                    converged: false,
                }
            }
        };
        let _ = solve_step(z, &theta, &rhs, &rp, &chol, &mut rhs_v, &mut zdv);
        for i in 0..n {
            let rb = 1.0 - a[i] - s[i];
            da_aff[i] = theta[i] * (rhs[i] - zdv[i]);
            ds_aff[i] = rb - da_aff[i];
            dzl_aff[i] = -zl[i] - (zl[i] / a[i]) * da_aff[i];
            dzu_aff[i] = -zu[i] - (zu[i] / s[i]) * ds_aff[i];
        }

        let ap_aff = max_step(&a, &da_aff).min(max_step(&s, &ds_aff)).min(1.0);
        let ad_aff = max_step(&zl, &dzl_aff)
            .min(max_step(&zu, &dzu_aff))
            .min(1.0);
        let mut mu_aff = 0.0;
        for i in 0..n {
            mu_aff += (a[i] + ap_aff * da_aff[i]) * (zl[i] + ad_aff * dzl_aff[i])
                + (s[i] + ap_aff * ds_aff[i]) * (zu[i] + ad_aff * dzu_aff[i]);
        }
        mu_aff /= 2.0 * n as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // Corrector: recentered residuals with second-order terms.
        let target = sigma * mu;
        for i in 0..n {
            let rb = 1.0 - a[i] - s[i];
            let rd = g[i] - zu[i] + zl[i];
            let rl = target - a[i] * zl[i] - da_aff[i] * dzl_aff[i];
            let ru = target - s[i] * zu[i] - ds_aff[i] * dzu_aff[i];
            rhs[i] = rd - ru / s[i] + (zu[i] / s[i]) * rb + rl / a[i];
        }
        let dv = solve_step(z, &theta, &rhs, &rp, &chol, &mut rhs_v, &mut zdv);
        for i in 0..n {
            let rb = 1.0 - a[i] - s[i];
            let rl = target - a[i] * zl[i] - da_aff[i] * dzl_aff[i];
            let ru = target - s[i] * zu[i] - ds_aff[i] * dzu_aff[i];
            da[i] = theta[i] * (rhs[i] - zdv[i]);
            ds[i] = rb - da[i];
            dzl[i] = (rl - zl[i] * da[i]) / a[i];
            dzu[i] = (ru - zu[i] * ds[i]) / s[i];
        }

        let ap = (STEP_DAMPING * max_step(&a, &da))
            .min(STEP_DAMPING * max_step(&s, &ds))
            .min(1.0);
        let ad = (STEP_DAMPING * max_step(&zl, &dzl))
            .min(STEP_DAMPING * max_step(&zu, &dzu))
            .min(1.0);

        for i in 0..n {
            a[i] += ap * da[i];
            s[i] += ap * ds[i];
            zl[i] += ad * dzl[i];
            zu[i] += ad * dzu[i];
        }
        for k in 0..j {
            v[k] += ad * dv[k];
        }
        zv = z * &v;
        for i in 0..n {
            g[i] = y[i] - zv[i];
        }
    }

    IpOutcome {
        coefficients: v,
        iterations: max_iter,
        gap,
        converged: false,
    }
}

/// M = Z' diag(theta) Z, accumulated column-wise.
fn build_normal_matrix(z: &DMatrix<f64>, theta: &[f64], m: &mut DMatrix<f64>) {
    let n = z.nrows();
    let j = z.ncols();
    for k in 0..j {
        for l in k..j {
            let ck = z.column(k);
            let cl = z.column(l);
            let mut acc = 0.0;
            for i in 0..n {
                acc += theta[i] * ck[i] * cl[i];
            }
            m[(k, l)] = acc;
            m[(l, k)] = acc;
        }
    }
}

/// Cholesky factorization with escalating diagonal jitter.
fn factor_with_jitter(m: &mut DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let scale = m.diagonal().amax().max(1e-300);
    for mag in [1e-12, 1e-10, 1e-8, 1e-6] {
        let mut jittered = m.clone();
        for k in 0..m.nrows() {
            jittered[(k, k)] += mag * scale;
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Some(c);
        }
    }
    None
}

/// Solve the normal equations for dv and leave Z*dv in `zdv`.
fn solve_step(
    z: &DMatrix<f64>,
    theta: &[f64],
    rhs: &[f64],
    rp: &[f64],
    chol: &Cholesky<f64, nalgebra::Dyn>,
    rhs_v: &mut DVector<f64>,
    zdv: &mut DVector<f64>,
) -> DVector<f64> {
    let n = z.nrows();
    let j = z.ncols();
    for k in 0..j {
        let col = z.column(k);
        let mut acc = 0.0;
        for i in 0..n {
            acc += col[i] * theta[i] * rhs[i];
        }
        rhs_v[k] = acc - rp[k];
    }
    let dv = chol.solve(rhs_v);
    zdv.copy_from(&(z * &dv));
    dv
}

/// Largest alpha with x + alpha*dx >= 0.
fn max_step(x: &[f64], dx: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            let step = -x[i] / dx[i];
            if step < alpha {
                alpha = step;
            }
        }
    }
    alpha
}
