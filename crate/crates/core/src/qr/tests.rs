use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};

use super::*;
use crate::panel::{Cell, MicroPanel};

fn constant_design(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, 1, 1.0)
}

#[test]
fn check_loss_matches_piecewise_form() {
    assert_abs_diff_eq!(check_loss(-1.0, 0.5).unwrap(), 0.5);
    assert_abs_diff_eq!(check_loss(0.0, 0.3).unwrap(), 0.0);
    assert_abs_diff_eq!(check_loss(2.0, 0.9).unwrap(), 1.8, epsilon = 1e-15);
    assert!(check_loss(1.0, 0.0).is_err());
    assert!(check_loss(1.0, 1.0).is_err());
    assert!(check_loss(1.0, -0.2).is_err());
}

#[test]
fn median_of_three_is_exact() {
    let z = constant_design(3);
    let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let fit = fit_qr(&z, &y, 0.5).unwrap();
    assert_eq!(fit.status, QrStatus::InteriorPoint);
    assert_abs_diff_eq!(fit.coefficients[0], 2.0, epsilon = 1e-7);
    assert_abs_diff_eq!(fit.objective, 2.0, epsilon = 1e-8);
}

#[test]
fn quartile_solution_lies_on_optimal_face() {
    // At u = 0.25 every a in [1, 2] is optimal with loss 0.25*(2-a) + ...
    // constant at 1.25; only face membership and the loss are contractual.
    let z = constant_design(4);
    let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
    let fit = fit_qr(&z, &y, 0.25).unwrap();
    let a = fit.coefficients[0];
    assert!(a >= 1.0 - 1e-7 && a <= 2.0 + 1e-7, "a = {a}");
    assert_abs_diff_eq!(fit.objective, 1.25, epsilon = 1e-8);
}

#[test]
fn achieved_loss_never_exceeds_zero_coefficients() {
    let mut rng = crate::sim::test_rng(7);
    for _ in 0..20 {
        let n = 15;
        let z = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { crate::sim::draw_normal(&mut rng) * (1.0 + i as f64 * 0.01) });
        let y = DVector::from_fn(n, |_, _| crate::sim::draw_normal(&mut rng) * 2.0);
        for u in [0.1, 0.5, 0.9] {
            let fit = fit_qr(&z, &y, u).unwrap();
            let zero = DVector::zeros(2);
            let at_zero = check_objective(&z, &y, u, &zero).unwrap();
            assert!(fit.objective <= at_zero + 1e-9);
        }
    }
}

#[test]
fn quantile_monotone_for_constant_design() {
    let z = constant_design(9);
    let y = DVector::from_vec(vec![3.0, -1.0, 4.5, 0.2, 7.1, -2.3, 0.0, 5.5, 1.1]);
    let grid = [0.05, 0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 0.95];
    let mut prev = f64::NEG_INFINITY;
    for &u in &grid {
        let a = fit_qr(&z, &y, u).unwrap().coefficients[0];
        assert!(a >= prev - 1e-9, "u={u}: {a} < {prev}");
        prev = a;
    }
}

#[test]
fn affine_equivariance() {
    let mut rng = crate::sim::test_rng(11);
    let n = 25;
    let z = DMatrix::from_fn(n, 2, |_, k| {
        if k == 0 {
            1.0
        } else {
            crate::sim::draw_uniform(&mut rng)
        }
    });
    let y = DVector::from_fn(n, |i, _| z[(i, 1)] * 2.0 + crate::sim::draw_normal(&mut rng));
    let u = 0.3;
    let base = fit_qr(&z, &y, u).unwrap().coefficients;

    // Scaling the response scales the coefficients.
    let c = 3.5;
    let scaled = fit_qr(&z, &(&y * c), u).unwrap().coefficients;
    for k in 0..2 {
        assert_abs_diff_eq!(scaled[k], c * base[k], epsilon = 1e-6 * (1.0 + base[k].abs()));
    }

    // Adding Z b shifts the coefficients by b.
    let b = DVector::from_vec(vec![-1.0, 0.5]);
    let shifted_y = &y + &z * &b;
    let shifted = fit_qr(&z, &shifted_y, u).unwrap().coefficients;
    for k in 0..2 {
        assert_abs_diff_eq!(shifted[k], base[k] + b[k], epsilon = 1e-6);
    }
}

#[test]
fn subgradient_optimality_holds() {
    let mut rng = crate::sim::test_rng(23);
    let n = 40;
    let z = DMatrix::from_fn(n, 2, |_, k| {
        if k == 0 {
            1.0
        } else {
            crate::sim::draw_normal(&mut rng)
        }
    });
    let y = DVector::from_fn(n, |i, _| 0.5 + z[(i, 1)] + 0.3 * crate::sim::draw_normal(&mut rng));
    for u in [0.1, 0.5, 0.9] {
        let fit = fit_qr(&z, &y, u).unwrap();
        let (lhs, slack) = subgradient_slack(&z, &y, u, &fit.coefficients);
        for k in 0..2 {
            assert!(
                lhs[k] <= slack[k] + 1e-5,
                "u={u} col={k}: |score| {} > slack {}",
                lhs[k],
                slack[k]
            );
        }
    }
}

#[test]
fn singular_design_names_offending_columns() {
    let mut z = DMatrix::from_element(6, 2, 1.0);
    for i in 0..6 {
        z[(i, 1)] = 2.0; // duplicated direction
    }
    let y = DVector::from_element(6, 1.0);
    match fit_qr(&z, &y, 0.5) {
        Err(Error::SingularDesign { columns, .. }) => assert_eq!(columns, vec![1]),
        other => panic!("expected singular-design error, got {other:?}"),
    }
}

#[test]
fn undersized_cell_is_rejected() {
    let z = DMatrix::from_element(1, 2, 1.0);
    let y = DVector::from_element(1, 0.0);
    assert!(fit_qr(&z, &y, 0.5).is_err());
}

fn grid_panel() -> MicroPanel {
    let cell = Cell {
        y: DVector::from_vec(vec![0.0, 1.0, 2.0]),
        z: DMatrix::from_element(3, 1, 1.0),
    };
    MicroPanel::new(
        vec![1, 2],
        vec![1, 2],
        vec!["const".into()],
        vec![cell.clone(), cell.clone(), cell.clone(), cell],
    )
    .unwrap()
}

#[test]
fn first_step_fits_every_cell() {
    let panel = grid_panel();
    let fits = fit_first_step(&panel, &[0.5]).unwrap();
    let qcp = &fits[&Quantile::new(0.5).unwrap()];
    for s in 0..2 {
        for t in 0..2 {
            assert_abs_diff_eq!(qcp.alpha(s, t)[0], 1.0, epsilon = 1e-7);
        }
    }
    let panel_j1 = qcp.coefficient_panel(0);
    assert_eq!(panel_j1.nrows(), 2);
    assert_eq!(panel_j1.ncols(), 2);
}

#[test]
fn first_step_deterministic_across_thread_counts() {
    let panel = grid_panel();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| fit_first_step(&panel, &[0.25, 0.5, 0.75]).unwrap())
    };
    let one = run(1);
    let two = run(2);
    for (u, qcp) in &one {
        let other = &two[u];
        for s in 0..2 {
            for t in 0..2 {
                assert_eq!(
                    qcp.alpha(s, t).as_slice(),
                    other.alpha(s, t).as_slice(),
                    "bitwise mismatch at ({s},{t})"
                );
            }
        }
    }
}

#[test]
fn failing_cell_reports_coordinates() {
    // Second cell has a rank-deficient design (constant + constant copy).
    let good = Cell {
        y: DVector::from_vec(vec![0.0, 1.0, 2.0]),
        z: DMatrix::from_fn(3, 2, |i, k| if k == 0 { 1.0 } else { i as f64 }),
    };
    let bad = Cell {
        y: DVector::from_vec(vec![0.0, 1.0, 2.0]),
        z: DMatrix::from_element(3, 2, 1.0),
    };
    let panel = MicroPanel::new(
        vec![7, 9],
        vec![3],
        vec!["const".into(), "w".into()],
        vec![good, bad],
    )
    .unwrap();
    match fit_first_step(&panel, &[0.5]) {
        Err(Error::CellFit { group, time, u, .. }) => {
            assert_eq!((group, time), (9, 3));
            assert_eq!(u, 0.5);
        }
        other => panic!("expected annotated cell failure, got {other:?}"),
    }
}
