//! Factor-count selection by the thresholded eigen-ratio rule.

use crate::error::{Error, Result};

/// Outcome of the eigen-ratio selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorSelection {
    /// Selected number of factors; 0 when the spectrum carries no structure.
    pub r: usize,
    /// Upper search bound: the number of eigenvalues above the spectrum mean.
    pub r_max: usize,
    /// Set when the spectrum is flat or all zero, in which case `r = 0`.
    pub no_structure: bool,
}

/// Select the number of factors from a descending nonnegative spectrum.
///
/// The search bound is r_max = #{rho_r > mean(rho)}. Over 1 <= r <= r_max
/// the criterion is
///
///   (rho_{r+1} / rho_r) * 1{rho_r / rho_1 >= 1 / ln(S v rho_1)}
///   + 1{rho_r / rho_1 < 1 / ln(S v rho_1)},
///
/// minimized with ties broken toward the smallest r. The indicator guard
/// prevents vanishing trailing eigenvalues from producing spurious minima.
/// A pure function of the spectrum and the group count.
pub fn select_num_factors(eigenvalues: &[f64], s: usize) -> Result<FactorSelection> {
    if eigenvalues.is_empty() {
        return Err(Error::Numeric("empty spectrum".into()));
    }
    let t = eigenvalues.len();
    let mut rho = Vec::with_capacity(t);
    for (i, &e) in eigenvalues.iter().enumerate() {
        if !e.is_finite() {
            return Err(Error::Numeric(format!("non-finite eigenvalue at {i}")));
        }
        // Symmetric eigensolvers can return tiny negatives for a PSD matrix.
        let clipped = e.max(0.0);
        if i > 0 && clipped > rho[i - 1] + 1e-9 * rho[0].max(1.0) {
            return Err(Error::Numeric("eigenvalues must be in descending order".into()));
        }
        rho.push(clipped);
    }

    let mean = rho.iter().sum::<f64>() / t as f64;
    let r_max = rho.iter().take_while(|&&e| e > mean).count();
    if r_max == 0 || rho[0] == 0.0 {
        return Ok(FactorSelection {
            r: 0,
            r_max,
            no_structure: true,
        });
    }

    let threshold = 1.0 / (s as f64).max(rho[0]).ln();
    let mut best_r = 1;
    let mut best = f64::INFINITY;
    for r in 1..=r_max {
        let guard = rho[r - 1] / rho[0] >= threshold;
        let value = if guard { rho[r] / rho[r - 1] } else { 1.0 };
        if value < best {
            best = value;
            best_r = r;
        }
    }
    Ok(FactorSelection {
        r: best_r,
        r_max,
        no_structure: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn padded(head: &[f64], t: usize) -> Vec<f64> {
        let mut v = head.to_vec();
        while v.len() < t {
            v.push(0.0);
        }
        v
    }

    #[test]
    fn two_dominant_eigenvalues_select_two() {
        // mean ~= 1.8015, r_max = 2; criterion: r=1 -> 0.8, r=2 -> 0.00125.
        let spectrum = padded(&[10.0, 8.0, 0.01, 0.005], 10);
        let sel = select_num_factors(&spectrum, 40).unwrap();
        assert_eq!(sel.r, 2);
        assert_eq!(sel.r_max, 2);
        assert!(!sel.no_structure);
    }

    #[test]
    fn one_dominant_eigenvalue_selects_one() {
        let spectrum = padded(&[10.0, 0.01, 0.009], 10);
        let sel = select_num_factors(&spectrum, 40).unwrap();
        assert_eq!(sel.r, 1);
        assert_eq!(sel.r_max, 1);
    }

    #[test]
    fn single_spike_selects_one() {
        let spectrum = padded(&[10.0], 10);
        let sel = select_num_factors(&spectrum, 40).unwrap();
        assert_eq!(sel.r, 1);
    }

    #[test]
    fn zero_spectrum_flags_no_structure() {
        let sel = select_num_factors(&[0.0; 8], 40).unwrap();
        assert_eq!(sel.r, 0);
        assert!(sel.no_structure);
    }

    #[test]
    fn flat_spectrum_flags_no_structure() {
        let sel = select_num_factors(&[2.0; 8], 40).unwrap();
        assert_eq!(sel.r, 0);
        assert!(sel.no_structure);
    }

    #[test]
    fn selection_is_deterministic() {
        let spectrum = padded(&[5.0, 4.9, 4.8, 0.2, 0.1], 12);
        let a = select_num_factors(&spectrum, 33).unwrap();
        let b = select_num_factors(&spectrum, 33).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_unsorted_spectrum() {
        assert!(select_num_factors(&[1.0, 3.0, 0.5], 10).is_err());
    }
}
