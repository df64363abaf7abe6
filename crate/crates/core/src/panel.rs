//! Data containers for the repeated cross-section micro data and the
//! group-level design.
//!
//! The micro data are organized on a complete S x T grid of (group, time)
//! cells; each cell holds its own cross-section of outcomes and individual
//! regressors. The group design holds the group-level covariates, the
//! treatment flags and the policy start period, from which the per-period
//! treatment dummy d_st = d_s * 1{t >= t0} is derived.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A quantile level, validated to lie strictly inside (0, 1).
///
/// Wrapping the level gives it a total order so fitted results can be keyed
/// by quantile in ordered maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile(f64);

impl Quantile {
    pub fn new(u: f64) -> Result<Self> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::InvalidQuantile(u));
        }
        Ok(Quantile(u))
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Eq for Quantile {}

impl Ord for Quantile {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Quantile {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl std::fmt::Display for Quantile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One (group, time) cell of repeated cross-section data.
#[derive(Debug, Clone)]
pub struct Cell {
    /// Outcomes, length N_st.
    pub y: DVector<f64>,
    /// Individual regressors, N_st x J. The first column is the constant 1.
    pub z: DMatrix<f64>,
}

/// Repeated cross-section observations on a complete S x T grid.
#[derive(Debug, Clone)]
pub struct MicroPanel {
    group_labels: Vec<i64>,
    time_labels: Vec<i64>,
    z_names: Vec<String>,
    /// Row-major over the grid: cell (s, t) lives at index s * T + t.
    cells: Vec<Cell>,
}

impl MicroPanel {
    /// Assemble a panel from a complete grid of cells.
    ///
    /// `cells` must be laid out row-major over (group, time), i.e. cell
    /// (s, t) at index `s * time_labels.len() + t`. Every cell must be
    /// non-empty, share the same regressor count J, carry only finite
    /// values and have an all-ones first regressor column.
    pub fn new(
        group_labels: Vec<i64>,
        time_labels: Vec<i64>,
        z_names: Vec<String>,
        cells: Vec<Cell>,
    ) -> Result<Self> {
        let s_count = group_labels.len();
        let t_count = time_labels.len();
        if s_count == 0 || t_count == 0 {
            return Err(Error::Ingest {
                line: None,
                msg: "panel must contain at least one group and one time period".into(),
            });
        }
        if cells.len() != s_count * t_count {
            return Err(Error::DimensionMismatch {
                what: "micro panel grid",
                expected: format!("{} cells", s_count * t_count),
                got: format!("{} cells", cells.len()),
            });
        }
        let j = cells[0].z.ncols();
        if z_names.len() != j {
            return Err(Error::DimensionMismatch {
                what: "regressor names",
                expected: format!("{j}"),
                got: format!("{}", z_names.len()),
            });
        }
        for (idx, cell) in cells.iter().enumerate() {
            let (g, t) = (group_labels[idx / t_count], time_labels[idx % t_count]);
            if cell.y.is_empty() {
                return Err(Error::Ingest {
                    line: None,
                    msg: format!("cell group={g} time={t} has no observations"),
                });
            }
            if cell.z.nrows() != cell.y.len() || cell.z.ncols() != j {
                return Err(Error::DimensionMismatch {
                    what: "cell design matrix",
                    expected: format!("{} x {}", cell.y.len(), j),
                    got: format!("{} x {}", cell.z.nrows(), cell.z.ncols()),
                });
            }
            if cell.y.iter().any(|v| !v.is_finite()) || cell.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Ingest {
                    line: None,
                    msg: format!("cell group={g} time={t} contains non-finite values"),
                });
            }
            if cell.z.column(0).iter().any(|&v| v != 1.0) {
                return Err(Error::Ingest {
                    line: None,
                    msg: format!(
                        "cell group={g} time={t}: first regressor column must be the constant 1"
                    ),
                });
            }
        }
        Ok(MicroPanel {
            group_labels,
            time_labels,
            z_names,
            cells,
        })
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.group_labels.len()
    }

    #[inline]
    pub fn num_periods(&self) -> usize {
        self.time_labels.len()
    }

    /// Number of individual-level regressors, intercept included.
    #[inline]
    pub fn num_regressors(&self) -> usize {
        self.z_names.len()
    }

    #[inline]
    pub fn group_labels(&self) -> &[i64] {
        &self.group_labels
    }

    #[inline]
    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    /// Regressor names, in design-matrix column order.
    #[inline]
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    #[inline]
    pub fn cell(&self, s: usize, t: usize) -> &Cell {
        &self.cells[s * self.time_labels.len() + t]
    }

    /// Iterate cells along with their grid indices, row-major.
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &Cell)> {
        let t_count = self.time_labels.len();
        self.cells
            .iter()
            .enumerate()
            .map(move |(idx, cell)| (idx / t_count, idx % t_count, cell))
    }
}

/// Group-level covariates, treatment flags and the policy start period.
#[derive(Debug, Clone)]
pub struct GroupDesign {
    group_labels: Vec<i64>,
    time_labels: Vec<i64>,
    x_names: Vec<String>,
    /// Per-group covariate matrices, each T x K.
    x: Vec<DMatrix<f64>>,
    /// Group treatment flags in {0, 1}.
    d: Vec<f64>,
    /// Zero-based index of the first post-policy period.
    t0_index: usize,
}

impl GroupDesign {
    /// Validate and assemble a group design.
    ///
    /// Requires at least one treated and one control group, a policy start
    /// strictly inside the observed window, and finite covariates.
    pub fn new(
        group_labels: Vec<i64>,
        time_labels: Vec<i64>,
        x_names: Vec<String>,
        x: Vec<DMatrix<f64>>,
        d: Vec<f64>,
        t0_index: usize,
    ) -> Result<Self> {
        let s_count = group_labels.len();
        let t_count = time_labels.len();
        if x.len() != s_count || d.len() != s_count {
            return Err(Error::DimensionMismatch {
                what: "group design",
                expected: format!("{s_count} groups"),
                got: format!("x: {}, d: {}", x.len(), d.len()),
            });
        }
        if t0_index == 0 || t0_index >= t_count {
            return Err(Error::Design(format!(
                "policy start index {t0_index} must satisfy 0 < t0 < {t_count}"
            )));
        }
        let k = x_names.len();
        for (s, xs) in x.iter().enumerate() {
            if xs.nrows() != t_count || xs.ncols() != k {
                return Err(Error::DimensionMismatch {
                    what: "group covariate matrix",
                    expected: format!("{t_count} x {k}"),
                    got: format!("{} x {} (group {})", xs.nrows(), xs.ncols(), group_labels[s]),
                });
            }
            if xs.iter().any(|v| !v.is_finite()) {
                return Err(Error::Design(format!(
                    "group {} has non-finite covariates",
                    group_labels[s]
                )));
            }
        }
        if d.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Design("treatment flags must be 0 or 1".into()));
        }
        let treated: f64 = d.iter().sum();
        if treated == 0.0 || treated == s_count as f64 {
            return Err(Error::Design(
                "need at least one treated and one control group".into(),
            ));
        }
        Ok(GroupDesign {
            group_labels,
            time_labels,
            x_names,
            x,
            d,
            t0_index,
        })
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.group_labels.len()
    }

    #[inline]
    pub fn num_periods(&self) -> usize {
        self.time_labels.len()
    }

    #[inline]
    pub fn num_covariates(&self) -> usize {
        self.x_names.len()
    }

    /// Number of post-policy periods, i.e. the length of the policy-effect
    /// coefficient vector.
    #[inline]
    pub fn num_post_periods(&self) -> usize {
        self.num_periods() - self.t0_index
    }

    #[inline]
    pub fn t0_index(&self) -> usize {
        self.t0_index
    }

    #[inline]
    pub fn group_labels(&self) -> &[i64] {
        &self.group_labels
    }

    #[inline]
    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    #[inline]
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    /// Covariate matrix of group `s`, T x K.
    #[inline]
    pub fn x(&self, s: usize) -> &DMatrix<f64> {
        &self.x[s]
    }

    /// Group treatment flags.
    #[inline]
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Treatment dummy d_st = d_s * 1{t >= t0}.
    #[inline]
    pub fn d_st(&self, s: usize, t: usize) -> f64 {
        if t >= self.t0_index {
            self.d[s]
        } else {
            0.0
        }
    }

    /// Number of treated groups.
    pub fn num_treated(&self) -> usize {
        self.d.iter().filter(|&&v| v == 1.0).count()
    }

    /// Restrict the design to a permutation of its groups (testing aid;
    /// the fitted common component must not depend on group order).
    pub fn permuted_groups(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.num_groups() {
            return Err(Error::DimensionMismatch {
                what: "group permutation",
                expected: format!("{}", self.num_groups()),
                got: format!("{}", order.len()),
            });
        }
        GroupDesign::new(
            order.iter().map(|&s| self.group_labels[s]).collect(),
            self.time_labels.clone(),
            self.x_names.clone(),
            order.iter().map(|&s| self.x[s].clone()).collect(),
            order.iter().map(|&s| self.d[s]).collect(),
            self.t0_index,
        )
    }

    /// The S x T matrix of treatment dummies (testing/reporting aid).
    pub fn d_matrix(&self) -> DMatrix<f64> {
        let (s_count, t_count) = (self.num_groups(), self.num_periods());
        DMatrix::from_fn(s_count, t_count, |s, t| self.d_st(s, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_cell(n: usize) -> Cell {
        Cell {
            y: DVector::from_element(n, 1.0),
            z: DMatrix::from_element(n, 1, 1.0),
        }
    }

    #[test]
    fn quantile_rejects_boundary() {
        assert!(Quantile::new(0.0).is_err());
        assert!(Quantile::new(1.0).is_err());
        assert!(Quantile::new(-0.3).is_err());
        assert!(Quantile::new(f64::NAN).is_err());
        assert!(Quantile::new(0.5).is_ok());
    }

    #[test]
    fn micro_panel_requires_full_grid() {
        let cells = vec![ones_cell(3); 3];
        let err = MicroPanel::new(vec![1, 2], vec![1, 2], vec!["const".into()], cells);
        assert!(err.is_err());
    }

    #[test]
    fn micro_panel_rejects_non_unit_intercept() {
        let mut cell = ones_cell(2);
        cell.z[(0, 0)] = 2.0;
        let err = MicroPanel::new(vec![1], vec![1], vec!["const".into()], vec![cell]);
        assert!(matches!(err, Err(Error::Ingest { .. })));
    }

    #[test]
    fn group_design_needs_both_arms() {
        let x = vec![DMatrix::zeros(4, 0); 2];
        let err = GroupDesign::new(
            vec![1, 2],
            vec![1, 2, 3, 4],
            vec![],
            x.clone(),
            vec![1.0, 1.0],
            2,
        );
        assert!(matches!(err, Err(Error::Design(_))));
        let ok = GroupDesign::new(vec![1, 2], vec![1, 2, 3, 4], vec![], x, vec![0.0, 1.0], 2);
        assert!(ok.is_ok());
        let design = ok.unwrap();
        assert_eq!(design.num_post_periods(), 2);
        assert_eq!(design.d_st(1, 1), 0.0);
        assert_eq!(design.d_st(1, 2), 1.0);
        assert_eq!(design.d_st(0, 3), 0.0);
    }
}
