//! Weight matrices for the consensus protocol `x(t+1) = W x(t)`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::Graph;
use crate::spectral::{averaging_matrix, operator_norm, spectral_radius, Matrix, Vector};

/// Tolerance handed to the radius estimator inside consensus checks.
const RADIUS_TOL: f64 = 1e-12;
/// Entries of `W^(n-1)` at or below this count as zero.
const PRIMITIVITY_THRESHOLD: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("entry ({row}, {col}) = {value} lies outside the graph support")]
    SupportViolation { row: usize, col: usize, value: f64 },
    #[error("entry ({row}, {col}) = {value} is negative")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("expected {expected} rows of length {expected}, got {rows}x{cols}")]
    DimensionMismatch { expected: usize, rows: usize, cols: usize },
    #[error("graph is not connected")]
    Disconnected,
    #[error("malformed weight CSV at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// A square matrix that is zero wherever its graph has no edge.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    matrix: Matrix,
    support: Graph,
}

impl WeightMatrix {
    pub fn new(matrix: Matrix, support: Graph) -> Result<Self, WeightError> {
        check_support(&matrix, &support)?;
        Ok(Self { matrix, support })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn support(&self) -> &Graph {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn convergence_factor(&self) -> f64 {
        convergence_factor(&self.matrix)
    }

    pub fn to_csv(&self) -> String {
        matrix_to_csv(&self.matrix)
    }

    pub fn from_csv(text: &str, support: Graph) -> Result<Self, WeightError> {
        let matrix = matrix_from_csv(text)?;
        Self::new(matrix, support)
    }
}

fn check_support(matrix: &Matrix, g: &Graph) -> Result<(), WeightError> {
    let n = g.len();
    if matrix.nrows() != n || matrix.ncols() != n {
        return Err(WeightError::DimensionMismatch { expected: n, rows: matrix.nrows(), cols: matrix.ncols() });
    }
    for i in 0..n {
        for j in 0..n {
            let value = matrix[(i, j)];
            if value != 0.0 && !g.has_edge(i, j) {
                return Err(WeightError::SupportViolation { row: i, col: j, value });
            }
        }
    }
    Ok(())
}

/// Row-per-line CSV with 17 significant digits, which round-trips every f64.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix, WeightError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| WeightError::Parse { line: k + 1, reason: e.to_string() })?;
        rows.push(row);
    }
    let n = rows.len();
    if let Some(bad) = rows.iter().position(|r| r.len() != n) {
        return Err(WeightError::Parse { line: bad + 1, reason: format!("expected {n} columns") });
    }
    Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Metropolis (local-degree) weights.
///
/// Off-diagonal edge weights are `min(1/(1+d_i), 1/(1+d_j))` with `d` the
/// proper degree. The self-weight is one minus the off-diagonal row sum.
pub fn metropolis(g: &Graph) -> Result<WeightMatrix, WeightError> {
    if !g.is_connected() {
        return Err(WeightError::Disconnected);
    }
    let n = g.len();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let mut off_diagonal = 0.0;
        for j in g.proper_neighbors(i) {
            let weight = (1.0 / (1 + g.degree(i)) as f64).min(1.0 / (1 + g.degree(j)) as f64);
            w[(i, j)] = weight;
            off_diagonal += weight;
        }
        w[(i, i)] = 1.0 - off_diagonal;
    }
    WeightMatrix::new(w, g.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusReport {
    pub row_ok: bool,
    pub col_ok: bool,
    pub rho_ok: bool,
    /// `ρ(W − 11ᵀ/n)`.
    pub rho_value: f64,
    pub row_residual: f64,
    pub col_residual: f64,
    pub rho_low_confidence: bool,
}

impl ConsensusReport {
    pub fn passes(&self) -> bool {
        self.row_ok && self.col_ok && self.rho_ok
    }
}

/// Checks `W1 = 1`, `Wᵀ1 = 1` and `ρ(W − J) < 1`, each with margin `tol`.
pub fn check_consensus_condition(w: &Matrix, tol: f64) -> ConsensusReport {
    let n = w.nrows();
    let ones = Vector::from_element(n, 1.0);
    let row_residual = (w * &ones - &ones).norm();
    let col_residual = (w.transpose() * &ones - &ones).norm();
    let radius = spectral_radius(&(w - averaging_matrix(n)), RADIUS_TOL);
    ConsensusReport {
        row_ok: row_residual <= tol,
        col_ok: col_residual <= tol,
        rho_ok: radius.value < 1.0 - tol,
        rho_value: radius.value,
        row_residual,
        col_residual,
        rho_low_confidence: radius.low_confidence,
    }
}

/// Per-step convergence factor `‖W − 11ᵀ/n‖₂`.
///
/// Uses the full singular value decomposition rather than power iteration:
/// optimal weight matrices tend to have a repeated top singular value, where
/// power iteration settles slowly.
pub fn convergence_factor(w: &Matrix) -> f64 {
    operator_norm(&(w - averaging_matrix(w.nrows())))
}

/// Whether the nonnegative matrix `W` has `W^(n-1) > 0` entrywise.
pub fn is_primitive(w: &Matrix) -> Result<bool, WeightError> {
    let n = w.nrows();
    for i in 0..n {
        for j in 0..w.ncols() {
            if w[(i, j)] < 0.0 {
                return Err(WeightError::NegativeEntry { row: i, col: j, value: w[(i, j)] });
            }
        }
    }
    let mut power = w.clone();
    for _ in 1..n.saturating_sub(1) {
        power = &power * w;
    }
    Ok(power.iter().all(|&x| x > PRIMITIVITY_THRESHOLD))
}

/// Stacks per-agent rows into a weight matrix.
pub fn assemble_from_rows(rows: &[Vector], g: &Graph) -> Result<WeightMatrix, WeightError> {
    let n = g.len();
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        return Err(WeightError::DimensionMismatch { expected: n, rows: rows.len(), cols });
    }
    let matrix = Matrix::from_fn(n, n, |i, j| rows[i][j]);
    WeightMatrix::new(matrix, g.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::frobenius_norm;

    #[test]
    fn metropolis_on_complete_graph_is_averaging() {
        for n in 1..8 {
            let w = metropolis(&Graph::complete(n)).unwrap();
            assert!(frobenius_norm(&(w.matrix() - averaging_matrix(n))) < 1e-15);
            assert!(w.convergence_factor() < 1e-14);
        }
    }

    #[test]
    fn metropolis_on_path_of_three() {
        let w = metropolis(&Graph::path(3)).unwrap();
        let m = w.matrix();
        let third = 1.0 / 3.0;
        assert_eq!(m[(0, 1)], third);
        assert_eq!(m[(1, 2)], third);
        assert_eq!(m[(0, 2)], 0.0);
        assert!((m[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m[(2, 2)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m[(1, 1)] - third).abs() < 1e-15);
    }

    #[test]
    fn metropolis_single_node_and_disconnected() {
        assert_eq!(metropolis(&Graph::complete(1)).unwrap().matrix()[(0, 0)], 1.0);
        let g = Graph::from_edge_list(3, &[(1, 2)]).unwrap();
        assert_eq!(metropolis(&g), Err(WeightError::Disconnected));
    }

    #[test]
    fn consensus_condition_examples() {
        let j = averaging_matrix(4);
        let report = check_consensus_condition(&j, 1e-9);
        assert!(report.passes());
        assert!(report.rho_value < 1e-12);

        let eye = Matrix::identity(4, 4);
        let report = check_consensus_condition(&eye, 1e-9);
        assert!(report.row_ok && report.col_ok && !report.rho_ok);
        assert!((report.rho_value - 1.0).abs() < 1e-12);

        for seed in 0..10 {
            let g = Graph::er_random(8, 0.4, seed).unwrap();
            if let Ok(w) = metropolis(&g) {
                assert!(check_consensus_condition(w.matrix(), 1e-9).passes());
            }
        }
    }

    #[test]
    fn convergence_factor_examples() {
        assert!(convergence_factor(&averaging_matrix(5)) < 1e-15);
        assert!((convergence_factor(&Matrix::identity(5, 5)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn primitivity() {
        assert!(is_primitive(&averaging_matrix(3)).unwrap());
        assert!(!is_primitive(&Matrix::identity(3, 3)).unwrap());
        let w = metropolis(&Graph::path(4)).unwrap();
        assert!(is_primitive(w.matrix()).unwrap());
        // brute check: the path of 4 needs the full n−1 = 3 steps
        let squared = w.matrix() * w.matrix();
        assert_eq!(squared[(0, 3)], 0.0);

        let mut neg = averaging_matrix(2);
        neg[(0, 1)] = -0.1;
        assert!(matches!(is_primitive(&neg), Err(WeightError::NegativeEntry { row: 0, col: 1, .. })));
    }

    #[test]
    fn assembling_rows() {
        let g = Graph::complete(3);
        let j = averaging_matrix(3);
        let rows: Vec<Vector> = (0..3).map(|i| j.row(i).transpose()).collect();
        assert_eq!(assemble_from_rows(&rows, &g).unwrap().matrix(), &j);

        let unit: Vec<Vector> = (0..3).map(|i| Matrix::identity(3, 3).column(i).into_owned()).collect();
        assert_eq!(assemble_from_rows(&unit, &Graph::path(3)).unwrap().into_matrix(), Matrix::identity(3, 3));

        let mut bad = unit.clone();
        bad[0][2] = 0.5;
        assert_eq!(
            assemble_from_rows(&bad, &Graph::path(3)),
            Err(WeightError::SupportViolation { row: 0, col: 2, value: 0.5 })
        );
        assert!(matches!(assemble_from_rows(&unit[..2], &g), Err(WeightError::DimensionMismatch { .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let w = metropolis(&Graph::cycle(7)).unwrap();
        let text = w.to_csv();
        assert_eq!(text.lines().count(), 7);
        let back = WeightMatrix::from_csv(&text, w.support().clone()).unwrap();
        assert_eq!(back, w);
        assert!(matches!(matrix_from_csv("1,2\n3\n"), Err(WeightError::Parse { .. })));
        assert!(matches!(matrix_from_csv("1,x\n3,4\n"), Err(WeightError::Parse { line: 1, .. })));
    }
}
