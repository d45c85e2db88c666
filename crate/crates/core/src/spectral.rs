//! Dense linear-algebra kernels used throughout the crate.
//!
//! Everything here works on small dense matrices (tens of rows). The singular
//! value decomposition is a one-sided Jacobi sweep, which is slow for large
//! inputs but accurate to a few ulps at the sizes we care about.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::Graph;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const POWER_ITERATION_CAP: usize = 200_000;
const JACOBI_SWEEP_CAP: usize = 100;
const GELFAND_MAX_SQUARINGS: u32 = 40;
const FEASIBILITY_TOL: f64 = 1e-10;
const DYKSTRA_CAP: usize = 500_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    PowerIterationStalled { iterations: usize, estimate: f64 },
    #[error("feasibility projection stopped at residual {residual:e} after {iterations} iterations")]
    ProjectionNotConverged { iterations: usize, residual: f64 },
    #[error("matrix is {rows}x{cols} but graph has {n} nodes")]
    DimensionMismatch { rows: usize, cols: usize, n: usize },
}

/// The averaging matrix `11ᵀ/n`.
pub fn averaging_matrix(n: usize) -> Matrix {
    Matrix::from_element(n, n, 1.0 / n as f64)
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Starts from the normalized all-ones vector. If that start lies in the null
/// space of `AᵀA` (as it does for `I - J`), the iteration restarts once from a
/// fixed perturbed vector.
pub fn spectral_norm(a: &Matrix, tol: f64) -> Result<f64, SpectralError> {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return Ok(0.0);
    }
    let gram = a.transpose() * a;
    let scale = frobenius_norm(&gram);
    if scale == 0.0 {
        return Ok(0.0);
    }

    let starts = [
        Vector::from_element(n, 1.0),
        Vector::from_fn(n, |i, _| 1.0 + 0.5 * (-1f64).powi(i as i32) / (i + 1) as f64),
    ];
    let mut last = 0.0;
    for start in starts {
        let mut v = start.normalize();
        let mut previous = f64::NAN;
        for iteration in 0..POWER_ITERATION_CAP {
            let w = &gram * &v;
            let w_norm = w.norm();
            if w_norm <= 1e-14 * scale {
                // start vector sits in the null space
                break;
            }
            let rayleigh = v.dot(&w);
            last = rayleigh.max(0.0).sqrt();
            if (rayleigh - previous).abs() <= tol * rayleigh.abs() {
                return Ok(last);
            }
            previous = rayleigh;
            v = w / w_norm;
            if iteration + 1 == POWER_ITERATION_CAP {
                return Err(SpectralError::PowerIterationStalled {
                    iterations: POWER_ITERATION_CAP,
                    estimate: last,
                });
            }
        }
    }
    Err(SpectralError::PowerIterationStalled { iterations: 0, estimate: last })
}

/// Largest singular value taken from the full decomposition.
pub fn operator_norm(a: &Matrix) -> f64 {
    svd(a).singular_values.first().copied().unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusEstimate {
    pub value: f64,
    /// Set when the squaring cap was reached before the estimate settled.
    pub low_confidence: bool,
}

pub fn is_symmetric(a: &Matrix) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.amax().max(1.0);
    (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= 1e-14 * scale))
}

/// Spectral radius.
///
/// Symmetric inputs use the operator norm, which coincides with the radius.
/// Otherwise the Gelfand sequence `‖A^(2^m)‖_F^(1/2^m)` is evaluated by
/// repeated squaring, renormalizing after every product and carrying the
/// scale in log space.
pub fn spectral_radius(a: &Matrix, tol: f64) -> RadiusEstimate {
    if is_symmetric(a) {
        return RadiusEstimate { value: operator_norm(a), low_confidence: false };
    }
    let norm = frobenius_norm(a);
    if norm == 0.0 {
        return RadiusEstimate { value: 0.0, low_confidence: false };
    }
    let mut power = a / norm;
    let mut log_scale = norm.ln();
    let mut estimate = norm;
    for m in 1..=GELFAND_MAX_SQUARINGS {
        let squared = &power * &power;
        let f = frobenius_norm(&squared);
        if f == 0.0 {
            // nilpotent
            return RadiusEstimate { value: 0.0, low_confidence: false };
        }
        log_scale = 2.0 * log_scale + f.ln();
        power = squared / f;
        let next = (log_scale / 2f64.powi(m as i32)).exp();
        let change = (next - estimate).abs();
        estimate = next;
        if m >= 3 && change <= tol * estimate {
            return RadiusEstimate { value: estimate, low_confidence: false };
        }
    }
    RadiusEstimate { value: estimate, low_confidence: true }
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`, σ descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.singular_values)
    }

    /// `U diag(values) Vᵀ` for replacement singular values.
    pub fn reconstruct_with(&self, values: &[f64]) -> Matrix {
        let mut scaled = self.u.clone();
        for (j, &s) in values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(s);
        }
        scaled * self.v.transpose()
    }
}

/// One-sided Jacobi SVD.
pub fn svd(a: &Matrix) -> Svd {
    if a.nrows() < a.ncols() {
        let t = svd(&a.transpose());
        return Svd { u: t.v, singular_values: t.singular_values, v: t.u };
    }
    let (m, n) = a.shape();
    let mut u = a.clone();
    let mut v = Matrix::identity(n, n);

    for _ in 0..JACOBI_SWEEP_CAP {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (x, y) = (u[(r, p)], u[(r, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut u, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));

    let largest = order.first().map(|&j| sigma[j]).unwrap_or(0.0);
    let negligible = largest * f64::EPSILON * (m.max(n) as f64);
    let mut u_sorted = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut sorted_sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        v_sorted.set_column(dst, &v.column(src));
        if s > negligible && s > 0.0 {
            u_sorted.set_column(dst, &(u.column(src) / s));
        } else {
            missing.push(dst);
        }
        sorted_sigma.push(s);
    }
    complete_orthonormal_columns(&mut u_sorted, &missing);

    Svd { u: u_sorted, singular_values: sorted_sigma, v: v_sorted }
}

fn rotate_columns(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..a.nrows() {
        let (x, y) = (a[(r, p)], a[(r, q)]);
        a[(r, p)] = c * x - s * y;
        a[(r, q)] = s * x + c * y;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other
/// column, drawing candidates from the standard basis.
fn complete_orthonormal_columns(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = u.nrows();
    let mut filled: Vec<usize> = (0..u.ncols()).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &col in missing {
        while candidate < m {
            let mut e = Vector::zeros(m);
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for &j in &filled {
                    let proj = u.column(j).dot(&e);
                    e -= u.column(j) * proj;
                }
            }
            let norm = e.norm();
            if norm > 1e-8 {
                u.set_column(col, &(e / norm));
                filled.push(col);
                break;
            }
        }
    }
}

/// Euclidean projection onto the ℓ1 ball of the given radius (sort and
/// threshold).
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let total: f64 = v.iter().map(|x| x.abs()).sum();
    if total <= radius {
        return v.to_vec();
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cumulative += m;
        let candidate = (cumulative - radius) / (j + 1) as f64;
        if m - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    v.iter().map(|&x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

/// Projection onto the nuclear-norm ball `{Y : ‖Y‖_* ≤ radius}`.
pub fn project_nuclear_ball(x: &Matrix, radius: f64) -> Matrix {
    let dec = svd(x);
    let projected = project_l1_ball(&dec.singular_values, radius);
    dec.reconstruct_with(&projected)
}

/// `argmin_W ½‖W − X‖_F² + λ‖W‖₂` via the Moreau decomposition
/// `prox(X) = X − λ Π_nuc(X / λ)`.
pub fn prox_spectral_norm(x: &Matrix, lambda: f64) -> Matrix {
    assert!(lambda > 0.0, "prox_spectral_norm requires lambda > 0");
    x - project_nuclear_ball(&(x / lambda), 1.0) * lambda
}

/// Projection onto `{W : W1 = 1, Wᵀ1 = 1}` (no support constraint).
pub fn project_unit_sums(w: &Matrix) -> Matrix {
    let n = w.nrows() as f64;
    let row_excess: Vector = w.column_sum().add_scalar(-1.0);
    let col_excess: Vector = w.row_sum().transpose().add_scalar(-1.0);
    let total_excess = row_excess.sum();
    let mut out = w.clone();
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            out[(i, j)] += -row_excess[i] / n - col_excess[j] / n + total_excess / (n * n);
        }
    }
    out
}

/// Zeroes every entry outside the edge set.
pub fn project_support(w: &Matrix, g: &Graph) -> Matrix {
    Matrix::from_fn(w.nrows(), w.ncols(), |i, j| if g.has_edge(i, j) { w[(i, j)] } else { 0.0 })
}

/// Largest absolute deviation of the row and column sums from one.
pub fn unit_sum_residual(w: &Matrix) -> f64 {
    let rows = w.column_sum().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let cols = w.row_sum().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    rows.max(cols)
}

/// Frobenius projection onto `{W : W1 = 1, Wᵀ1 = 1, W_ij = 0 for (i,j) ∉ E}`
/// by Dykstra's alternating projections. The returned matrix is exactly zero
/// off the support.
pub fn project_feasible(w: &Matrix, g: &Graph) -> Result<Matrix, SpectralError> {
    let n = g.len();
    if w.nrows() != n || w.ncols() != n {
        return Err(SpectralError::DimensionMismatch { rows: w.nrows(), cols: w.ncols(), n });
    }
    let mut x = project_support(w, g);
    if unit_sum_residual(&x) <= FEASIBILITY_TOL && x == *w {
        return Ok(x);
    }
    x = w.clone();
    let mut p = Matrix::zeros(n, n);
    let mut q = Matrix::zeros(n, n);
    let mut residual = f64::INFINITY;
    for _ in 0..DYKSTRA_CAP {
        let y = project_unit_sums(&(&x + &p));
        p = &x + &p - &y;
        let shifted = &y + &q;
        x = project_support(&shifted, g);
        q = shifted - &x;
        residual = unit_sum_residual(&x);
        if residual <= FEASIBILITY_TOL {
            return Ok(x);
        }
    }
    Err(SpectralError::ProjectionNotConverged { iterations: DYKSTRA_CAP, residual })
}

/// Exact Frobenius projector onto the feasible set of one graph.
///
/// Solves the normal equations of the `2n` sum constraints restricted to the
/// support once, so each projection is a matrix-vector product. Used where
/// the projection sits inside an outer iteration and the inexactness of
/// [`project_feasible`] would set a floor on the outer residual.
#[derive(Debug, Clone)]
pub struct FeasibleProjector {
    support: Graph,
    /// Pseudo-inverse of the Gram matrix of the constraint operator.
    gram_pinv: Matrix,
}

impl FeasibleProjector {
    pub fn new(g: &Graph) -> Self {
        let n = g.len();
        let mut gram = Matrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            gram[(i, i)] = g.neighbors(i).len() as f64;
            gram[(n + i, n + i)] = g.neighbors(i).len() as f64;
            for &j in g.neighbors(i) {
                gram[(i, n + j)] = 1.0;
                gram[(n + j, i)] = 1.0;
            }
        }
        let dec = svd(&gram);
        let cutoff = dec.singular_values.first().copied().unwrap_or(0.0) * 1e-12;
        let inverted: Vec<f64> =
            dec.singular_values.iter().map(|&s| if s > cutoff { 1.0 / s } else { 0.0 }).collect();
        let mut scaled = dec.v.clone();
        for (j, &s) in inverted.iter().enumerate() {
            scaled.column_mut(j).scale_mut(s);
        }
        Self { support: g.clone(), gram_pinv: scaled * dec.u.transpose() }
    }

    pub fn project(&self, w: &Matrix) -> Result<Matrix, SpectralError> {
        let n = self.support.len();
        if w.nrows() != n || w.ncols() != n {
            return Err(SpectralError::DimensionMismatch { rows: w.nrows(), cols: w.ncols(), n });
        }
        let mut x = project_support(w, &self.support);
        let mut excess = Vector::zeros(2 * n);
        for i in 0..n {
            excess[i] = x.row(i).sum() - 1.0;
            excess[n + i] = x.column(i).sum() - 1.0;
        }
        let multipliers = &self.gram_pinv * excess;
        for i in 0..n {
            for &j in self.support.neighbors(i) {
                x[(i, j)] -= multipliers[i] + multipliers[n + j];
            }
        }
        Ok(x)
    }
}
