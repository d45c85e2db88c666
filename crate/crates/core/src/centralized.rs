//! Centralized reference solution of
//!
//! ```text
//! minimize ‖W − 11ᵀ/n‖₂  subject to  W1 = 1, Wᵀ1 = 1, W_ij = 0 for (i,j) ∉ E
//! ```
//!
//! solved by Douglas–Rachford splitting between the spectral-norm prox and
//! the projection onto the affine feasible set. Only the optimal value is
//! meaningful: the minimizer need not be unique. The iteration stops on a
//! small fixed-point residual or, usually much earlier, on a certified
//! objective gap.

use thiserror::Error;

use crate::graph::Graph;
use crate::spectral::{
    averaging_matrix, frobenius_norm, operator_norm, prox_spectral_norm, svd, FeasibleProjector, Matrix, SpectralError,
};
use crate::weights::{check_consensus_condition, convergence_factor, metropolis, WeightError, WeightMatrix};

#[derive(Debug, Error)]
pub enum CentralError {
    #[error("graph is not connected")]
    Disconnected,
    #[error("splitting stopped at residual {residual:e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

#[derive(Debug, Clone, Copy)]
pub struct CentralOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Douglas–Rachford step.
    pub step: f64,
}

impl Default for CentralOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iterations: 200_000, step: 8.0 }
    }
}

#[derive(Debug, Clone)]
pub struct CentralSolution {
    pub w_star: WeightMatrix,
    /// `‖W* − 11ᵀ/n‖₂`.
    pub factor: f64,
    /// Certified objective gap, or the fixed-point residual of the splitting
    /// if that fell below tolerance first.
    pub certificate: f64,
    pub iterations: usize,
}

pub fn solve_p2(g: &Graph, tol: f64) -> Result<CentralSolution, CentralError> {
    solve_p2_with(g, &CentralOptions { tol, ..CentralOptions::default() })
}

pub fn solve_p2_with(g: &Graph, opts: &CentralOptions) -> Result<CentralSolution, CentralError> {
    if !g.is_connected() {
        return Err(CentralError::Disconnected);
    }
    let n = g.len();
    let j = averaging_matrix(n);
    // Metropolis is feasible and usually a decent start
    let mut z = metropolis(g)?.into_matrix();
    let projector = FeasibleProjector::new(g);
    let mut residual = f64::INFINITY;
    let mut gap = f64::INFINITY;
    for iteration in 1..=opts.max_iterations {
        let x = projector.project(&z)?;
        let centered = &x - &j;
        if iteration % GAP_CHECK_EVERY == 0 || iteration == 1 {
            gap = duality_gap(&centered, &(&x - &z));
        }
        let reflected = &centered + &x - &z;
        let y = prox_spectral_norm(&reflected, opts.step) + &j;
        let step = y - &x;
        residual = frobenius_norm(&step);
        if residual <= opts.tol || gap <= opts.tol {
            return Ok(CentralSolution {
                factor: convergence_factor(&x),
                w_star: WeightMatrix::new(x, g.clone())?,
                certificate: gap.min(residual),
                iterations: iteration,
            });
        }
        z += step;
    }
    Err(CentralError::NotConverged { iterations: opts.max_iterations, residual: gap.min(residual) })
}

const GAP_CHECK_EVERY: usize = 10;

/// `‖W − J‖₂` minus a lower bound on the optimum, for feasible `W`.
///
/// Any `Y` orthogonal to the directions of the feasible set gives
/// `‖V − J‖₂ ≥ ⟨Y, W − J⟩ / ‖Y‖_*` for every feasible `V`. The splitting
/// supplies such a `Y` for free: `x − z` is normal to the set by construction
/// and tends to a subgradient at the optimum.
fn duality_gap(centered: &Matrix, normal: &Matrix) -> f64 {
    let upper = operator_norm(centered);
    let nuclear: f64 = svd(normal).singular_values.iter().sum();
    let lower = if nuclear > 0.0 { (normal.dot(centered) / nuclear).max(0.0) } else { 0.0 };
    upper - lower
}

/// Whether the solution satisfies the average-consensus conditions, which
/// connectivity guarantees for any minimizer.
pub fn verify_lemma1(sol: &CentralSolution) -> bool {
    check_consensus_condition(sol.w_star.matrix(), 1e-9).passes() && sol.factor < 1.0
}
