//! The per-agent primal update.
//!
//! Agent `i` minimizes, over matrices whose row `i` vanishes outside `N_i`,
//!
//! ```text
//! (1/n)‖W − J‖₂ + aᵀ(W1 − 1) + bᵀ(Wᵀ1 − 1) + tr(WᵀM)
//!     + (ρ/2)[‖W1 − 1‖² + ‖Wᵀ1 − 1‖² + Σ_{j∈N_i} ‖W − A_j‖_F²]
//! ```
//!
//! where `A_j` are the anchors `(W_i(k) + W_j(k))/2`. The problem is split
//! into the spectral-norm term (prox through [`prox_spectral_norm`] after
//! shifting by `J`), the support indicator (entrywise masking) and the smooth
//! quadratic remainder, and solved with three-operator (Davis–Yin) splitting.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{averaging_matrix, frobenius_norm, project_nuclear_ball, prox_spectral_norm, svd, Matrix, Vector};

#[derive(Debug, Error, Clone)]
pub enum SubproblemError {
    #[error("agent {agent}: inner solver stopped at residual {:e} after {} iterations", .report.fixed_point_residual, .report.inner_iterations)]
    NotConverged { agent: usize, report: SolveReport },
    #[error("agent {agent}: {reason}")]
    InvalidInstance { agent: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_inner: usize,
    /// Step size; `None` means `1/L`.
    pub step: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_inner: 50_000, step: None }
    }
}

#[derive(Debug, Clone)]
pub struct PrimalInstance {
    pub agent: usize,
    pub n: usize,
    /// `N_i` including the agent itself, sorted.
    pub neighbors: Vec<usize>,
    pub a: Vector,
    pub b: Vector,
    pub m: Matrix,
    /// One anchor per entry of `neighbors`.
    pub anchors: Vec<Matrix>,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub w: Matrix,
    pub inner_iterations: usize,
    pub fixed_point_residual: f64,
}

impl PrimalInstance {
    fn validate(&self) -> Result<(), SubproblemError> {
        let fail = |reason: String| Err(SubproblemError::InvalidInstance { agent: self.agent, reason });
        if !(self.rho > 0.0) {
            return fail(format!("penalty must be positive, got {}", self.rho));
        }
        if self.agent >= self.n || !self.neighbors.contains(&self.agent) {
            return fail("neighbour set must contain the agent".into());
        }
        if self.anchors.len() != self.neighbors.len() {
            return fail(format!("{} anchors for {} neighbours", self.anchors.len(), self.neighbors.len()));
        }
        let n = self.n;
        let square = |m: &Matrix| m.nrows() == n && m.ncols() == n;
        if self.a.len() != n || self.b.len() != n || !square(&self.m) || !self.anchors.iter().all(square) {
            return fail("dimension mismatch".into());
        }
        Ok(())
    }

    /// Lipschitz constant of the smooth part's gradient, `ρ(2n + |N_i|)`.
    pub fn lipschitz(&self) -> f64 {
        self.rho * (2 * self.n + self.neighbors.len()) as f64
    }

    /// Strong convexity modulus, `ρ|N_i|`.
    pub fn strong_convexity(&self) -> f64 {
        self.rho * self.neighbors.len() as f64
    }

    fn support_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n];
        for &j in &self.neighbors {
            mask[j] = true;
        }
        mask
    }

    /// Zeroes the forbidden entries of row `i`.
    pub fn project_support(&self, w: &Matrix) -> Matrix {
        let mask = self.support_mask();
        let mut out = w.clone();
        for j in 0..self.n {
            if !mask[j] {
                out[(self.agent, j)] = 0.0;
            }
        }
        out
    }

    pub fn objective(&self, w: &Matrix) -> f64 {
        let n = self.n;
        let ones = Vector::from_element(n, 1.0);
        let row = w * &ones - &ones;
        let col = w.transpose() * &ones - &ones;
        let spectral = crate::spectral::operator_norm(&(w - averaging_matrix(n))) / n as f64;
        let linear = self.a.dot(&row) + self.b.dot(&col) + w.dot(&self.m);
        let anchors: f64 = self.anchors.iter().map(|x| (w - x).norm_squared()).sum();
        spectral + linear + 0.5 * self.rho * (row.norm_squared() + col.norm_squared() + anchors)
    }

    /// Gradient of everything except the spectral-norm term.
    pub fn smooth_gradient(&self, w: &Matrix) -> Matrix {
        SmoothPart::new(self).gradient(w)
    }
}

/// Precomputed pieces of the smooth gradient
/// `a1ᵀ + 1bᵀ + M + ρ[(W1 − 1)1ᵀ + 1(Wᵀ1 − 1)ᵀ + Σ_j (W − A_j)]`.
struct SmoothPart {
    constant: Matrix,
    rho: f64,
    degree: f64,
}

impl SmoothPart {
    fn new(inst: &PrimalInstance) -> Self {
        let n = inst.n;
        let mut constant = inst.m.clone();
        let anchor_sum = inst.anchors.iter().fold(Matrix::zeros(n, n), |acc, x| acc + x);
        constant -= anchor_sum * inst.rho;
        for i in 0..n {
            for j in 0..n {
                constant[(i, j)] += inst.a[i] + inst.b[j];
            }
        }
        Self { constant, rho: inst.rho, degree: inst.anchors.len() as f64 }
    }

    fn gradient(&self, w: &Matrix) -> Matrix {
        let n = w.nrows();
        let row: Vector = w.column_sum().add_scalar(-1.0);
        let col: Vector = w.row_sum().transpose().add_scalar(-1.0);
        let mut g = &self.constant + w * (self.rho * self.degree);
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] += self.rho * (row[i] + col[j]);
            }
        }
        g
    }
}

/// Solves the primal update to fixed-point residual `opts.tol`, starting
/// from `warm` when given (the agent's previous matrix) or from zero.
///
/// The returned matrix is exactly zero on the forbidden entries of row `i`.
pub fn solve_primal(
    inst: &PrimalInstance,
    opts: &SolverOptions,
    warm: Option<&Matrix>,
) -> Result<SolveReport, SubproblemError> {
    inst.validate()?;
    let n = inst.n;
    let smooth = SmoothPart::new(inst);
    let j = averaging_matrix(n);
    let gamma = opts.step.unwrap_or(1.0 / inst.lipschitz());
    let lambda = gamma / n as f64;
    let mask = inst.support_mask();
    let forbidden: Vec<usize> = (0..n).filter(|&c| !mask[c]).collect();
    let agent = inst.agent;
    let project = |m: &Matrix| {
        let mut out = m.clone();
        for &c in &forbidden {
            out[(agent, c)] = 0.0;
        }
        out
    };

    let mut z = warm.cloned().unwrap_or_else(|| Matrix::zeros(n, n));
    let mut x_support = project(&z);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_inner {
        iterations += 1;
        x_support = project(&z);
        let reflected = &x_support * 2.0 - &z - smooth.gradient(&x_support) * gamma;
        let x_spectral = prox_spectral_norm(&(reflected - &j), lambda) + &j;
        let step = x_spectral - &x_support;
        residual = frobenius_norm(&step);
        z += step;
        if residual <= opts.tol {
            break;
        }
    }
    let report = SolveReport { w: x_support, inner_iterations: iterations, fixed_point_residual: residual };
    if residual <= opts.tol {
        Ok(report)
    } else {
        Err(SubproblemError::NotConverged { agent, report })
    }
}

/// Independent first-order optimality check.
///
/// Builds the subdifferential of `‖W − J‖₂` at `w` from the top singular
/// subspace of `w − J` (singular values within `cluster` of the largest) and
/// returns the smallest norm of the support-projected sum of a subgradient
/// and the smooth gradient that a projected-gradient search over that
/// subdifferential finds. A value near zero certifies optimality.
pub fn optimality_residual(inst: &PrimalInstance, w: &Matrix, cluster: f64) -> f64 {
    let n = inst.n;
    let scale = 1.0 / n as f64;
    let grad = inst.smooth_gradient(w);
    let dec = svd(&(w - averaging_matrix(n)));
    let top = dec.singular_values[0];
    let residual_of = |g: &Matrix| frobenius_norm(&inst.project_support(&(g * scale + &grad)));

    if top <= cluster {
        // subdifferential is the whole unit nuclear ball
        let mut g = Matrix::zeros(n, n);
        let step = 1.0 / (scale * scale);
        let mut best = residual_of(&g);
        for _ in 0..5_000 {
            let r = inst.project_support(&(&g * scale + &grad));
            g = project_nuclear_ball(&(&g - r * (scale * step)), 1.0);
            best = best.min(residual_of(&g));
        }
        return best;
    }

    let m = dec.singular_values.iter().take_while(|&&s| s >= top - cluster).count();
    let u1 = dec.u.columns(0, m).into_owned();
    let v1 = dec.v.columns(0, m).into_owned();
    let subgradient = |t: &Matrix| &u1 * t * v1.transpose();
    let mut t = Matrix::identity(m, m) / m as f64;
    let mut best = residual_of(&subgradient(&t));
    let step = 1.0 / (scale * scale);
    for _ in 0..5_000 {
        let r = inst.project_support(&(subgradient(&t) * scale + &grad));
        let mut dt = u1.transpose() * r * &v1 * scale;
        dt = (&dt + dt.transpose()) * 0.5;
        t = project_spectraplex(&(&t - dt * step));
        let value = residual_of(&subgradient(&t));
        if value < best {
            best = value;
        }
        if best == 0.0 {
            break;
        }
    }
    best
}

/// Projection onto `{T = Tᵀ ⪰ 0, tr T = 1}`.
fn project_spectraplex(t: &Matrix) -> Matrix {
    let sym = (t + t.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let projected = project_simplex(&values);
    let q = &eig.eigenvectors;
    let mut out = Matrix::zeros(t.nrows(), t.ncols());
    for (k, &p) in projected.iter().enumerate() {
        if p > 0.0 {
            out += q.column(k) * q.column(k).transpose() * p;
        }
    }
    out
}

fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        cumulative += x;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if x - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::{Rng, SeedableRng};

    fn instance(g: &Graph, agent: usize, rho: f64, seed: u64, scale: f64) -> PrimalInstance {
        let n = g.len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut random = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| scale * rng.gen_range(-1.0..1.0));
        let a = random(n, 1).column(0).into_owned();
        let b = random(n, 1).column(0).into_owned();
        let m = random(n, n);
        let anchors = g.neighbors(agent).iter().map(|_| random(n, n)).collect();
        PrimalInstance { agent, n, neighbors: g.neighbors(agent).to_vec(), a, b, m, anchors, rho }
    }

    #[test]
    fn complete_graph_zero_duals_returns_j() {
        let n = 4;
        let g = Graph::complete(n);
        let j = averaging_matrix(n);
        let inst = PrimalInstance {
            agent: 1,
            n,
            neighbors: g.neighbors(1).to_vec(),
            a: Vector::zeros(n),
            b: Vector::zeros(n),
            m: Matrix::zeros(n, n),
            anchors: vec![j.clone(); n],
            rho: 1.0 / 16.0,
        };
        let report = solve_primal(&inst, &SolverOptions::default(), None).unwrap();
        assert!(frobenius_norm(&(report.w - &j)) < 1e-7);
    }

    #[test]
    fn scalar_instance_matches_closed_form() {
        let g = Graph::complete(1);
        for seed in 0..20 {
            let inst = instance(&g, 0, 0.3, seed, 2.0);
            let (a, b, m, c, rho) = (inst.a[0], inst.b[0], inst.m[(0, 0)], inst.anchors[0][(0, 0)], inst.rho);
            // piecewise quadratic in w with a kink at w = 1
            let linear = a + b + m;
            let above = (2.0 * rho + rho * c - 1.0 - linear) / (3.0 * rho);
            let below = (2.0 * rho + rho * c + 1.0 - linear) / (3.0 * rho);
            let expected = if above > 1.0 {
                above
            } else if below < 1.0 {
                below
            } else {
                1.0
            };
            let report = solve_primal(&inst, &SolverOptions::default(), None).unwrap();
            assert!((report.w[(0, 0)] - expected).abs() < 1e-7, "seed {seed}: {} vs {expected}", report.w[(0, 0)]);
        }
    }

    #[test]
    fn forbidden_entries_are_exactly_zero() {
        let g = Graph::path(5);
        for agent in 0..5 {
            let inst = instance(&g, agent, 1.0 / 16.0, agent as u64, 0.3);
            let report = solve_primal(&inst, &SolverOptions::default(), None).unwrap();
            for j in 0..5 {
                if !g.has_edge(agent, j) {
                    assert_eq!(report.w[(agent, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn certificate_and_uniqueness() {
        let g = Graph::er_random(5, 0.5, 2).unwrap();
        for seed in 0..5 {
            let inst = instance(&g, seed as usize % 5, 0.25, seed, 0.5);
            let opts = SolverOptions::default();
            let cold = solve_primal(&inst, &opts, None).unwrap();
            let warm_start = Matrix::from_element(5, 5, 0.7);
            let warm = solve_primal(&inst, &opts, Some(&warm_start)).unwrap();
            assert!(frobenius_norm(&(&cold.w - &warm.w)) <= 2.0 * opts.tol * 10.0);
            let res = optimality_residual(&inst, &cold.w, 1e-6);
            assert!(res <= 10.0 * opts.tol, "certificate {res}");
        }
    }

    #[test]
    fn reports_failure_with_best_iterate() {
        let g = Graph::path(3);
        let inst = instance(&g, 1, 0.1, 3, 1.0);
        let opts = SolverOptions { tol: 1e-14, max_inner: 3, step: None };
        match solve_primal(&inst, &opts, None) {
            Err(SubproblemError::NotConverged { agent: 1, report }) => {
                assert_eq!(report.inner_iterations, 3);
                assert!(report.fixed_point_residual > 1e-14);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_instances() {
        let g = Graph::path(3);
        let mut inst = instance(&g, 0, 0.1, 0, 1.0);
        inst.rho = 0.0;
        assert!(matches!(solve_primal(&inst, &SolverOptions::default(), None), Err(SubproblemError::InvalidInstance { .. })));
        let mut inst = instance(&g, 0, 0.1, 0, 1.0);
        inst.anchors.pop();
        assert!(matches!(solve_primal(&inst, &SolverOptions::default(), None), Err(SubproblemError::InvalidInstance { .. })));
    }

    #[test]
    fn objective_decreases_along_averaged_iterates() {
        // the solver's final answer is no worse than its warm start
        let g = Graph::er_random(6, 0.6, 4).unwrap();
        let inst = instance(&g, 2, 1.0 / 16.0, 9, 0.2);
        let start = inst.project_support(&averaging_matrix(6));
        let report = solve_primal(&inst, &SolverOptions::default(), Some(&start)).unwrap();
        assert!(inst.objective(&report.w) <= inst.objective(&start) + 1e-12);
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, 0.2, -1.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert_eq!(project_simplex(&[2.0]), vec![1.0]);
    }
}
