//! Independent oracles shared by the integration tests. Nothing here calls
//! the solvers under test; linear algebra comes from nalgebra directly.

#![allow(dead_code)]

use fastavg::subproblem::PrimalInstance;
use fastavg::{Graph, Matrix, Vector};
use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn averaging(n: usize) -> Matrix {
    Matrix::from_element(n, n, 1.0 / n as f64)
}

/// `‖A‖₂` from nalgebra's SVD.
pub fn spectral_norm(a: &Matrix) -> f64 {
    a.clone().svd(false, false).singular_values.max()
}

pub fn factor(w: &Matrix) -> f64 {
    spectral_norm(&(w - averaging(w.nrows())))
}

/// Largest eigenvalue modulus from nalgebra's Schur-based eigenvalues.
pub fn spectral_radius(a: &Matrix) -> f64 {
    a.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// The first `count` connected ER graphs with `n` cycling through
/// `n_min..=n_max`, taking seeds in increasing order.
pub fn connected_er_graphs(count: usize, n_min: usize, n_max: usize, p: f64) -> Vec<(u64, Graph)> {
    let mut out = Vec::new();
    let mut seed = 0u64;
    while out.len() < count {
        let n = n_min + out.len() % (n_max - n_min + 1);
        let g = Graph::er_random(n, p, seed).unwrap();
        if g.is_connected() {
            out.push((seed, g));
        }
        seed += 1;
    }
    out
}

/// Projection onto the feasible affine set by solving the KKT system
/// `[I Aᵀ; A 0] [w; λ] = [w0; 1]` over the support coordinates with an SVD
/// least-squares solve.
pub fn kkt_projection(w0: &Matrix, g: &Graph) -> Matrix {
    let n = g.len();
    let coords: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..n).filter(move |&j| g.has_edge(i, j)).map(move |j| (i, j))).collect();
    let m = coords.len();
    let size = m + 2 * n;
    let mut kkt = Matrix::zeros(size, size);
    let mut rhs = Vector::zeros(size);
    for (k, &(i, j)) in coords.iter().enumerate() {
        kkt[(k, k)] = 1.0;
        rhs[k] = w0[(i, j)];
        // row-sum constraint i and column-sum constraint j
        kkt[(k, m + i)] = 1.0;
        kkt[(m + i, k)] = 1.0;
        kkt[(k, m + n + j)] = 1.0;
        kkt[(m + n + j, k)] = 1.0;
    }
    for r in 0..2 * n {
        rhs[m + r] = 1.0;
    }
    let sol = kkt.svd(true, true).solve(&rhs, 1e-12).unwrap();
    let mut w = Matrix::zeros(n, n);
    for (k, &(i, j)) in coords.iter().enumerate() {
        w[(i, j)] = sol[k];
    }
    w
}

/// The optimal factor on the 3-node path. Feasibility forces the matrix to
/// be symmetric with two free weights `a = w12`, `b = w23`; scan a grid and
/// refine by shrinking pattern search.
pub fn path3_optimum() -> f64 {
    let f = |a: f64, b: f64| {
        let w = Matrix::from_row_slice(3, 3, &[1.0 - a, a, 0.0, a, 1.0 - a - b, b, 0.0, b, 1.0 - b]);
        factor(&w)
    };
    let (mut best_a, mut best_b, mut best) = (0.0, 0.0, f64::INFINITY);
    let steps = 300;
    for ia in 0..=steps {
        for ib in 0..=steps {
            let a = -0.5 + 2.0 * ia as f64 / steps as f64;
            let b = -0.5 + 2.0 * ib as f64 / steps as f64;
            let v = f(a, b);
            if v < best {
                (best_a, best_b, best) = (a, b, v);
            }
        }
    }
    let mut h = 2.0 / steps as f64;
    while h > 1e-13 {
        let mut improved = false;
        for (da, db) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h), (h, h), (-h, -h), (h, -h), (-h, h)] {
            let v = f(best_a + da, best_b + db);
            if v < best {
                (best_a, best_b, best) = (best_a + da, best_b + db, v);
                improved = true;
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    best
}

/// A random subproblem instance with `n ≤ 6`.
pub fn random_instance(seed: u64) -> PrimalInstance {
    let mut r = rng(seed);
    let n = r.gen_range(2..=6);
    let agent = r.gen_range(0..n);
    let mut neighbors: Vec<usize> = (0..n).filter(|&j| j == agent || r.gen_bool(0.5)).collect();
    neighbors.sort_unstable();
    let mut mat = |scale: f64| Matrix::from_fn(n, n, |_, _| r.gen_range(-scale..scale));
    let m = mat(0.2);
    let anchors = neighbors.iter().map(|_| averaging(n) + mat(0.3)).collect();
    let a = Vector::from_fn(n, |_, _| r.gen_range(-0.2..0.2));
    let b = Vector::from_fn(n, |_, _| r.gen_range(-0.2..0.2));
    let rho = r.gen_range(0.05..0.5);
    PrimalInstance { agent, n, neighbors, a, b, m, anchors, rho }
}

const P: usize = 6;
type M6 = SMatrix<f64, P, P>;
type V6 = SVector<f64, P>;
type B6 = SMatrix<f64, P, 3>;

/// Modified Gram-Schmidt on the columns; degenerate columns become zero.
fn orthonormalize(mut b: B6) -> B6 {
    for j in 0..3 {
        for k in 0..j {
            let proj = b.column(k).dot(&b.column(j));
            let col_k = b.column(k).into_owned();
            b.column_mut(j).axpy(-proj, &col_k, 1.0);
        }
        let norm = b.column(j).norm();
        if norm > 1e-300 {
            b.column_mut(j).unscale_mut(norm);
        }
    }
    b
}

/// Projected subgradient method on the subproblem objective, written
/// against the objective formula only. Steps `min(1/L, 1/(μ(t+1)))` exploit
/// strong convexity; the spectral-norm subgradient `u vᵀ` comes from a
/// warm-started power iteration. Matrices are zero-padded to 6×6 so the loop
/// never allocates.
pub fn subgradient_oracle(inst: &PrimalInstance, iterations: usize) -> Matrix {
    subgradient_oracle_with(inst, iterations, 2)
}

pub fn subgradient_oracle_with(inst: &PrimalInstance, iterations: usize, power_steps: usize) -> Matrix {
    let n = inst.n;
    assert!(n <= P);
    let pad = |m: &Matrix| M6::from_fn(|i, j| if i < n && j < n { m[(i, j)] } else { 0.0 });
    let ones = V6::from_fn(|i, _| if i < n { 1.0 } else { 0.0 });
    let j_mat = ones * ones.transpose() / n as f64;
    let a = V6::from_fn(|i, _| if i < n { inst.a[i] } else { 0.0 });
    let b = V6::from_fn(|i, _| if i < n { inst.b[i] } else { 0.0 });
    let anchor_sum: M6 = inst.anchors.iter().map(pad).sum();
    let count = inst.anchors.len() as f64;
    let rho = inst.rho;
    // gradient of the smooth part = constant + ρ[(W1)1ᵀ + 1(Wᵀ1)ᵀ + count·W]
    let constant = a * ones.transpose() + ones * b.transpose() + pad(&inst.m)
        - (ones * ones.transpose()) * (2.0 * rho)
        - anchor_sum * rho;
    let mut keep = [false; P];
    for &j in &inst.neighbors {
        keep[j] = true;
    }
    let project = |w: &mut M6| {
        for j in 0..P {
            if j >= n || !keep[j] {
                w[(inst.agent, j)] = 0.0;
            }
        }
        for i in n..P {
            for j in 0..P {
                w[(i, j)] = 0.0;
            }
        }
    };

    let lipschitz = rho * (2 * n) as f64 + rho * count;
    let mu = rho * count;
    let mut w = anchor_sum / count;
    project(&mut w);
    let mut block = orthonormalize(B6::from_fn(|i, j| if i < n { 1.0 + (i * (j + 1)) as f64 } else { 0.0 }));
    let mut average = M6::zeros();
    let mut weight_total = 0.0;
    let tail = iterations / 2;
    for t in 0..iterations {
        let centered = w - j_mat;
        let gram = centered.transpose() * centered;
        // block power iteration with a Rayleigh-Ritz step, so near-ties at
        // the top of the spectrum are resolved within the block
        for _ in 0..power_steps {
            block = orthonormalize(gram * block);
        }
        let ritz = (block.transpose() * gram * block).symmetric_eigen();
        let v = block * ritz.eigenvectors.column(ritz.eigenvalues.imax());
        let u_raw = centered * v;
        let sigma = u_raw.norm();
        let sub = if sigma > 0.0 { (u_raw / sigma) * v.transpose() } else { M6::zeros() };
        let grad = constant + rho * ((w * ones) * ones.transpose() + ones * (w.transpose() * ones).transpose())
            + w * (rho * count)
            + sub / n as f64;
        let step = (1.0 / lipschitz).min(1.0 / (mu * (t + 1) as f64));
        w -= grad * step;
        project(&mut w);
        if t >= tail {
            let weight = (t - tail + 1) as f64;
            average += w * weight;
            weight_total += weight;
        }
    }
    let avg = average / weight_total;
    Matrix::from_fn(n, n, |i, j| avg[(i, j)])
}
