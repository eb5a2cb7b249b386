//! Equipartitioned soft codes by entropy-regularized optimal transport.
//!
//! Given prototype scores `S` (K × B), [`compute_codes`] finds the matrix `Q`
//! on the transportation polytope
//!
//! ```text
//! Q 1_B = 1_K / K,    Qᵀ 1_K = 1_B / B
//! ```
//!
//! that maximizes `Tr(Qᵀ S) + ε H(Q)`. The optimum has the form
//! `Diag(λ) exp(S / ε) Diag(μ)` and is reached by alternately rescaling rows
//! and columns (Sinkhorn–Knopp).

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sweep cap used by [`SinkhornConfig::converged`].
pub const CONVERGED_MAX_SWEEPS: usize = 1000;
/// Marginal tolerance used by [`SinkhornConfig::converged`].
pub const CONVERGED_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Entropy weight ε.
    pub epsilon: f64,
    /// Number of row+column normalization sweeps (an upper bound when a
    /// tolerance is set).
    pub n_iterations: usize,
    /// Stop early once both marginal deviations fall below this value;
    /// zero disables early exit.
    pub convergence_tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            n_iterations: 3,
            convergence_tolerance: 0.0,
        }
    }
}

impl SinkhornConfig {
    /// Runs to a tight fixed point instead of a fixed sweep count.
    pub fn converged(epsilon: f64) -> Self {
        Self {
            epsilon,
            n_iterations: CONVERGED_MAX_SWEEPS,
            convergence_tolerance: CONVERGED_TOLERANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!(
                "sinkhorn epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.n_iterations == 0 {
            return Err(Error::Parameter("sinkhorn needs at least one sweep".into()));
        }
        if self.convergence_tolerance.is_nan() || self.convergence_tolerance < 0.0 {
            return Err(Error::Parameter(format!(
                "convergence tolerance must be non-negative, got {}",
                self.convergence_tolerance
            )));
        }
        Ok(())
    }
}

/// Row and column rescaling vectors of the max-shifted kernel
/// `exp(S/ε - max(S/ε))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornState {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Soft assignment of B samples to K prototypes (K × B).
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix {
    q: Matrix,
}

impl CodeMatrix {
    /// Wraps an arbitrary non-negative matrix, e.g. a candidate for the
    /// transport objective.
    pub fn new(q: Matrix) -> Result<Self> {
        if q.as_slice().iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Input(
                "code entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { q })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.q
    }

    pub fn into_matrix(self) -> Matrix {
        self.q
    }

    pub fn n_prototypes(&self) -> usize {
        self.q.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.q.cols()
    }

    /// Largest |row sum − 1/K|.
    pub fn row_deviation(&self) -> f64 {
        let target = 1.0 / self.q.rows() as f64;
        max_deviation(&self.q.row_sums(), target)
    }

    /// Largest |column sum − 1/B|.
    pub fn col_deviation(&self) -> f64 {
        let target = 1.0 / self.q.cols() as f64;
        max_deviation(&self.q.col_sums(), target)
    }
}

fn max_deviation(sums: &[f64], target: f64) -> f64 {
    sums.iter().map(|s| (s - target).abs()).fold(0.0, f64::max)
}

/// Everything [`compute_codes_detailed`] learns along the way.
#[derive(Clone, Debug)]
pub struct SinkhornOutcome {
    pub codes: CodeMatrix,
    pub state: SinkhornState,
    pub sweeps: usize,
    /// Dual Newton steps taken after the sweep cap (converged mode only).
    pub newton_steps: usize,
    pub converged: bool,
    /// L1 distance of the row sums from 1/K after each sweep (column sums are
    /// exact at that point up to rounding).
    pub row_l1_history: Vec<f64>,
}

/// Sinkhorn–Knopp codes for a K × B score matrix.
pub fn compute_codes(scores: &Matrix, config: &SinkhornConfig) -> Result<CodeMatrix> {
    compute_codes_detailed(scores, config).map(|o| o.codes)
}

pub fn compute_codes_detailed(scores: &Matrix, config: &SinkhornConfig) -> Result<SinkhornOutcome> {
    config.validate()?;
    let (k, b) = scores.shape();
    if k == 0 || b == 0 {
        return Err(Error::Input(format!("empty score matrix {k}x{b}")));
    }
    if !scores.is_finite() {
        return Err(Error::Input(
            "score matrix contains non-finite values".into(),
        ));
    }

    let eps = config.epsilon;
    let max = scores
        .as_slice()
        .iter()
        .fold(f64::NEG_INFINITY, |a, &v| a.max(v))
        / eps;
    let kernel = scores.map(|s| (s / eps - max).exp());

    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let mut lambda = vec![1.0; k];
    let mut mu = vec![1.0; b];
    let mut history = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    let tol = config.convergence_tolerance;

    while sweeps < config.n_iterations {
        sweeps += 1;
        for (r, l) in lambda.iter_mut().enumerate() {
            let mass: f64 = kernel.row(r).iter().zip(&mu).map(|(kv, m)| kv * m).sum();
            if !(mass > 0.0 && mass.is_finite()) {
                return Err(vanishing_mass("prototype", r, eps));
            }
            *l = row_target / mass;
        }
        let mut col_mass = vec![0.0; b];
        for (r, &l) in lambda.iter().enumerate() {
            for (c, kv) in col_mass.iter_mut().zip(kernel.row(r)) {
                *c += l * kv;
            }
        }
        for (c, (m, mass)) in mu.iter_mut().zip(&col_mass).enumerate() {
            if !(*mass > 0.0 && mass.is_finite()) {
                return Err(vanishing_mass("sample", c, eps));
            }
            *m = col_target / mass;
        }

        let (row_dev, row_l1, col_dev) = deviations(&kernel, &lambda, &mu, row_target, col_target);
        history.push(row_l1);
        if tol > 0.0 && row_dev < tol && col_dev < tol {
            converged = true;
            break;
        }
    }

    let mut newton_steps = 0;
    if tol > 0.0 && !converged {
        // Near-degenerate kernels (small ε) make the sweeps crawl; finish the
        // same fixed-point equations with Newton steps on the dual.
        let log_kernel = scores.map(|s| s / eps - max);
        let mut f: Vec<f64> = lambda.iter().map(|l| l.ln()).collect();
        let mut g: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
        let polish = newton_polish(&log_kernel, &mut f, &mut g, tol);
        newton_steps = polish.steps;
        converged = polish.converged;
        for (l, fv) in lambda.iter_mut().zip(&f) {
            *l = fv.exp();
        }
        for (m, gv) in mu.iter_mut().zip(&g) {
            *m = gv.exp();
        }
        let q = Matrix::from_fn(k, b, |r, c| (f[r] + g[c] + log_kernel[(r, c)]).exp());
        return Ok(SinkhornOutcome {
            codes: CodeMatrix { q },
            state: SinkhornState { lambda, mu },
            sweeps,
            newton_steps,
            converged,
            row_l1_history: history,
        });
    }

    let q = Matrix::from_fn(k, b, |r, c| lambda[r] * kernel[(r, c)] * mu[c]);
    Ok(SinkhornOutcome {
        codes: CodeMatrix { q },
        state: SinkhornState { lambda, mu },
        sweeps,
        newton_steps,
        converged,
        row_l1_history: history,
    })
}

fn vanishing_mass(what: &str, index: usize, eps: f64) -> Error {
    Error::Input(format!(
        "{what} {index} has vanishing kernel mass; scores span too wide a range for epsilon {eps}"
    ))
}

const NEWTON_MAX_STEPS: usize = 100;

struct Polish {
    steps: usize,
    converged: bool,
}

/// Newton's method on the dual potentials `f` (rows) and `g` (columns) of
/// `Q = exp(f_k + g_b + log_kernel_kb)`, minimizing
/// `Σ Q − Σ f / K − Σ g / B` with backtracking. `g[0]` is held fixed to remove
/// the shift symmetry `f + t, g − t`.
fn newton_polish(log_kernel: &Matrix, f: &mut [f64], g: &mut [f64], tol: f64) -> Polish {
    let (k, b) = log_kernel.shape();
    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let plan = |f: &[f64], g: &[f64]| {
        Matrix::from_fn(k, b, |r, c| (f[r] + g[c] + log_kernel[(r, c)]).exp())
    };
    let potential = |q: &Matrix, f: &[f64], g: &[f64]| {
        q.sum() - f.iter().sum::<f64>() * row_target - g.iter().sum::<f64>() * col_target
    };

    let n = k + b - 1;
    let mut q = plan(f, g);
    for step in 0..NEWTON_MAX_STEPS {
        let rows = q.row_sums();
        let cols = q.col_sums();
        let row_dev = max_deviation(&rows, row_target);
        let col_dev = max_deviation(&cols, col_target);
        if row_dev < tol && col_dev < tol {
            return Polish {
                steps: step,
                converged: true,
            };
        }

        // Unknowns: f_0..f_{K-1}, g_1..g_{B-1}.
        let mut grad = vec![0.0; n];
        for r in 0..k {
            grad[r] = rows[r] - row_target;
        }
        for c in 1..b {
            grad[k + c - 1] = cols[c] - col_target;
        }
        let mut hess = Matrix::zeros(n, n);
        for r in 0..k {
            hess[(r, r)] = rows[r];
            for c in 1..b {
                hess[(r, k + c - 1)] = q[(r, c)];
                hess[(k + c - 1, r)] = q[(r, c)];
            }
        }
        for c in 1..b {
            hess[(k + c - 1, k + c - 1)] = cols[c];
        }
        // Tiny ridge keeps the solve well posed when blocks nearly decouple.
        let ridge = 1e-14 * (0..n).map(|i| hess[(i, i)]).fold(0.0, f64::max);
        for i in 0..n {
            hess[(i, i)] += ridge;
        }
        let rhs: Vec<f64> = grad.iter().map(|v| -v).collect();
        let Some(dir) = solve_dense(hess, rhs) else {
            return Polish {
                steps: step,
                converged: false,
            };
        };

        let slope: f64 = grad.iter().zip(&dir).map(|(a, d)| a * d).sum();
        let base = potential(&q, f, g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let nf: Vec<f64> = f.iter().enumerate().map(|(r, v)| v + t * dir[r]).collect();
            let ng: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { *v } else { v + t * dir[k + c - 1] })
                .collect();
            let nq = plan(&nf, &ng);
            let value = potential(&nq, &nf, &ng);
            if value.is_finite() && value <= base + 1e-4 * t * slope {
                f.copy_from_slice(&nf);
                g.copy_from_slice(&ng);
                q = nq;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Polish {
                steps: step,
                converged: false,
            };
        }
    }
    let converged = max_deviation(&q.row_sums(), row_target) < tol
        && max_deviation(&q.col_sums(), col_target) < tol;
    Polish {
        steps: NEWTON_MAX_STEPS,
        converged,
    }
}

/// Gaussian elimination with partial pivoting. `None` if singular.
fn solve_dense(mut a: Matrix, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))?;
        if a[(pivot, col)] == 0.0 {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                let tmp = a[(col, c)];
                a[(col, c)] = a[(pivot, c)];
                a[(pivot, c)] = tmp;
            }
            rhs.swap(col, pivot);
        }
        let p = a[(col, col)];
        for r in col + 1..n {
            let factor = a[(r, col)] / p;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[(r, c)] -= factor * a[(col, c)];
            }
            rhs[r] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = rhs[r];
        for c in r + 1..n {
            acc -= a[(r, c)] * x[c];
        }
        x[r] = acc / a[(r, r)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// (max row deviation, L1 row deviation, max column deviation).
fn deviations(
    kernel: &Matrix,
    lambda: &[f64],
    mu: &[f64],
    row_target: f64,
    col_target: f64,
) -> (f64, f64, f64) {
    let mut col_sums = vec![0.0; mu.len()];
    let mut row_max = 0.0f64;
    let mut row_l1 = 0.0;
    for (r, &l) in lambda.iter().enumerate() {
        let mut row = 0.0;
        for ((c, kv), m) in col_sums.iter_mut().zip(kernel.row(r)).zip(mu) {
            let q = l * kv * m;
            row += q;
            *c += q;
        }
        row_max = row_max.max((row - row_target).abs());
        row_l1 += (row - row_target).abs();
    }
    (row_max, row_l1, max_deviation(&col_sums, col_target))
}

/// `-Σ q log q` with `0 log 0 = 0`.
pub fn entropy(q: &CodeMatrix) -> f64 {
    -q.q.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `Tr(Qᵀ S) + ε H(Q)`, the quantity the codes maximize.
pub fn transport_objective(scores: &Matrix, q: &CodeMatrix, epsilon: f64) -> Result<f64> {
    if scores.shape() != q.q.shape() {
        return Err(Error::dim(
            "transport_objective",
            scores.shape(),
            q.q.shape(),
        ));
    }
    let trace: f64 = scores
        .as_slice()
        .iter()
        .zip(q.q.as_slice())
        .map(|(s, v)| s * v)
        .sum();
    Ok(trace + epsilon * entropy(q))
}
