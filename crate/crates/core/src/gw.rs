//! Order-2 Gromov-Wasserstein discrepancy between two kernel matrices.
//!
//! The objective over couplings `T` with marginals `(mu, nu)` is
//! `f(T) = <C(T), T>` with
//!
//! ```text
//! C(T) = (K1 .* K1) mu 1' + 1 ((K2 .* K2) nu)' - 2 K1 T K2'
//! ```
//!
//! and is minimized by a proximal-point loop: each outer step solves
//! `min <C(T_k), T> + gamma KL(T | T_k)` with Sinkhorn scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::linalg::Mat;
use crate::scalar::Scalar;

pub const FEASIBILITY_TOL: f64 = 1e-8;
const MASS_TOL: f64 = 1e-10;
const ADAPTIVE_FACTOR: f64 = 0.01;
const LOG_DOMAIN_SIZE: usize = 10_000;
const SINKHORN_STOP: f64 = 1e-14;
const MAX_BACKTRACKS: usize = 40;
const PERTURBATION: f64 = 0.05;

/// A coupling with its fixed marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<T> {
    matrix: Mat<T>,
    mu: Vec<T>,
    nu: Vec<T>,
}

impl<T: Scalar> TransportPlan<T> {
    /// Validates nonnegativity, total mass and both marginals.
    pub fn new(matrix: Mat<T>, mu: Vec<T>, nu: Vec<T>) -> Result<Self> {
        check_marginal(&mu, "row")?;
        check_marginal(&nu, "column")?;
        if matrix.shape() != (mu.len(), nu.len()) {
            return Err(Error::Shape(format!(
                "plan is {:?} but marginals have lengths {} and {}",
                matrix.shape(),
                mu.len(),
                nu.len()
            )));
        }
        if let Some(v) = matrix.as_slice().iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(Error::Range(format!("plan entry {v} is negative or non-finite")));
        }
        let plan = TransportPlan { matrix, mu, nu };
        let err = plan.marginal_error();
        let tol = T::lit(FEASIBILITY_TOL).max(T::epsilon() * T::lit(64.0));
        if err > tol {
            return Err(Error::Range(format!("plan violates its marginals by {err}")));
        }
        let mass: T = plan.matrix.as_slice().iter().copied().sum();
        if (mass - T::one()).abs() > T::lit(MASS_TOL).max(T::epsilon() * T::lit(64.0)) {
            return Err(Error::Range(format!("plan has total mass {mass}")));
        }
        Ok(plan)
    }

    /// The independent coupling `mu nu'`.
    pub fn product(mu: Vec<T>, nu: Vec<T>) -> Result<Self> {
        check_marginal(&mu, "row")?;
        check_marginal(&nu, "column")?;
        let matrix = Mat::from_fn(mu.len(), nu.len(), |m, l| mu[m] * nu[l]);
        Ok(TransportPlan { matrix, mu, nu })
    }

    #[inline]
    pub fn matrix(&self) -> &Mat<T> {
        &self.matrix
    }

    #[inline]
    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    #[inline]
    pub fn nu(&self) -> &[T] {
        &self.nu
    }

    #[inline]
    pub fn get(&self, m: usize, l: usize) -> T {
        self.matrix[(m, l)]
    }

    /// Largest absolute deviation of a row or column sum from its marginal.
    pub fn marginal_error(&self) -> T {
        let rows = self.matrix.row_sums();
        let cols = self.matrix.col_sums();
        let r = rows.iter().zip(&self.mu).map(|(a, b)| (*a - *b).abs());
        let c = cols.iter().zip(&self.nu).map(|(a, b)| (*a - *b).abs());
        r.chain(c).fold(T::zero(), T::max)
    }

    pub fn transpose(&self) -> Self {
        TransportPlan {
            matrix: self.matrix.transpose(),
            mu: self.nu.clone(),
            nu: self.mu.clone(),
        }
    }

    pub fn into_parts(self) -> (Mat<T>, Vec<T>, Vec<T>) {
        (self.matrix, self.mu, self.nu)
    }
}

pub fn uniform<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::one() / T::from_usize_lossy(n); n]
}

fn check_marginal<T: Scalar>(v: &[T], which: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Shape(format!("{which} marginal is empty")));
    }
    if v.iter().any(|x| !(*x >= T::zero()) || !x.is_finite()) {
        return Err(Error::Range(format!("{which} marginal has a negative or non-finite entry")));
    }
    let s: T = v.iter().copied().sum();
    let tol = T::lit(1e-9).max(T::epsilon() * T::lit(16.0) * T::from_usize_lossy(v.len()));
    if (s - T::one()).abs() > tol {
        return Err(Error::Range(format!("{which} marginal sums to {s}, expected 1")));
    }
    Ok(())
}

/// Solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GwConfig {
    /// Fixed proximal weight; `None` uses `0.01 * mean(cost)` per outer step.
    pub proximal_weight: Option<f64>,
    pub outer_iters: usize,
    pub sinkhorn_iters: usize,
    pub tolerance: f64,
}

impl Default for GwConfig {
    fn default() -> Self {
        GwConfig {
            proximal_weight: None,
            outer_iters: 20,
            sinkhorn_iters: 100,
            tolerance: 1e-7,
        }
    }
}

impl GwConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.proximal_weight {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("proximal weight must be positive, got {g}")));
            }
        }
        if self.outer_iters == 0 || self.sinkhorn_iters == 0 {
            return Err(Error::Config("GW iteration counts must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("GW tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwResult<T> {
    pub plan: TransportPlan<T>,
    pub gw_squared: T,
    /// Objective after each outer iteration.
    pub objective_trace: Vec<T>,
    pub outer_iterations: usize,
    /// Multiply-add count over the whole solve.
    pub arith_ops: u64,
    /// Whether any proximal step ran in the log domain.
    pub used_log_domain: bool,
}

fn check_shapes<T: Scalar>(k1: &Mat<T>, k2: &Mat<T>, plan: &TransportPlan<T>) -> Result<()> {
    let (m, l) = plan.matrix.shape();
    if k1.shape() != (m, m) || k2.shape() != (l, l) {
        return Err(Error::Shape(format!(
            "kernels {:?} and {:?} do not match a {m}x{l} plan",
            k1.shape(),
            k2.shape()
        )));
    }
    Ok(())
}

/// Cost matrix for square matrices that need not be valid kernels.
fn cost_of<T: Scalar>(k1: &Mat<T>, k2: &Mat<T>, plan: &TransportPlan<T>, ops: &mut u64) -> Mat<T> {
    let (m, l) = plan.matrix.shape();
    let two = T::lit(2.0);
    let row_term: Vec<T> = (0..m)
        .map(|i| k1.row(i).iter().zip(&plan.mu).map(|(&k, &w)| k * k * w).sum())
        .collect();
    let col_term: Vec<T> = (0..l)
        .map(|j| k2.row(j).iter().zip(&plan.nu).map(|(&k, &w)| k * k * w).sum())
        .collect();
    // K1 T is M x L; (K1 T) K2' is M x L
    let k1t = k1.matmul(&plan.matrix).expect("shapes checked");
    let cross = k1t.matmul_transpose(k2).expect("shapes checked");
    *ops += (m * m * l + m * l * l + m * m + l * l + m * l) as u64;
    Mat::from_fn(m, l, |i, j| row_term[i] + col_term[j] - two * cross[(i, j)])
}

pub fn cost_matrix<T: Scalar>(k1: &KernelMatrix<T>, k2: &KernelMatrix<T>, plan: &TransportPlan<T>) -> Result<Mat<T>> {
    check_shapes(k1.matrix(), k2.matrix(), plan)?;
    Ok(cost_of(k1.matrix(), k2.matrix(), plan, &mut 0))
}

/// `<C(T), T>` at a given plan.
pub fn objective<T: Scalar>(k1: &KernelMatrix<T>, k2: &KernelMatrix<T>, plan: &TransportPlan<T>) -> Result<T> {
    let c = cost_matrix(k1, k2, plan)?;
    Ok(c.frobenius_dot(plan.matrix()))
}

/// Gradient of `<C(K1, K2, T), T>` with respect to the entries of `K1` at a
/// fixed plan: `2 K1 .* mu mu' - 2 T K2 T'`.
pub fn grad_wrt_k1<T: Scalar>(k1: &KernelMatrix<T>, k2: &KernelMatrix<T>, plan: &TransportPlan<T>) -> Result<Mat<T>> {
    check_shapes(k1.matrix(), k2.matrix(), plan)?;
    Ok(grad_of(k1.matrix(), k2.matrix(), plan))
}

fn grad_of<T: Scalar>(k1: &Mat<T>, k2: &Mat<T>, plan: &TransportPlan<T>) -> Mat<T> {
    let m = k1.rows();
    let two = T::lit(2.0);
    let tk2 = plan.matrix.matmul(k2).expect("shapes checked");
    let tk2t = tk2.matmul_transpose(&plan.matrix).expect("shapes checked");
    Mat::from_fn(m, m, |i, j| two * k1[(i, j)] * plan.mu[i] * plan.mu[j] - two * tk2t[(i, j)])
}

/// Hard cluster labels: `argmax_l T[m, l]`, smallest `l` on ties.
pub fn plan_to_assignment<T: Scalar>(plan: &TransportPlan<T>) -> Vec<usize> {
    let (m, _) = plan.matrix.shape();
    (0..m)
        .map(|i| {
            let row = plan.matrix.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Projects a nonnegative matrix onto the coupling set: scale rows down,
/// scale columns down, then add the rank-one correction of the residuals.
fn round_to_marginals<T: Scalar>(mut x: Mat<T>, mu: &[T], nu: &[T]) -> Mat<T> {
    let (m, l) = x.shape();
    let rows = x.row_sums();
    for i in 0..m {
        let f = if rows[i] > T::zero() { (mu[i] / rows[i]).min(T::one()) } else { T::zero() };
        x.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
    let cols = x.col_sums();
    for j in 0..l {
        let f = if cols[j] > T::zero() { (nu[j] / cols[j]).min(T::one()) } else { T::zero() };
        for i in 0..m {
            x[(i, j)] *= f;
        }
    }
    let rows = x.row_sums();
    let cols = x.col_sums();
    let er: Vec<T> = mu.iter().zip(&rows).map(|(&a, &b)| (a - b).max(T::zero())).collect();
    let ec: Vec<T> = nu.iter().zip(&cols).map(|(&a, &b)| (a - b).max(T::zero())).collect();
    let total: T = ec.iter().copied().sum();
    if total > T::zero() {
        for i in 0..m {
            if er[i] == T::zero() {
                continue;
            }
            for j in 0..l {
                x[(i, j)] += er[i] * ec[j] / total;
            }
        }
    }
    x
}

/// Deterministic, transpose-symmetric perturbation of the independent
/// coupling, used when the first step from `mu nu'` makes no progress
/// (for instance when all kernel rows have equal sums).
fn perturbed_product<T: Scalar>(mu: &[T], nu: &[T]) -> Mat<T> {
    let (p1, p2) = (0.754_877_666_2_f64, 0.569_840_291_0_f64);
    let x = Mat::from_fn(mu.len(), nu.len(), |m, l| {
        let (a, b) = (m as f64, l as f64);
        let wiggle = (a * p1 + b * p2 + 1.0).sin() + (b * p1 + a * p2 + 1.0).sin();
        mu[m] * nu[l] * T::lit(1.0 + PERTURBATION * wiggle)
    });
    round_to_marginals(x, mu, nu)
}

/// One KL-proximal step restricted to the supports of `mu` and `nu`.
struct ProxStep<'a, T> {
    prev: &'a Mat<T>,
    cost: &'a Mat<T>,
    mu: &'a [T],
    nu: &'a [T],
    rows: &'a [usize],
    cols: &'a [usize],
    iters: usize,
}

impl<'a, T: Scalar> ProxStep<'a, T> {
    fn log_kernel(&self, gamma: T, i: usize, j: usize) -> T {
        let (m, l) = (self.rows[i], self.cols[j]);
        let t = self.prev[(m, l)];
        if t > T::zero() {
            t.ln() - self.cost[(m, l)] / gamma
        } else {
            T::neg_infinity()
        }
    }

    /// Plain scaling; `None` when the scaling vectors leave the finite range.
    fn scaling(&self, gamma: T, ops: &mut u64) -> Option<Mat<T>> {
        let (r, c) = (self.rows.len(), self.cols.len());
        let shift = self
            .rows
            .iter()
            .flat_map(|&m| self.cols.iter().map(move |&l| (m, l)))
            .map(|(m, l)| self.cost[(m, l)])
            .fold(T::infinity(), T::min);
        let g = Mat::from_fn(r, c, |i, j| {
            self.prev[(self.rows[i], self.cols[j])] * (-(self.cost[(self.rows[i], self.cols[j])] - shift) / gamma).exp()
        });
        let mut u = vec![T::one(); r];
        let mut v = vec![T::one(); c];
        for _ in 0..self.iters {
            for i in 0..r {
                let s: T = g.row(i).iter().zip(&v).map(|(&a, &b)| a * b).sum();
                u[i] = self.mu[self.rows[i]] / s;
            }
            for j in 0..c {
                let s: T = (0..r).map(|i| g[(i, j)] * u[i]).sum();
                v[j] = self.nu[self.cols[j]] / s;
            }
            *ops += 2 * (r * c) as u64;
            if u.iter().chain(&v).any(|x| !x.is_finite() || *x == T::zero()) {
                return None;
            }
            let err = (0..r)
                .map(|i| (u[i] * g.row(i).iter().zip(&v).map(|(&a, &b)| a * b).sum::<T>() - self.mu[self.rows[i]]).abs())
                .fold(T::zero(), T::max);
            *ops += (r * c) as u64;
            if err < T::lit(SINKHORN_STOP) {
                break;
            }
        }
        Some(Mat::from_fn(r, c, |i, j| u[i] * g[(i, j)] * v[j]))
    }

    fn log_scaling(&self, gamma: T, ops: &mut u64) -> Mat<T> {
        let (r, c) = (self.rows.len(), self.cols.len());
        let lk = Mat::from_fn(r, c, |i, j| self.log_kernel(gamma, i, j));
        let log_mu: Vec<T> = self.rows.iter().map(|&m| self.mu[m].ln()).collect();
        let log_nu: Vec<T> = self.cols.iter().map(|&l| self.nu[l].ln()).collect();
        let mut f = vec![T::zero(); r];
        let mut g = vec![T::zero(); c];
        let mut buf = Vec::with_capacity(r.max(c));
        for _ in 0..self.iters {
            for i in 0..r {
                buf.clear();
                buf.extend((0..c).map(|j| lk[(i, j)] + g[j]));
                f[i] = log_mu[i] - log_sum_exp(&buf);
            }
            for j in 0..c {
                buf.clear();
                buf.extend((0..r).map(|i| lk[(i, j)] + f[i]));
                g[j] = log_nu[j] - log_sum_exp(&buf);
            }
            *ops += 2 * (r * c) as u64;
            let err = (0..r)
                .map(|i| {
                    buf.clear();
                    buf.extend((0..c).map(|j| lk[(i, j)] + g[j] + f[i]));
                    (log_sum_exp(&buf).exp() - self.mu[self.rows[i]]).abs()
                })
                .fold(T::zero(), T::max);
            *ops += (r * c) as u64;
            if err < T::lit(SINKHORN_STOP) {
                break;
            }
        }
        Mat::from_fn(r, c, |i, j| (lk[(i, j)] + f[i] + g[j]).exp())
    }

    fn run(&self, gamma: T, force_log: bool, ops: &mut u64) -> (Mat<T>, bool) {
        let (m, l) = self.prev.shape();
        let mut log_domain = force_log;
        let inner = if force_log {
            None
        } else {
            self.scaling(gamma, ops)
        };
        let inner = match inner {
            Some(x) => x,
            None => {
                log_domain = true;
                self.log_scaling(gamma, ops)
            }
        };
        let mut full = Mat::zeros(m, l);
        for (i, &mi) in self.rows.iter().enumerate() {
            for (j, &lj) in self.cols.iter().enumerate() {
                full[(mi, lj)] = inner[(i, j)];
            }
        }
        (round_to_marginals(full, self.mu, self.nu), log_domain)
    }
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
}

/// Proximal-point GW solver.
///
/// Starts from `warm_start` when given, otherwise from a perturbed product
/// coupling. Each outer step that would raise the objective is retried with
/// a doubled proximal weight, so the returned trace never increases.
///
/// The side with fewer points is always treated as the row side, so swapping
/// the arguments yields the transposed plan and the same value.
pub fn solve<T: Scalar>(
    k1: &KernelMatrix<T>,
    k2: &KernelMatrix<T>,
    mu: &[T],
    nu: &[T],
    config: &GwConfig,
    warm_start: Option<&TransportPlan<T>>,
) -> Result<GwResult<T>> {
    if k1.n() <= k2.n() {
        return solve_oriented(k1, k2, mu, nu, config, warm_start);
    }
    let flipped = warm_start.map(|p| p.transpose());
    let res = solve_oriented(k2, k1, nu, mu, config, flipped.as_ref())?;
    Ok(GwResult {
        plan: res.plan.transpose(),
        ..res
    })
}

fn solve_oriented<T: Scalar>(
    k1: &KernelMatrix<T>,
    k2: &KernelMatrix<T>,
    mu: &[T],
    nu: &[T],
    config: &GwConfig,
    warm_start: Option<&TransportPlan<T>>,
) -> Result<GwResult<T>> {
    config.validate()?;
    check_marginal(mu, "row")?;
    check_marginal(nu, "column")?;
    let (m, l) = (k1.n(), k2.n());
    if mu.len() != m || nu.len() != l {
        return Err(Error::Shape(format!(
            "marginal lengths {} and {} do not match kernels of size {m} and {l}",
            mu.len(),
            nu.len()
        )));
    }
    let start = match warm_start {
        Some(p) => {
            if p.matrix.shape() != (m, l) {
                return Err(Error::Shape(format!("warm start is {:?}, expected ({m}, {l})", p.matrix.shape())));
            }
            if p.mu != mu || p.nu != nu {
                return Err(Error::Range("warm start marginals differ from the requested ones".into()));
            }
            p.clone()
        }
        None => TransportPlan::product(mu.to_vec(), nu.to_vec())?,
    };
    let mut cold = warm_start.is_none();
    let rows: Vec<usize> = (0..m).filter(|&i| mu[i] > T::zero()).collect();
    let cols: Vec<usize> = (0..l).filter(|&j| nu[j] > T::zero()).collect();
    let force_log = m * l > LOG_DOMAIN_SIZE;
    let k1m = k1.matrix();
    let k2m = k2.matrix();

    let mut ops = 0u64;
    let mut used_log = false;
    let mut plan = start;
    let mut cost = cost_of(k1m, k2m, &plan, &mut ops);
    let mut value = cost.frobenius_dot(&plan.matrix);
    let mut trace = Vec::with_capacity(config.outer_iters);
    let mut outer = 0;
    for _ in 0..config.outer_iters {
        outer += 1;
        let support_mean = {
            let s: T = rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| cost[(i, j)]).sum();
            s / T::from_usize_lossy(rows.len() * cols.len())
        };
        let mut gamma = match config.proximal_weight {
            Some(g) => T::lit(g),
            None => T::lit(ADAPTIVE_FACTOR) * support_mean.abs(),
        };
        if !(gamma > T::zero()) {
            gamma = T::epsilon().sqrt();
        }
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let step = ProxStep {
                prev: &plan.matrix,
                cost: &cost,
                mu,
                nu,
                rows: &rows,
                cols: &cols,
                iters: config.sinkhorn_iters,
            };
            let (next, log_used) = step.run(gamma, force_log, &mut ops);
            used_log |= log_used;
            if next.as_slice().iter().all(|v| v.is_finite()) {
                let candidate = TransportPlan {
                    matrix: next,
                    mu: mu.to_vec(),
                    nu: nu.to_vec(),
                };
                let next_cost = cost_of(k1m, k2m, &candidate, &mut ops);
                let next_value = next_cost.frobenius_dot(&candidate.matrix);
                ops += (m * l) as u64;
                if next_value <= value {
                    accepted = Some((candidate, next_cost, next_value));
                    break;
                }
            }
            gamma *= T::lit(2.0);
        }
        let previous = value;
        if let Some((p, c, v)) = accepted {
            plan = p;
            cost = c;
            value = v;
        }
        let stalled = (previous - value).abs() < T::lit(config.tolerance);
        if cold && stalled {
            // stuck at the stationary product coupling; restart off it
            cold = false;
            plan.matrix = perturbed_product(mu, nu);
            cost = cost_of(k1m, k2m, &plan, &mut ops);
            value = cost.frobenius_dot(&plan.matrix);
            continue;
        }
        cold = false;
        trace.push(value.max(T::zero()));
        if stalled {
            break;
        }
    }
    if plan.marginal_error() > T::lit(FEASIBILITY_TOL).max(T::epsilon() * T::lit(64.0)) {
        return Err(Error::Numerical(format!(
            "GW plan lost feasibility (marginal error {})",
            plan.marginal_error()
        )));
    }
    Ok(GwResult {
        plan,
        gw_squared: value.max(T::zero()),
        objective_trace: trace,
        outer_iterations: outer,
        arith_ops: ops,
        used_log_domain: used_log,
    })
}
