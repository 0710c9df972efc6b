//! Sample-quality metrics: energy distance, entropic Wasserstein-2 and the
//! fraction of particles outside the domain.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::ConstraintDomain;
use crate::error::{Error, Result};
use crate::targets::log_sum_exp;

fn check_pair(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::InvalidParameter("sample sets must be nonempty".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: y.ncols() });
    }
    Ok(())
}

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Mean of `‖xᵢ − yⱼ‖` over all pairs.
fn mean_cross_distance(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let total: f64 = (0..x.nrows())
        .into_par_iter()
        .map(|i| y.rows().into_iter().map(|b| dist(x.row(i), b)).sum::<f64>())
        .sum();
    total / (x.nrows() as f64 * y.nrows() as f64)
}

/// Mean of `‖xᵢ − xⱼ‖` over all ordered pairs, diagonal included; each
/// unordered pair is computed once.
fn mean_self_distance(x: ArrayView2<f64>) -> f64 {
    let n = x.nrows();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| dist(x.row(i), x.row(j))).sum::<f64>())
        .sum();
    2.0 * total / (n as f64 * n as f64)
}

/// V-statistic `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` over all pairs.
pub fn energy_distance(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_pair(x, y)?;
    Ok(2.0 * mean_cross_distance(x, y) - mean_self_distance(x) - mean_self_distance(y))
}

/// Settings for [`sinkhorn_w2`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornOptions {
    /// `ε` as a fraction of the mean pairwise squared distance.
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Target L1 violation of the row marginal.
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { eps_rel: 0.01, max_iter: 1000, tol: 1e-6 }
    }
}

/// Value and convergence diagnostics of a Sinkhorn solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SinkhornOutcome {
    /// `√⟨P, C⟩`.
    pub value: f64,
    pub converged: bool,
    /// L1 violation of the row marginal at exit.
    pub violation: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

fn sq_cost(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let m = y.nrows();
    let flat: Vec<f64> = (0..x.nrows() * m)
        .into_par_iter()
        .map(|k| x.row(k / m).iter().zip(y.row(k % m).iter()).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect();
    Array2::from_shape_vec((x.nrows(), m), flat).expect("shape matches")
}

/// Potentials `f`, `g` with plan `P_ij = exp((f_i + g_j − C_ij)/ε)`.
struct Potentials {
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Potentials {
    /// Exact row update: `f_i = ε ln a − ε LSE_j((g_j − C_ij)/ε)`, so rows sum to `a`.
    fn fit_rows(&mut self, cost: &Array2<f64>, eps: f64) {
        let log_a = -(cost.nrows() as f64).ln();
        let g = &self.g;
        self.f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            let terms: Vec<f64> = cost.row(i).iter().zip(g).map(|(c, gj)| (gj - c) / eps).collect();
            *fi = eps * (log_a - log_sum_exp(&terms));
        });
    }

    fn fit_cols(&mut self, cost: &Array2<f64>, eps: f64) {
        let log_b = -(cost.ncols() as f64).ln();
        let f = &self.f;
        self.g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            let terms: Vec<f64> = cost.column(j).iter().zip(f).map(|(c, fi)| (fi - c) / eps).collect();
            *gj = eps * (log_b - log_sum_exp(&terms));
        });
    }

    fn kernel(&self, cost: &Array2<f64>, eps: f64) -> Array2<f64> {
        let mut k = cost.clone();
        k.axis_iter_mut(Axis(0)).into_par_iter().zip(self.f.par_iter()).for_each(|(mut row, fi)| {
            for (kij, gj) in row.iter_mut().zip(&self.g) {
                *kij = ((fi + gj - *kij) / eps).exp();
            }
        });
        k
    }
}

/// Row-marginal L1 violation of `diag(u) K diag(v)`.
fn row_violation(k: &Array2<f64>, u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let a = 1.0 / k.nrows() as f64;
    (k.dot(v) * u).iter().map(|r| (r - a).abs()).sum()
}

/// Scaling iterations at fixed `ε` with potentials absorbed whenever the
/// scalings drift far from 1. Returns (violation, iterations).
fn sinkhorn_stage(cost: &Array2<f64>, pot: &mut Potentials, eps: f64, max_iter: usize, tol: f64) -> (f64, usize) {
    const ABSORB_AT: f64 = 1e50;
    let (n, m) = cost.dim();
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    pot.fit_rows(cost, eps);
    pot.fit_cols(cost, eps);
    let mut k = pot.kernel(cost, eps);
    let mut kt = k.t().as_standard_layout().into_owned();
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);
    let absorb = |pot: &mut Potentials, u: &mut Array1<f64>, v: &mut Array1<f64>| {
        for (fi, ui) in pot.f.iter_mut().zip(u.iter()) {
            *fi += eps * ui.ln();
        }
        for (gj, vj) in pot.g.iter_mut().zip(v.iter()) {
            *gj += eps * vj.ln();
        }
        u.fill(1.0);
        v.fill(1.0);
    };
    let mut violation = f64::INFINITY;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let new_u = (k.dot(&v)).mapv(|s| a / s);
        let new_v = (kt.dot(&new_u)).mapv(|s| b / s);
        let finite = new_u.iter().chain(new_v.iter()).all(|s| s.is_finite() && *s > 0.0);
        if !finite {
            // underflow in the kernel: restart from exact log-domain updates
            absorb(pot, &mut u, &mut v);
            pot.fit_rows(cost, eps);
            pot.fit_cols(cost, eps);
            k = pot.kernel(cost, eps);
            kt = k.t().as_standard_layout().into_owned();
            continue;
        }
        u = new_u;
        v = new_v;
        if u.iter().chain(v.iter()).any(|s| *s > ABSORB_AT || *s < 1.0 / ABSORB_AT) {
            absorb(pot, &mut u, &mut v);
            k = pot.kernel(cost, eps);
            kt = k.t().as_standard_layout().into_owned();
        }
        if it % 10 == 0 || it == max_iter {
            violation = row_violation(&k, &u, &v);
            if violation < tol {
                break;
            }
        }
    }
    absorb(pot, &mut u, &mut v);
    (violation, it)
}

/// Iterations spent at each intermediate `ε` of the annealing schedule.
const ANNEAL_ITERS: usize = 50;

/// Entropic optimal transport between uniform clouds with squared Euclidean
/// cost. Potentials are annealed from `ε = mean cost` down to the target by
/// halving, then refined at the target until the row-marginal violation is
/// below `tol` or `max_iter` iterations. Non-convergence is reported in the
/// outcome rather than as an error.
pub fn sinkhorn_w2(x: ArrayView2<f64>, y: ArrayView2<f64>, opts: &SinkhornOptions) -> Result<SinkhornOutcome> {
    check_pair(x, y)?;
    if !(opts.eps_rel > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter("eps_rel and tol must be positive".into()));
    }
    let (n, m) = (x.nrows(), y.nrows());
    let cost = sq_cost(x, y);
    let mean_cost = cost.sum() / (n * m) as f64;
    if mean_cost == 0.0 {
        return Ok(SinkhornOutcome { value: 0.0, converged: true, violation: 0.0, epsilon: 0.0, iterations: 0 });
    }
    let eps = opts.eps_rel * mean_cost;
    let mut pot = Potentials { f: vec![0.0; n], g: vec![0.0; m] };
    let mut stage_eps = mean_cost;
    while stage_eps > 2.0 * eps {
        sinkhorn_stage(&cost, &mut pot, stage_eps, ANNEAL_ITERS, opts.tol);
        stage_eps *= 0.5;
    }
    let (violation, iterations) = sinkhorn_stage(&cost, &mut pot, eps, opts.max_iter.max(1), opts.tol);
    let transport: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = pot.f[i];
            cost.row(i).iter().zip(&pot.g).map(|(c, gj)| ((fi + gj - c) / eps).exp() * c).sum::<f64>()
        })
        .sum();
    Ok(SinkhornOutcome {
        value: transport.max(0.0).sqrt(),
        converged: violation < opts.tol,
        violation,
        epsilon: eps,
        iterations,
    })
}

/// Largest instance accepted by [`exact_w2_small`].
pub const EXACT_W2_MAX: usize = 64;

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, `O(n³)`). Returns `assignment[row] = column`.
fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Exact W2 between equal-size uniform clouds via optimal assignment.
pub fn exact_w2_small(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_pair(x, y)?;
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.nrows() });
    }
    if x.nrows() > EXACT_W2_MAX {
        return Err(Error::InvalidParameter(format!("exact W2 supports at most {EXACT_W2_MAX} points, got {}", x.nrows())));
    }
    let cost = sq_cost(x, y);
    let assignment = hungarian(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((total / x.nrows() as f64).sqrt())
}

/// Fraction of rows with `g > 0`.
pub fn ratio_out(domain: &ConstraintDomain, positions: ArrayView2<f64>) -> f64 {
    if positions.nrows() == 0 {
        return 0.0;
    }
    let out = positions.rows().into_iter().filter(|r| domain.g(&r.to_vec()) > 0.0).count();
    out as f64 / positions.nrows() as f64
}

/// `n` rows of `x` chosen without replacement, in original order.
pub fn subsample(x: ArrayView2<f64>, n: usize, seed: u64) -> Array2<f64> {
    if n >= x.nrows() {
        return x.to_owned();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, x.nrows(), n).into_vec();
    idx.sort_unstable();
    x.select(Axis(0), &idx)
}

/// Metrics of a particle set against a reference sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub w2_sinkhorn: f64,
    pub energy: f64,
    pub ratio_out: f64,
    /// Points per cloud in the Sinkhorn solve.
    pub n_samples: usize,
    pub eps_rel: f64,
    pub sinkhorn_converged: bool,
}

/// A reference sample with its within-set energy term cached.
#[derive(Debug, Clone)]
pub struct MetricReference {
    truth: Array2<f64>,
    truth_self_term: f64,
    sinkhorn: SinkhornOptions,
    seed: u64,
}

impl MetricReference {
    pub fn new(truth: Array2<f64>, sinkhorn: SinkhornOptions, seed: u64) -> Result<Self> {
        if truth.nrows() == 0 {
            return Err(Error::InvalidParameter("reference sample is empty".into()));
        }
        let truth_self_term = mean_self_distance(truth.view());
        Ok(Self { truth, truth_self_term, sinkhorn, seed })
    }

    pub fn truth(&self) -> ArrayView2<'_, f64> {
        self.truth.view()
    }

    pub fn energy(&self, x: ArrayView2<f64>) -> Result<f64> {
        check_pair(x, self.truth.view())?;
        Ok(2.0 * mean_cross_distance(x, self.truth.view()) - mean_self_distance(x) - self.truth_self_term)
    }

    /// Sinkhorn W2 after subsampling the larger cloud to the smaller size.
    pub fn sinkhorn(&self, x: ArrayView2<f64>) -> Result<SinkhornOutcome> {
        let n = x.nrows().min(self.truth.nrows());
        let xs = subsample(x, n, crate::rng::derive_seed(self.seed, &[1]));
        let ys = subsample(self.truth.view(), n, crate::rng::derive_seed(self.seed, &[2]));
        sinkhorn_w2(xs.view(), ys.view(), &self.sinkhorn)
    }

    pub fn report(&self, domain: &ConstraintDomain, x: ArrayView2<f64>) -> Result<MetricReport> {
        let sk = self.sinkhorn(x)?;
        Ok(MetricReport {
            w2_sinkhorn: sk.value,
            energy: self.energy(x)?,
            ratio_out: ratio_out(domain, x),
            n_samples: x.nrows().min(self.truth.nrows()),
            eps_rel: self.sinkhorn.eps_rel,
            sinkhorn_converged: sk.converged,
        })
    }
}
