//! Unnormalized target densities restricted to a constraint domain, and the
//! synthetic Bayesian Lasso problem.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domains::{self, ConstraintDomain};
use crate::error::{Error, Result};

pub const MIXTURE_STD: f64 = 0.2;
pub const MIXTURE_OFFSET: f64 = 1.7;

/// Target selector as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    TruncGauss {},
    BlockMixture {},
    DoubleMoon {},
    Lasso {
        seed: u64,
        #[serde(default = "default_shrinkage")]
        s: f64,
        #[serde(default = "default_q")]
        q: f64,
    },
}

fn default_shrinkage() -> f64 {
    1.0
}

fn default_q() -> f64 {
    1.0
}

impl TargetSpec {
    /// Builds the target on `domain`. Lasso targets construct their own
    /// ℓq-ball and ignore the radius carried by `domain`.
    pub fn build(&self, domain: &domains::DomainSpec) -> Result<TargetDistribution> {
        match self {
            TargetSpec::TruncGauss {} => Ok(truncated_std_gaussian(domain.build()?)),
            TargetSpec::BlockMixture {} => {
                if !matches!(domain, domains::DomainSpec::Block {}) {
                    return Err(Error::Config("block_mixture target requires the block domain".into()));
                }
                Ok(block_gaussian_mixture())
            }
            TargetSpec::DoubleMoon {} => {
                if !matches!(domain, domains::DomainSpec::DoubleMoon {}) {
                    return Err(Error::Config("double_moon target requires the double_moon domain".into()));
                }
                Ok(double_moon_target())
            }
            TargetSpec::Lasso { seed, s, q } => {
                if let domains::DomainSpec::LqBall { q: dq, dim, .. } = domain {
                    if dq != q {
                        return Err(Error::Config(format!("lasso q={q} disagrees with lq_ball q={dq}")));
                    }
                    if *dim != LASSO_DIM {
                        return Err(Error::Config(format!("lasso requires lq_ball dim {LASSO_DIM}, got {dim}")));
                    }
                } else {
                    return Err(Error::Config("lasso target requires the lq_ball domain".into()));
                }
                let problem = LassoOptions { seed: *seed, shrinkage: *s, q: *q, ..Default::default() }.build()?;
                lasso_posterior(&problem)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Density {
    StdGaussian,
    Mixture { centers: Vec<[f64; 2]>, std: f64 },
    DoubleMoon,
    /// `N(mean, precision⁻¹)`; `cov_chol` is the lower Cholesky factor of the covariance.
    Gaussian { mean: DVector<f64>, precision: DMatrix<f64>, cov_chol: DMatrix<f64> },
}

/// How to draw from the untruncated base density (the rejection proposal).
#[derive(Debug, Clone)]
pub enum BaseSampler<'a> {
    Gaussian { mean: &'a [f64], cov_chol: Option<&'a DMatrix<f64>> },
    Mixture { centers: &'a [[f64; 2]], std: f64 },
    /// Uniform proposal on a box with an upper bound on the unnormalized density.
    Envelope { low: Vec<f64>, high: Vec<f64>, log_bound: f64 },
}

/// An unnormalized density on a constraint domain.
#[derive(Debug, Clone)]
pub struct TargetDistribution {
    name: &'static str,
    domain: ConstraintDomain,
    density: Density,
    zero_mean: Vec<f64>,
}

/// `p*(x) ∝ N(0, I)` restricted to `domain`.
pub fn truncated_std_gaussian(domain: ConstraintDomain) -> TargetDistribution {
    let d = domain.dim();
    TargetDistribution { name: "trunc_gauss", domain, density: Density::StdGaussian, zero_mean: vec![0.0; d] }
}

/// Nine equal-weight isotropic components (std 0.2) on the grid `{−1.7, 0, 1.7}²`,
/// restricted to the block.
pub fn block_gaussian_mixture() -> TargetDistribution {
    let offsets = [-MIXTURE_OFFSET, 0.0, MIXTURE_OFFSET];
    let centers = offsets.iter().flat_map(|&a| offsets.iter().map(move |&b| [a, b])).collect();
    TargetDistribution {
        name: "block_mixture",
        domain: domains::make_block(),
        density: Density::Mixture { centers, std: MIXTURE_STD },
        zero_mean: vec![0.0; 2],
    }
}

/// `p*(x) ∝ q(x)` on the double-moon domain.
pub fn double_moon_target() -> TargetDistribution {
    TargetDistribution {
        name: "double_moon",
        domain: domains::make_double_moon(),
        density: Density::DoubleMoon,
        zero_mean: vec![0.0; 2],
    }
}

impl TargetDistribution {
    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &ConstraintDomain {
        &self.domain
    }

    pub fn log_density_unnorm(&self, x: &[f64]) -> f64 {
        match &self.density {
            Density::StdGaussian => -0.5 * domains::sq_norm(x),
            Density::Mixture { centers, std } => {
                let inv = 1.0 / (2.0 * std * std);
                let logs: Vec<f64> = centers
                    .iter()
                    .map(|c| -((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) * inv)
                    .collect();
                log_sum_exp(&logs)
            }
            Density::DoubleMoon => domains::moon_log_q(x),
            Density::Gaussian { mean, precision, .. } => {
                let diff = DVector::from_column_slice(x) - mean;
                -0.5 * diff.dot(&(precision * &diff))
            }
        }
    }

    /// `∇ log p*`, the smooth extension of the interior score.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        match &self.density {
            Density::StdGaussian => x.iter().map(|v| -v).collect(),
            Density::Mixture { centers, std } => {
                let var = std * std;
                let logs: Vec<f64> = centers
                    .iter()
                    .map(|c| -((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (2.0 * var))
                    .collect();
                let lse = log_sum_exp(&logs);
                let mut out = [0.0; 2];
                for (c, l) in centers.iter().zip(&logs) {
                    let w = (l - lse).exp();
                    out[0] += w * (c[0] - x[0]) / var;
                    out[1] += w * (c[1] - x[1]) / var;
                }
                out.to_vec()
            }
            Density::DoubleMoon => {
                let rho = domains::norm(x).max(1e-8);
                let radial = -4.0 * (rho - 3.0) / rho;
                let (_, dlse, _) = domains::moon_lse_derivs(x[0]);
                let mut out: Vec<f64> = x.iter().map(|v| radial * v).collect();
                out[0] += dlse;
                out
            }
            Density::Gaussian { mean, precision, .. } => {
                let diff = DVector::from_column_slice(x) - mean;
                (-(precision * diff)).as_slice().to_vec()
            }
        }
    }

    /// Center of the untruncated base density: the Gaussian mean for
    /// Gaussian targets, the origin otherwise.
    pub fn center(&self) -> Vec<f64> {
        match &self.density {
            Density::Gaussian { mean, .. } => mean.as_slice().to_vec(),
            _ => self.zero_mean.clone(),
        }
    }

    pub fn base_sampler(&self) -> BaseSampler<'_> {
        match &self.density {
            Density::StdGaussian => BaseSampler::Gaussian { mean: &self.zero_mean, cov_chol: None },
            Density::Mixture { centers, std } => BaseSampler::Mixture { centers, std: *std },
            // q ≤ 1 + e^{-72} everywhere and Ω ⊂ {2 ≤ ‖x‖ ≤ 4}.
            Density::DoubleMoon => BaseSampler::Envelope {
                low: vec![-4.0, -4.0],
                high: vec![4.0, 4.0],
                log_bound: (-72.0_f64).exp().ln_1p(),
            },
            Density::Gaussian { mean, cov_chol, .. } => {
                BaseSampler::Gaussian { mean: mean.as_slice(), cov_chol: Some(cov_chol) }
            }
        }
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub const LASSO_DIM: usize = 20;
pub const LASSO_OBS: usize = 1000;
pub const LASSO_NOISE_VAR: f64 = 25.0;

/// Synthetic Bayesian Lasso regression problem with an ℓq-ball constraint.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma2: f64,
    /// `(XᵀX + I)⁻¹ Xᵀ y`.
    pub beta_star: DVector<f64>,
    /// `(XᵀX + I) / σ²`.
    pub precision: DMatrix<f64>,
    pub beta_ols: DVector<f64>,
    pub q: f64,
    pub r: f64,
}

/// Generator options for [`make_synthetic_lasso`].
#[derive(Debug, Clone)]
pub struct LassoOptions {
    pub seed: u64,
    /// Radius multiplier: `r = s · ‖β̂_OLS‖₁`.
    pub shrinkage: f64,
    pub q: f64,
    /// Drop the observation noise (test hook).
    pub noiseless: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { seed: 0, shrinkage: 1.0, q: 1.0, noiseless: false }
    }
}

/// `X ∈ ℝ^{1000×20}` with i.i.d. `N(0,1)` entries, `y = Xβ_true + ε`,
/// `ε ~ N(0, 25 I)`, `β_true = (10,…,10,0,…,0)`.
pub fn make_synthetic_lasso(seed: u64) -> Result<LassoProblem> {
    LassoOptions { seed, ..Default::default() }.build()
}

impl LassoOptions {
    pub fn build(&self) -> Result<LassoProblem> {
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::InvalidParameter(format!("shrinkage must be in (0, 1], got {}", self.shrinkage)));
        }
        if !(self.q >= 1.0) {
            return Err(Error::InvalidParameter(format!("q must be >= 1, got {}", self.q)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, d) = (LASSO_OBS, LASSO_DIM);
        // Row-major draw order so the stream does not depend on storage layout.
        let mut data = vec![0.0; n * d];
        for v in data.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let x = DMatrix::from_row_slice(n, d, &data);
        let beta_true = DVector::from_fn(d, |i, _| if i < d / 2 { 10.0 } else { 0.0 });
        let noise_sd = LASSO_NOISE_VAR.sqrt();
        let mut y = &x * &beta_true;
        if !self.noiseless {
            for v in y.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += noise_sd * e;
            }
        }
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &y;
        let beta_ols = xtx
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Degenerate("design matrix is rank deficient".into()))?
            .solve(&xty);
        let a = xtx + DMatrix::identity(d, d);
        let chol = a.clone().cholesky().ok_or_else(|| Error::Degenerate("XᵀX + I not positive definite".into()))?;
        let beta_star = chol.solve(&xty);
        let r = self.shrinkage * beta_ols.iter().map(|v| v.abs()).sum::<f64>();
        Ok(LassoProblem {
            x,
            y,
            sigma2: LASSO_NOISE_VAR,
            beta_star,
            precision: a / LASSO_NOISE_VAR,
            beta_ols,
            q: self.q,
            r,
        })
    }
}

/// Truncated Gaussian posterior `N(β*, σ²(XᵀX+I)⁻¹)·1(‖β‖_q ≤ r)`.
pub fn lasso_posterior(problem: &LassoProblem) -> Result<TargetDistribution> {
    let d = problem.beta_star.len();
    let domain = domains::make_lq_ball(problem.q, problem.r, d)?;
    let cov = problem
        .precision
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("posterior precision is singular".into()))?;
    let cov_chol = cov
        .cholesky()
        .ok_or_else(|| Error::Degenerate("posterior covariance not positive definite".into()))?
        .l();
    Ok(TargetDistribution {
        name: "lasso",
        domain,
        density: Density::Gaussian {
            mean: problem.beta_star.clone(),
            precision: problem.precision.clone(),
            cov_chol,
        },
        zero_mean: vec![0.0; d],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{make_block, make_ring};
    use crate::oracle::finite_diff;
    use rand::Rng;

    fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / domains::norm(b).max(1e-8)
    }

    fn check_score_fd(t: &TargetDistribution, points: &[Vec<f64>], tol: f64) {
        for x in points {
            let fd = finite_diff::gradient(|p| t.log_density_unnorm(p), x, 1e-5);
            let an = t.score(x);
            assert!(vec_rel_err(&an, &fd) < tol, "{} at {x:?}: {an:?} vs {fd:?}", t.name());
        }
    }

    fn interior_points(t: &TargetDistribution, n: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let x: Vec<f64> = (0..t.dim()).map(|_| rng.random_range(-scale..scale)).collect();
            if t.domain().g(&x) < 0.0 && domains::norm(&x) > 1e-3 {
                out.push(x);
            }
        }
        out
    }

    #[test]
    fn std_gaussian_examples() {
        let t = truncated_std_gaussian(make_ring());
        assert_eq!(t.score(&[1.0, 2.0]), vec![-1.0, -2.0]);
        assert_eq!(t.score(&[0.0, 0.0]), vec![0.0, 0.0]);
        let diff = t.log_density_unnorm(&[1.0, 0.0]) - t.log_density_unnorm(&[0.0, 0.0]);
        assert!((diff + 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixture_examples() {
        let t = block_gaussian_mixture();
        let s0 = t.score(&[0.0, 0.0]);
        assert!(s0[0].abs() < 1e-12 && s0[1].abs() < 1e-12);
        let s = t.score(&[1.7, 1.7]);
        assert!(s[0] <= 0.0 && s[1] <= 0.0);
        let fd = finite_diff::gradient(|p| t.log_density_unnorm(p), &[0.3, -0.9], 1e-5);
        assert!(vec_rel_err(&t.score(&[0.3, -0.9]), &fd) < 1e-4);
    }

    #[test]
    fn mixture_log_density_is_finite_far_away() {
        let t = block_gaussian_mixture();
        for x in [[1e3, -1e3], [50.0, 0.0], [-1e6, 1e6]] {
            let l = t.log_density_unnorm(&x);
            assert!(l.is_finite(), "{x:?} -> {l}");
            assert!(t.score(&x).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn double_moon_examples() {
        let t = double_moon_target();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let a = t.score(&x);
            let b = t.score(&[-x[0], -x[1]]);
            assert!((a[0] + b[0]).abs() < 1e-9 && (a[1] + b[1]).abs() < 1e-9);
        }
        assert!(t.log_density_unnorm(&[3.0, 0.0]).abs() < 1e-30);
        let fd = finite_diff::gradient(|p| t.log_density_unnorm(p), &[2.5, 0.5], 1e-5);
        assert!(vec_rel_err(&t.score(&[2.5, 0.5]), &fd) < 1e-4);
    }

    #[test]
    fn toy_scores_match_finite_differences() {
        let targets = [
            truncated_std_gaussian(make_ring()),
            truncated_std_gaussian(domains::make_cardioid()),
            double_moon_target(),
            block_gaussian_mixture(),
        ];
        for (i, t) in targets.iter().enumerate() {
            let pts = interior_points(t, 500, 4.5, 100 + i as u64);
            check_score_fd(t, &pts, 1e-4);
        }
    }

    #[test]
    fn lasso_shapes_and_solution() {
        let p = make_synthetic_lasso(0).unwrap();
        assert_eq!((p.x.nrows(), p.x.ncols()), (1000, 20));
        assert_eq!(p.y.len(), 1000);
        let a = p.x.transpose() * &p.x + DMatrix::<f64>::identity(20, 20);
        let resid = &a * &p.beta_star - p.x.transpose() * &p.y;
        assert!(resid.norm() < 1e-8, "residual {}", resid.norm());
        assert!((p.r - p.beta_ols.iter().map(|v| v.abs()).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn noiseless_ols_recovers_truth() {
        let p = LassoOptions { seed: 3, noiseless: true, ..Default::default() }.build().unwrap();
        for (i, b) in p.beta_ols.iter().enumerate() {
            let truth = if i < 10 { 10.0 } else { 0.0 };
            assert!((b - truth).abs() < 1e-6);
        }
    }

    #[test]
    fn lasso_is_deterministic_and_shrinks() {
        let a = make_synthetic_lasso(5).unwrap();
        let b = make_synthetic_lasso(5).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        let half = LassoOptions { seed: 5, shrinkage: 0.5, ..Default::default() }.build().unwrap();
        assert!((half.r - 0.5 * a.r).abs() < 1e-12);
        assert!(LassoOptions { shrinkage: 1.5, ..Default::default() }.build().is_err());
    }

    #[test]
    fn lasso_posterior_score() {
        let p = make_synthetic_lasso(1).unwrap();
        let t = lasso_posterior(&p).unwrap();
        let bs = p.beta_star.as_slice().to_vec();
        assert!(t.score(&bs).iter().all(|v| v.abs() < 1e-9));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<f64> = (0..20).map(|_| rng.random_range(-0.3..0.3)).collect();
        let p1: Vec<f64> = bs.iter().zip(&u).map(|(b, u)| b + u).collect();
        let p2: Vec<f64> = bs.iter().zip(&u).map(|(b, u)| b + 2.0 * u).collect();
        let (s1, s2) = (t.score(&p1), t.score(&p2));
        for (a, b) in s1.iter().zip(&s2) {
            assert!((2.0 * a - b).abs() < 1e-8 * b.abs().max(1.0));
        }
        let fd = finite_diff::gradient(|x| t.log_density_unnorm(x), &p1, 1e-5);
        assert!(vec_rel_err(&t.score(&p1), &fd) < 1e-6);
        assert_eq!(t.domain().lq_params(), Some((1.0, p.r)));
    }

    #[test]
    fn spec_consistency_checks() {
        let lasso = TargetSpec::Lasso { seed: 0, s: 1.0, q: 1.0 };
        assert!(lasso.build(&domains::DomainSpec::Ring {}).is_err());
        let dom = domains::DomainSpec::LqBall { q: 1.2, r: None, dim: 20 };
        assert!(lasso.build(&dom).is_err());
        let dom = domains::DomainSpec::LqBall { q: 1.0, r: None, dim: 20 };
        assert!(lasso.build(&dom).is_ok());
        assert!(TargetSpec::BlockMixture {}.build(&domains::DomainSpec::Ring {}).is_err());
        assert_eq!(TargetSpec::TruncGauss {}.build(&domains::DomainSpec::Block {}).unwrap().domain(), &make_block());
    }
}
