//! Reference computations: finite differences, rejection sampling, boundary
//! integrals by quadrature, and the Monte Carlo study of the band estimator.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::domains::{adaptive_bandwidth, ConstraintDomain};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::targets::{BaseSampler, TargetDistribution};

/// Central finite differences.
pub mod finite_diff {
    /// `∂f/∂xᵢ` by central differences.
    pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                xp[i] = x[i] + step;
                let up = f(&xp);
                xp[i] = x[i] - step;
                let down = f(&xp);
                xp[i] = x[i];
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    /// Jacobian with rows indexed by outputs.
    pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> Vec<Vec<f64>> {
        let mut xp = x.to_vec();
        let cols: Vec<Vec<f64>> = (0..x.len())
            .map(|i| {
                xp[i] = x[i] + step;
                let up = f(&xp);
                xp[i] = x[i] - step;
                let down = f(&xp);
                xp[i] = x[i];
                up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * step)).collect()
            })
            .collect();
        let m = cols.first().map_or(0, Vec::len);
        (0..m).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
    }

    /// Trace of the finite-difference Jacobian.
    pub fn divergence(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> f64 {
        jacobian(f, x, step).iter().enumerate().map(|(i, row)| row[i]).sum()
    }
}

const REJECTION_CHECK_EVERY: u64 = 10_000_000;
const REJECTION_MIN_RATE: f64 = 1e-6;

/// Counters from a rejection sampling run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionStats {
    pub accepted: usize,
    pub drawn: u64,
}

impl RejectionStats {
    pub fn rate(&self) -> f64 {
        self.accepted as f64 / self.drawn.max(1) as f64
    }
}

fn draw_base(base: &BaseSampler<'_>, dim: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    match base {
        BaseSampler::Gaussian { mean, cov_chol } => {
            let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            match cov_chol {
                Some(l) => {
                    for i in 0..dim {
                        out[i] = mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
                    }
                }
                None => {
                    for i in 0..dim {
                        out[i] = mean[i] + z[i];
                    }
                }
            }
        }
        BaseSampler::Mixture { centers, std } => {
            let c = centers[rng.random_range(0..centers.len())];
            for i in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                out[i] = c[i] + std * z;
            }
        }
        BaseSampler::Envelope { low, high, .. } => {
            for i in 0..dim {
                out[i] = rng.random_range(low[i]..high[i]);
            }
        }
    }
}

/// `n` exact draws from `target` by rejection from its base density.
///
/// Fails with [`Error::RejectionStalled`] if, after any multiple of 10⁷ draws,
/// the acceptance rate is below 10⁻⁶.
pub fn rejection_sample_with_stats(target: &TargetDistribution, n: usize, seed: u64) -> Result<(Array2<f64>, RejectionStats)> {
    let dim = target.dim();
    let domain = target.domain();
    let base = target.base_sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, dim));
    let mut x = vec![0.0; dim];
    let mut stats = RejectionStats { accepted: 0, drawn: 0 };
    while stats.accepted < n {
        draw_base(&base, dim, &mut rng, &mut x);
        stats.drawn += 1;
        let mut accept = domain.g(&x) <= 0.0;
        if let BaseSampler::Envelope { log_bound, .. } = &base {
            let u: f64 = rng.random();
            accept = accept && u.ln() < target.log_density_unnorm(&x) - log_bound;
        }
        if accept {
            out.row_mut(stats.accepted).assign(&ndarray::ArrayView1::from(&x));
            stats.accepted += 1;
        }
        if stats.drawn.is_multiple_of(REJECTION_CHECK_EVERY) && stats.rate() < REJECTION_MIN_RATE {
            return Err(Error::RejectionStalled { accepted: stats.accepted, drawn: stats.drawn });
        }
    }
    Ok((out, stats))
}

pub fn rejection_sample(target: &TargetDistribution, n: usize, seed: u64) -> Result<Array2<f64>> {
    rejection_sample_with_stats(target, n, seed).map(|(x, _)| x)
}

/// Densities on the block `[−2, 2]²` for the boundary-estimator study. Each
/// is normalized over the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestDensity {
    /// Uniform on the block.
    Uniform,
    /// `N(0, I)` truncated to the block.
    Gaussian,
    /// `N((0, −2), I)` truncated to the block.
    ShiftedGaussian,
}

impl TestDensity {
    pub const ALL: [TestDensity; 3] = [TestDensity::Uniform, TestDensity::Gaussian, TestDensity::ShiftedGaussian];

    pub fn label(self) -> &'static str {
        match self {
            TestDensity::Uniform => "p1",
            TestDensity::Gaussian => "p2",
            TestDensity::ShiftedGaussian => "p3",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.label() == s)
    }

    fn mean(self) -> Option<[f64; 2]> {
        match self {
            TestDensity::Uniform => None,
            TestDensity::Gaussian => Some([0.0, 0.0]),
            TestDensity::ShiftedGaussian => Some([0.0, -2.0]),
        }
    }

    pub fn unnormalized(self, x: &[f64]) -> f64 {
        match self.mean() {
            None => 1.0,
            Some(m) => (-0.5 * ((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2))).exp(),
        }
    }

    /// One draw from the density on the block.
    pub fn sample(self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        match self.mean() {
            None => [rng.random_range(-BLOCK_HALF..BLOCK_HALF), rng.random_range(-BLOCK_HALF..BLOCK_HALF)],
            Some(m) => loop {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let x = [m[0] + a, m[1] + b];
                if x[0].abs() <= BLOCK_HALF && x[1].abs() <= BLOCK_HALF {
                    return x;
                }
            },
        }
    }
}

/// Velocity fields for the boundary-estimator study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestVelocity {
    /// The outward unit normal of the domain.
    Normal,
    /// `(x₂, x₁)`.
    Swap,
    /// `(x₂², x₁²)`.
    SwapSquared,
}

impl TestVelocity {
    pub const ALL: [TestVelocity; 3] = [TestVelocity::Normal, TestVelocity::Swap, TestVelocity::SwapSquared];

    pub fn label(self) -> &'static str {
        match self {
            TestVelocity::Normal => "v1",
            TestVelocity::Swap => "v2",
            TestVelocity::SwapSquared => "v3",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    pub fn eval(self, domain: &ConstraintDomain, x: &[f64]) -> Vec<f64> {
        match self {
            TestVelocity::Normal => domain.unit_normal(x).unwrap_or_else(|| vec![0.0; x.len()]),
            TestVelocity::Swap => vec![x[1], x[0]],
            TestVelocity::SwapSquared => vec![x[1] * x[1], x[0] * x[0]],
        }
    }
}

const BLOCK_HALF: f64 = 2.0;
/// Offset from the corners so a face's one-sided limits are used there.
const CORNER_OFFSET: f64 = 1e-9;

fn require_block(domain: &ConstraintDomain) -> Result<()> {
    if domain.name() == "block" {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("boundary quadrature is implemented for the block, not {}", domain.name())))
    }
}

/// `∫_∂Ω p vᵀn dS / ∫_Ω p dx` on the block by the trapezoid rule with
/// `resolution` segments per face and a `resolution²` interior grid.
pub fn boundary_quadrature(
    domain: &ConstraintDomain,
    density: impl Fn(&[f64]) -> f64,
    velocity: impl Fn(&[f64]) -> Vec<f64>,
    resolution: usize,
) -> Result<f64> {
    require_block(domain)?;
    if resolution < 2 {
        return Err(Error::InvalidParameter(format!("resolution must be at least 2, got {resolution}")));
    }
    let step = 2.0 * BLOCK_HALF / resolution as f64;
    let weight = |k: usize| if k == 0 || k == resolution { 0.5 } else { 1.0 };
    let node = |k: usize| -BLOCK_HALF + k as f64 * step;

    // (axis, sign): the face {x_axis = sign·2} with normal sign·e_axis
    let faces = [(0usize, 1.0f64), (0, -1.0), (1, 1.0), (1, -1.0)];
    let mut flux = 0.0;
    for &(axis, sign) in &faces {
        let mut face = 0.0;
        for k in 0..=resolution {
            let t = node(k).clamp(-BLOCK_HALF + CORNER_OFFSET, BLOCK_HALF - CORNER_OFFSET);
            let mut x = [0.0; 2];
            x[axis] = sign * BLOCK_HALF;
            x[1 - axis] = t;
            face += weight(k) * density(&x) * sign * velocity(&x)[axis];
        }
        flux += face * step;
    }

    let mut mass = 0.0;
    for i in 0..=resolution {
        let wi = weight(i);
        for j in 0..=resolution {
            mass += wi * weight(j) * density(&[node(i), node(j)]);
        }
    }
    mass *= step * step;
    if !(mass > 0.0) {
        return Err(Error::Degenerate("density has zero mass on the domain".into()));
    }
    Ok(flux / mass)
}

/// Convenience wrapper over [`boundary_quadrature`] for the study densities.
pub fn boundary_quadrature_for(domain: &ConstraintDomain, density: TestDensity, velocity: TestVelocity, resolution: usize) -> Result<f64> {
    boundary_quadrature(domain, |x| density.unnormalized(x), |x| velocity.eval(domain, x), resolution)
}

/// Band estimate `1/(m·h) Σ_band vᵀ∇g/‖∇g‖` from the sample `points`.
pub fn boundary_mc_estimate(
    domain: &ConstraintDomain,
    points: &[[f64; 2]],
    velocity: impl Fn(&[f64]) -> Vec<f64>,
    h: f64,
) -> Result<f64> {
    let mut m = 0usize;
    let mut total = 0.0;
    for x in points {
        if domain.g(x) <= 0.0 {
            m += 1;
        }
        if domain.in_band(x, h) {
            if let Some(n) = domain.unit_normal(x) {
                total += velocity(x).iter().zip(&n).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    if m == 0 {
        return Err(Error::NoInsideParticles);
    }
    Ok(total / (m as f64 * h))
}

/// Bandwidth used at sample size `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BandwidthRule {
    /// `h0·(dN)^{-1/3}`.
    Adaptive { h0: f64 },
    Fixed(f64),
}

impl BandwidthRule {
    pub fn at(self, dim: usize, n: usize) -> f64 {
        match self {
            BandwidthRule::Adaptive { h0 } => adaptive_bandwidth(h0, dim, n),
            BandwidthRule::Fixed(h) => h,
        }
    }
}

/// One trial of the boundary-estimator study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub h: f64,
    pub trial: usize,
    pub estimate: f64,
    pub true_value: f64,
    pub squared_error: f64,
}

/// Result of [`mse_slope_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct MseSweep {
    pub true_value: f64,
    pub rows: Vec<SimulationRow>,
    /// `(N, mean squared error)` per sample size.
    pub mse: Vec<(usize, f64)>,
    /// Least-squares slope of `ln MSE` on `ln N`.
    pub slope: f64,
}

/// Quadrature resolution for the reference value.
pub const REFERENCE_RESOLUTION: usize = 2000;

/// Squared error of the band estimator against quadrature, for each sample
/// size in `n_list` and `trials` independent samples each.
pub fn mse_slope_experiment(
    domain: &ConstraintDomain,
    density: TestDensity,
    velocity: TestVelocity,
    n_list: &[usize],
    rule: BandwidthRule,
    trials: usize,
    seed: u64,
) -> Result<MseSweep> {
    require_block(domain)?;
    if trials == 0 || n_list.is_empty() {
        return Err(Error::InvalidParameter("need at least one trial and one sample size".into()));
    }
    let truth = boundary_quadrature_for(domain, density, velocity, REFERENCE_RESOLUTION)?;
    let mut rows = Vec::with_capacity(n_list.len() * trials);
    let mut mse = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let h = rule.at(domain.dim(), n);
        let cell: Vec<Result<SimulationRow>> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::TRIAL, n as u64, trial as u64]));
                let points: Vec<[f64; 2]> = (0..n).map(|_| density.sample(&mut rng)).collect();
                let estimate = boundary_mc_estimate(domain, &points, |x| velocity.eval(domain, x), h)?;
                Ok(SimulationRow { n, h, trial, estimate, true_value: truth, squared_error: (estimate - truth).powi(2) })
            })
            .collect();
        let cell = cell.into_iter().collect::<Result<Vec<_>>>()?;
        mse.push((n, cell.iter().map(|r| r.squared_error).sum::<f64>() / trials as f64));
        rows.extend(cell);
    }
    let xs: Vec<f64> = mse.iter().map(|(n, _)| *n as f64).collect();
    let ys: Vec<f64> = mse.iter().map(|(_, e)| *e).collect();
    let slope = if xs.len() >= 2 { loglog_slope(&xs, &ys)? } else { f64::NAN };
    Ok(MseSweep { true_value: truth, rows, mse, slope })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), got: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidParameter("slope needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("log-log slope needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}
