//! Inequality-constrained domains `Ω = {x : g(x) ≤ 0}`.
//!
//! Each domain carries an analytic constraint function `g`, its gradient and
//! its Laplacian. The gradient gives the outward direction used both by the
//! push branch of the velocity field and by the band-membership probe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to `‖∇g‖` before normalizing.
pub const DEFAULT_GRAD_FLOOR: f64 = 1e-12;

const CARDIOID_CLAMP: f64 = 1e-8;
const MOON_RADIUS_CLAMP: f64 = 1e-8;
const LQ_CLAMP: f64 = 1e-10;

/// Domain selector as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Ring {},
    Cardioid {},
    DoubleMoon {},
    Block {},
    LqBall {
        q: f64,
        /// Radius; `None` lets a Lasso target supply it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r: Option<f64>,
        dim: usize,
    },
}

impl DomainSpec {
    pub fn build(&self) -> Result<ConstraintDomain> {
        match self {
            DomainSpec::Ring {} => Ok(make_ring()),
            DomainSpec::Cardioid {} => Ok(make_cardioid()),
            DomainSpec::DoubleMoon {} => Ok(make_double_moon()),
            DomainSpec::Block {} => Ok(make_block()),
            DomainSpec::LqBall { q, r, dim } => {
                let r = r.ok_or_else(|| {
                    Error::Config("lq_ball radius `r` is required unless the target supplies it".into())
                })?;
                make_lq_ball(*q, r, *dim)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Ring,
    Cardioid,
    DoubleMoon,
    Block,
    LqBall { q: f64, r: f64 },
}

/// A single smooth (or a.e. smooth) inequality constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintDomain {
    shape: Shape,
    dim: usize,
    grad_floor: f64,
}

/// `g(x) = (‖x‖² − 2.5)² − 2.25`, whose zero sublevel set is `1 ≤ ‖x‖² ≤ 4`.
pub fn make_ring() -> ConstraintDomain {
    ConstraintDomain::new(Shape::Ring, 2)
}

/// `g(x) = x₁² + (1.2·x₂ − (x₁²)^{1/3})² − 4`.
pub fn make_cardioid() -> ConstraintDomain {
    ConstraintDomain::new(Shape::Cardioid, 2)
}

/// `g(x) = −log q(x) − 2` with
/// `q(x) = (e^{−2(x₁−3)²} + e^{−2(x₁+3)²}) · e^{−2(‖x‖−3)²}`.
pub fn make_double_moon() -> ConstraintDomain {
    ConstraintDomain::new(Shape::DoubleMoon, 2)
}

/// `g(x) = max(|x₁|, |x₂|) − 2`.
pub fn make_block() -> ConstraintDomain {
    ConstraintDomain::new(Shape::Block, 2)
}

/// `g(β) = ‖β‖_q − r`.
pub fn make_lq_ball(q: f64, r: f64, dim: usize) -> Result<ConstraintDomain> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::InvalidParameter(format!("lq_ball needs q >= 1, got {q}")));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("lq_ball needs r > 0, got {r}")));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("lq_ball needs dim >= 1".into()));
    }
    Ok(ConstraintDomain::new(Shape::LqBall { q, r }, dim))
}

/// Bandwidth schedule `h = h₀ · (d·N)^{−1/3}`.
pub fn adaptive_bandwidth(h0: f64, dim: usize, n: usize) -> f64 {
    h0 * ((dim * n) as f64).powf(-1.0 / 3.0)
}

/// Free-function form of [`ConstraintDomain::in_band`].
pub fn in_band(domain: &ConstraintDomain, x: &[f64], h: f64) -> bool {
    domain.in_band(x, h)
}

impl ConstraintDomain {
    fn new(shape: Shape, dim: usize) -> Self {
        Self { shape, dim, grad_floor: DEFAULT_GRAD_FLOOR }
    }

    pub fn with_grad_floor(mut self, floor: f64) -> Self {
        self.grad_floor = floor;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.shape {
            Shape::Ring => "ring",
            Shape::Cardioid => "cardioid",
            Shape::DoubleMoon => "double_moon",
            Shape::Block => "block",
            Shape::LqBall { .. } => "lq_ball",
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grad_floor(&self) -> f64 {
        self.grad_floor
    }

    /// `(q, r)` for an ℓq ball, `None` otherwise.
    pub fn lq_params(&self) -> Option<(f64, f64)> {
        match self.shape {
            Shape::LqBall { q, r } => Some((q, r)),
            _ => None,
        }
    }

    pub fn spec(&self) -> DomainSpec {
        match self.shape {
            Shape::Ring => DomainSpec::Ring {},
            Shape::Cardioid => DomainSpec::Cardioid {},
            Shape::DoubleMoon => DomainSpec::DoubleMoon {},
            Shape::Block => DomainSpec::Block {},
            Shape::LqBall { q, r } => DomainSpec::LqBall { q, r: Some(r), dim: self.dim },
        }
    }

    pub fn g(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match self.shape {
            Shape::Ring => {
                let s = sq_norm(x);
                (s - 2.5).powi(2) - 2.25
            }
            Shape::Cardioid => {
                let u = 1.2 * x[1] - cbrt_sq(x[0]);
                x[0] * x[0] + u * u - 4.0
            }
            Shape::DoubleMoon => -moon_log_q(x) - 2.0,
            Shape::Block => x.iter().fold(0.0_f64, |m, v| m.max(v.abs())) - 2.0,
            Shape::LqBall { q, r } => lq_norm(x, q) - r,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.g(x) <= 0.0
    }

    pub fn grad_g(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        match self.shape {
            Shape::Ring => {
                let c = 4.0 * (sq_norm(x) - 2.5);
                x.iter().map(|v| c * v).collect()
            }
            Shape::Cardioid => {
                let (phi, dphi, _) = cbrt_sq_derivs(x[0]);
                let u = 1.2 * x[1] - phi;
                vec![2.0 * x[0] - 2.0 * u * dphi, 2.4 * u]
            }
            Shape::DoubleMoon => {
                let rho = norm(x).max(MOON_RADIUS_CLAMP);
                let radial = 4.0 * (rho - 3.0) / rho;
                let (_, dlse, _) = moon_lse_derivs(x[0]);
                let mut out: Vec<f64> = x.iter().map(|v| radial * v).collect();
                out[0] -= dlse;
                out
            }
            Shape::Block => {
                let mut best = 0;
                for (i, v) in x.iter().enumerate() {
                    if v.abs() > x[best].abs() {
                        best = i;
                    }
                }
                let mut out = vec![0.0; x.len()];
                out[best] = x[best].signum();
                out
            }
            Shape::LqBall { q, .. } => lq_grad(x, q),
        }
    }

    pub fn laplacian_g(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let d = self.dim as f64;
        match self.shape {
            Shape::Ring => {
                let s = sq_norm(x);
                8.0 * s + 4.0 * d * (s - 2.5)
            }
            Shape::Cardioid => {
                let (phi, dphi, d2phi) = cbrt_sq_derivs(x[0]);
                let u = 1.2 * x[1] - phi;
                2.0 + 2.0 * dphi * dphi - 2.0 * u * d2phi + 2.88
            }
            Shape::DoubleMoon => {
                // Radial part 2(ρ−3)² plus the x₁-only log-sum-exp part.
                let rho = norm(x).max(MOON_RADIUS_CLAMP);
                let radial = 4.0 + (d - 1.0) * 4.0 * (rho - 3.0) / rho;
                let (_, _, d2lse) = moon_lse_derivs(x[0]);
                radial - d2lse
            }
            Shape::Block => 0.0,
            Shape::LqBall { q, .. } => lq_laplacian(x, q),
        }
    }

    /// `∇g/‖∇g‖`, or `None` when `‖∇g‖` is below the floor.
    pub fn unit_normal(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut grad = self.grad_g(x);
        let n = norm(&grad);
        if n < self.grad_floor {
            return None;
        }
        grad.iter_mut().for_each(|v| *v /= n);
        Some(grad)
    }

    /// Band proxy: `g(x) ≤ 0` and `g(x + h·∇g/‖∇g‖) ≥ 0`. A `true` result
    /// implies `dist(x, ∂Ω) ≤ h`.
    pub fn in_band(&self, x: &[f64], h: f64) -> bool {
        if self.g(x) > 0.0 {
            return false;
        }
        let Some(n) = self.unit_normal(x) else {
            return false;
        };
        let probe: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + h * b).collect();
        self.g(&probe) >= 0.0
    }
}

pub(crate) fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    sq_norm(x).sqrt()
}

/// Even extension `(t²)^{1/3}`.
fn cbrt_sq(t: f64) -> f64 {
    (t * t).cbrt()
}

/// `(φ, φ', φ'')` for `φ(t) = |t|^{2/3}`, derivatives taken with `|t| ≥ 1e-8`.
fn cbrt_sq_derivs(t: f64) -> (f64, f64, f64) {
    let phi = cbrt_sq(t);
    let a = t.abs().max(CARDIOID_CLAMP);
    let sign = if t < 0.0 { -1.0 } else { 1.0 };
    let dphi = (2.0 / 3.0) * sign * a.powf(-1.0 / 3.0);
    let d2phi = -(2.0 / 9.0) * a.powf(-4.0 / 3.0);
    (phi, dphi, d2phi)
}

/// `log(e^{a} + e^{b})` with `a = −2(x₁−3)²`, `b = −2(x₁+3)²`, and its first
/// two derivatives in `x₁`.
pub(crate) fn moon_lse_derivs(x1: f64) -> (f64, f64, f64) {
    let a = -2.0 * (x1 - 3.0).powi(2);
    let b = -2.0 * (x1 + 3.0).powi(2);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let lse = m + (ea + eb).ln();
    let wa = ea / (ea + eb);
    let wb = 1.0 - wa;
    let da = -4.0 * (x1 - 3.0);
    let db = -4.0 * (x1 + 3.0);
    let first = wa * da + wb * db;
    let second = -4.0 + wa * wb * (da - db).powi(2);
    (lse, first, second)
}

/// `log q(x)` for the double-moon density.
pub(crate) fn moon_log_q(x: &[f64]) -> f64 {
    let rho = norm(x);
    let (lse, _, _) = moon_lse_derivs(x[0]);
    lse - 2.0 * (rho - 3.0).powi(2)
}

fn lq_norm(x: &[f64], q: f64) -> f64 {
    if q == 1.0 {
        x.iter().map(|v| v.abs()).sum()
    } else {
        x.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q)
    }
}

fn lq_grad(x: &[f64], q: f64) -> Vec<f64> {
    if q == 1.0 {
        return x
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
            .collect();
    }
    let nrm = lq_norm(x, q).max(LQ_CLAMP);
    let scale = nrm.powf(1.0 - q);
    x.iter()
        .map(|&v| v.signum() * v.abs().powf(q - 1.0) * scale)
        .collect()
}

fn lq_laplacian(x: &[f64], q: f64) -> f64 {
    if q == 1.0 {
        return 0.0;
    }
    let nrm = lq_norm(x, q).max(LQ_CLAMP);
    let s1: f64 = x.iter().map(|v| v.abs().max(LQ_CLAMP).powf(q - 2.0)).sum();
    let s2: f64 = x.iter().map(|v| v.abs().powf(2.0 * q - 2.0)).sum();
    (q - 1.0) * (nrm.powf(1.0 - q) * s1 - nrm.powf(1.0 - 2.0 * q) * s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_laplacian(d: &ConstraintDomain, x: &[f64]) -> f64 {
        // Divergence of the analytic gradient by central differences.
        let jac = finite_diff::jacobian(|p| d.grad_g(p), x, 1e-5);
        (0..x.len()).map(|i| jac[i][i]).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-8)
    }

    fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / norm(b).max(1e-8)
    }

    #[test]
    fn ring_values() {
        let d = make_ring();
        assert!((d.g(&[0.0, 2.5_f64.sqrt()]) + 2.25).abs() < 1e-12);
        assert!(d.g(&[1.0, 0.0]).abs() < 1e-12);
        assert!((d.g(&[3.0, 0.0]) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn ring_sublevel_set_matches_annulus() {
        let d = make_ring();
        for i in 0..=200 {
            for j in 0..=200 {
                let x = [-3.0 + 0.03 * i as f64, -3.0 + 0.03 * j as f64];
                let s = sq_norm(&x);
                if (s - 1.0).abs() < 1e-9 || (s - 4.0).abs() < 1e-9 {
                    continue;
                }
                assert_eq!(d.contains(&x), (1.0..=4.0).contains(&s), "{x:?}");
            }
        }
    }

    #[test]
    fn cardioid_values() {
        let d = make_cardioid();
        assert!((d.g(&[0.0, 0.0]) + 4.0).abs() < 1e-12);
        let x2 = 2.0_f64.powf(2.0 / 3.0) / 1.2;
        assert!(d.g(&[2.0, x2]).abs() < 1e-12);
        let fd = finite_diff::gradient(|p| d.g(p), &[1.0, 1.0], 1e-5);
        assert!(vec_rel_err(&d.grad_g(&[1.0, 1.0]), &fd) < 1e-4);
    }

    #[test]
    fn double_moon_values() {
        let d = make_double_moon();
        let expected = -(1.0 + (-72.0_f64).exp()).ln() - 2.0;
        assert!((d.g(&[3.0, 0.0]) - expected).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            assert!((d.g(&x) - d.g(&[-x[0], -x[1]])).abs() < 1e-10);
        }
        let fd = finite_diff::gradient(|p| d.g(p), &[2.5, 0.5], 1e-5);
        assert!(vec_rel_err(&d.grad_g(&[2.5, 0.5]), &fd) < 1e-4);
        // origin: finite gradient of the clamped extension
        assert!(d.grad_g(&[0.0, 0.0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn block_values() {
        let d = make_block();
        assert_eq!(d.g(&[0.0, 0.0]), -2.0);
        assert_eq!(d.g(&[3.0, 0.0]), 1.0);
        assert_eq!(d.grad_g(&[3.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(d.grad_g(&[1.5, -1.9]), vec![0.0, -1.0]);
        // tie goes to the lowest index
        assert_eq!(d.grad_g(&[-1.0, 1.0]), vec![-1.0, 0.0]);
        assert_eq!(d.laplacian_g(&[0.3, 0.1]), 0.0);
    }

    #[test]
    fn lq_ball_values() {
        let d = make_lq_ball(1.0, 2.0, 2).unwrap();
        assert!((d.g(&[1.0, -0.5]) + 0.5).abs() < 1e-12);
        assert_eq!(d.grad_g(&[1.0, -0.5]), vec![1.0, -1.0]);
        assert_eq!(d.grad_g(&[1.0, 0.0]), vec![1.0, 0.0]);
        let d = make_lq_ball(1.0, 3.5, 5).unwrap();
        assert_eq!(d.g(&[0.0; 5]), -3.5);
        let d = make_lq_ball(1.2, 1.0, 20).unwrap();
        let mut e = vec![0.0; 20];
        e[0] = 1.0;
        assert!(d.g(&e).abs() < 1e-12);
        assert!(make_lq_ball(0.5, 1.0, 3).is_err());
        assert!(make_lq_ball(1.0, -1.0, 3).is_err());
    }

    #[test]
    fn lq_ball_derivatives_match_fd() {
        let d = make_lq_ball(1.2, 3.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4)
                .map(|_| {
                    let v: f64 = rng.random_range(0.1..2.0);
                    if rng.random_bool(0.5) { v } else { -v }
                })
                .collect();
            let fd = finite_diff::gradient(|p| d.g(p), &x, 1e-5);
            assert!(vec_rel_err(&d.grad_g(&x), &fd) < 1e-4);
            assert!(rel_err(d.laplacian_g(&x), fd_laplacian(&d, &x)) < 1e-3);
        }
    }

    /// Random points away from each domain's singular set.
    fn regular_points(d: &ConstraintDomain, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let x = vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let ok = match d.name() {
                "ring" => norm(&x) > 1e-3 && (sq_norm(&x) - 2.5).abs() > 1e-3,
                "cardioid" => x[0].abs() > 1e-3,
                "double_moon" => norm(&x) > 1e-3,
                "block" => (x[0].abs() - x[1].abs()).abs() > 1e-3,
                _ => true,
            };
            if ok {
                out.push(x);
            }
        }
        out
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for d in [make_ring(), make_cardioid(), make_double_moon(), make_block()] {
            for x in regular_points(&d, 1000, 5) {
                let fd = finite_diff::gradient(|p| d.g(p), &x, 1e-5);
                let an = d.grad_g(&x);
                assert!(vec_rel_err(&an, &fd) < 1e-4, "{} grad at {x:?}: {an:?} vs {fd:?}", d.name());
                let lap = d.laplacian_g(&x);
                let lap_fd = fd_laplacian(&d, &x);
                assert!(
                    (lap - lap_fd).abs() <= 1e-3 * lap_fd.abs().max(1e-3),
                    "{} laplacian at {x:?}: {lap} vs {lap_fd}",
                    d.name()
                );
            }
        }
    }

    #[test]
    fn in_band_examples() {
        let d = make_block();
        assert!(d.in_band(&[1.95, 0.0], 0.1));
        assert!(!d.in_band(&[0.0, 0.0], 0.1));
        assert!(!d.in_band(&[2.5, 0.0], 0.1));
    }

    #[test]
    fn block_band_matches_exact_face_distance() {
        let d = make_block();
        for h in [0.05, 0.1, 0.37] {
            for i in 0..=100 {
                for j in 0..=100 {
                    let x = [-2.0 + 0.04 * i as f64, -2.0 + 0.04 * j as f64];
                    let dist = 2.0 - x[0].abs().max(x[1].abs());
                    if (dist - h).abs() < 1e-9 || dist < 0.0 {
                        continue;
                    }
                    assert_eq!(d.in_band(&x, h), dist <= h, "h={h} x={x:?}");
                }
            }
        }
    }

    #[test]
    fn band_is_subset_of_closed_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lq = make_lq_ball(1.0, 2.0, 2).unwrap();
        for d in [make_ring(), make_cardioid(), make_double_moon(), make_block(), lq] {
            for _ in 0..2000 {
                let x = [rng.random_range(-4.5..4.5), rng.random_range(-4.5..4.5)];
                let h = rng.random_range(0.001..0.5);
                if d.in_band(&x, h) {
                    assert!(d.g(&x) <= 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_gradient_is_never_in_band() {
        // ring mid-shell has ∇g = 0
        let d = make_ring();
        assert!(!d.in_band(&[2.5_f64.sqrt(), 0.0], 10.0));
    }

    #[test]
    fn adaptive_bandwidth_values() {
        let h0 = 0.5 * 2.0_f64.cbrt();
        assert!((adaptive_bandwidth(h0, 2, 1_000_000) - 0.5 * 1e-2).abs() < 1e-12);
        let h = adaptive_bandwidth(0.5, 2, 1_000_000);
        assert!((h - 0.003968502629920499).abs() < 1e-9);
        let a = adaptive_bandwidth(0.7, 3, 1000);
        assert!((adaptive_bandwidth(0.7, 3, 8000) - a / 2.0).abs() < 1e-14);
        let h0 = 0.1 * 20.0_f64.cbrt();
        assert!((adaptive_bandwidth(h0, 20, 1000) - 0.01).abs() < 1e-12);
        assert!(adaptive_bandwidth(1.0, 2, 100) > adaptive_bandwidth(1.0, 2, 101));
        assert!(adaptive_bandwidth(1.0, 2, 100) > adaptive_bandwidth(1.0, 3, 100));
        assert!((adaptive_bandwidth(3.0, 2, 100) - 3.0 * adaptive_bandwidth(1.0, 2, 100)).abs() < 1e-15);
    }

    #[test]
    fn spec_round_trip() {
        let spec: DomainSpec = serde_json::from_str(r#"{"name":"lq_ball","q":1.2,"r":3.0,"dim":20}"#).unwrap();
        let d = spec.build().unwrap();
        assert_eq!(d.spec(), spec);
        let bad = serde_json::from_str::<DomainSpec>(r#"{"name":"ring","radius":1}"#);
        assert!(bad.is_err());
    }
}
