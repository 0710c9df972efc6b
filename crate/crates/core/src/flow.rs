//! The piecewise velocity field and the regularized Stein discrepancy
//! objective used to train its interior part.
//!
//! Inside the domain the velocity is the learned `h = f − z²∇g`; on
//! `{g ≥ 0}` it is the fixed push `−λ ∇g/‖∇g‖`. The objective over the `m`
//! inside particles is
//!
//! ```text
//! L = 1/m Σ_inside [ −sᵀh − ∇·h + ½‖h‖² ] + 1/(m·h_bw) Σ_band hᵀ∇g/‖∇g‖
//! ```
//!
//! where the last sum is the band-wise estimate of the boundary flux.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::domains::ConstraintDomain;
use crate::error::{Error, Result};
use crate::net::VelocityNets;
use crate::targets::TargetDistribution;

/// Particle indices by constraint status.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParticlePartition {
    /// `g < 0`.
    pub inside: Vec<usize>,
    /// Band proxy holds; a subset of `inside ∪ {g = 0}`.
    pub band: Vec<usize>,
    /// `g ≥ 0`.
    pub outside: Vec<usize>,
}

impl ParticlePartition {
    pub fn m(&self) -> usize {
        self.inside.len()
    }

    pub fn n(&self) -> usize {
        self.band.len()
    }
}

pub fn partition(domain: &ConstraintDomain, positions: ArrayView2<f64>, h: f64) -> ParticlePartition {
    let mut part = ParticlePartition::default();
    for (i, row) in positions.rows().into_iter().enumerate() {
        let x = row.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| row.to_vec());
        if domain.g(&x) < 0.0 {
            part.inside.push(i);
        } else {
            part.outside.push(i);
        }
        if domain.in_band(&x, h) {
            part.band.push(i);
        }
    }
    part
}

/// Push velocity `−λ ∇g / max(‖∇g‖, floor)`.
fn push(domain: &ConstraintDomain, lambda: f64, x: &[f64]) -> Vec<f64> {
    let grad = domain.grad_g(x);
    let n = crate::domains::norm(&grad).max(domain.grad_floor());
    grad.iter().map(|v| -lambda * v / n).collect()
}

/// Piecewise velocity at a single point. Points with `g = 0` take the push branch.
pub fn velocity(nets: &VelocityNets, domain: &ConstraintDomain, lambda: f64, x: &[f64]) -> Vec<f64> {
    if domain.g(x) < 0.0 {
        crate::net::h_net_eval(nets, domain, x)
    } else {
        push(domain, lambda, x)
    }
}

/// Batched [`velocity`]: inside rows go through the networks in one pass.
pub fn velocity_field(nets: &VelocityNets, domain: &ConstraintDomain, lambda: f64, positions: ArrayView2<f64>) -> Array2<f64> {
    let d = positions.ncols();
    let mut out = Array2::zeros(positions.raw_dim());
    let mut inside = Vec::new();
    for (i, row) in positions.rows().into_iter().enumerate() {
        let x = row.to_vec();
        if domain.g(&x) < 0.0 {
            inside.push(i);
        } else {
            out.row_mut(i).assign(&Array1::from(push(domain, lambda, &x)));
        }
    }
    if !inside.is_empty() {
        let pts = positions.select(Axis(0), &inside);
        let mut grads = Array2::zeros((inside.len(), d));
        for (k, row) in pts.rows().into_iter().enumerate() {
            grads.row_mut(k).assign(&Array1::from(domain.grad_g(&row.to_vec())));
        }
        let h = nets.h_batch(pts.view(), grads.view());
        for (k, &i) in inside.iter().enumerate() {
            out.row_mut(i).assign(&h.row(k));
        }
    }
    out
}

/// Everything the objective needs about the particles, computed once per
/// outer iteration (particles do not move during the inner loop).
#[derive(Debug, Clone)]
pub struct RsdBatch {
    points: Array2<f64>,
    scores: Array2<f64>,
    grad_g: Array2<f64>,
    normals: Array2<f64>,
    laplacian: Array1<f64>,
    /// `1/m` on inside rows, 0 on band-only rows (`g = 0`).
    interior_weight: Array1<f64>,
    /// `1/(m·h)` on band rows, 0 elsewhere.
    band_weight: Array1<f64>,
    m: usize,
}

impl RsdBatch {
    pub fn new(
        domain: &ConstraintDomain,
        target: &TargetDistribution,
        part: &ParticlePartition,
        positions: ArrayView2<f64>,
        h: f64,
        include_boundary: bool,
    ) -> Result<Self> {
        let m = part.m();
        if m == 0 {
            return Err(Error::NoInsideParticles);
        }
        if !(h > 0.0) {
            return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
        }
        let mut rows: Vec<usize> = part.inside.clone();
        let band_only: Vec<usize> = part.band.iter().copied().filter(|i| part.inside.binary_search(i).is_err()).collect();
        rows.extend(&band_only);
        let k = rows.len();
        let d = positions.ncols();
        let points = positions.select(Axis(0), &rows);
        let mut scores = Array2::zeros((k, d));
        let mut grad_g = Array2::zeros((k, d));
        let mut normals = Array2::zeros((k, d));
        let mut laplacian = Array1::zeros(k);
        let mut interior_weight = Array1::zeros(k);
        let mut band_weight = Array1::zeros(k);
        let inv_m = 1.0 / m as f64;
        for (r, &idx) in rows.iter().enumerate() {
            let x = points.row(r).to_vec();
            let grad = domain.grad_g(&x);
            scores.row_mut(r).assign(&Array1::from(target.score(&x)));
            laplacian[r] = domain.laplacian_g(&x);
            if r < m {
                interior_weight[r] = inv_m;
            }
            if include_boundary && part.band.binary_search(&idx).is_ok() {
                if let Some(n) = domain.unit_normal(&x) {
                    normals.row_mut(r).assign(&Array1::from(n));
                    band_weight[r] = inv_m / h;
                }
            }
            grad_g.row_mut(r).assign(&Array1::from(grad));
        }
        Ok(Self { points, scores, grad_g, normals, laplacian, interior_weight, band_weight, m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Loss value and, when `want_grad`, its parameter gradient.
    fn evaluate(&self, nets: &VelocityNets, want_grad: bool) -> (f64, Option<VelocityNets>) {
        let x = self.points.view();
        let k = x.nrows();
        let f_tape = nets.f.forward_batch(x);
        let tau = nets.f.jacobian_trace(&f_tape).expect("f_net is square");
        let mut h = f_tape.output.clone();

        let z_parts = nets.z.as_ref().map(|z| {
            let tape = z.forward_batch(x);
            let jvp = z.jvp(&tape, self.grad_g.view());
            let zv = tape.output.column(0).to_owned();
            let t = jvp.output.column(0).to_owned();
            (tape, jvp, zv, t)
        });
        if let Some((_, _, zv, _)) = &z_parts {
            h -= &(&self.grad_g * &zv.mapv(|v| v * v).insert_axis(Axis(1)));
        }

        let resid = &h - &self.scores;
        let mut loss = 0.0;
        for r in 0..k {
            let hr = h.row(r);
            let sr = self.scores.row(r);
            let mut div = tau[r];
            if let Some((_, _, zv, t)) = &z_parts {
                div -= 2.0 * zv[r] * t[r] + zv[r] * zv[r] * self.laplacian[r];
            }
            let wi = self.interior_weight[r];
            if wi != 0.0 {
                loss += wi * (-sr.dot(&hr) - div + 0.5 * hr.dot(&hr));
            }
            let wb = self.band_weight[r];
            if wb != 0.0 {
                loss += wb * hr.dot(&self.normals.row(r));
            }
        }
        if !want_grad {
            return (loss, None);
        }

        let wi = self.interior_weight.view().insert_axis(Axis(1));
        let wb = self.band_weight.view().insert_axis(Axis(1));
        let f_cot = &resid * &wi + &self.normals * &wb;
        let tau_cot = -&self.interior_weight;
        let mut grads = nets.zeros_like();
        nets.f.backward(&f_tape, f_cot.view(), &mut grads.f);
        nets.f.jacobian_trace_backward(&f_tape, &tau_cot, &mut grads.f).expect("f_net is square");

        if let (Some(z), Some((tape, jvp, zv, t)), Some(gz)) = (&nets.z, &z_parts, grads.z.as_mut()) {
            let mut z_cot = Array2::zeros((k, 1));
            let mut t_cot = Array2::zeros((k, 1));
            for r in 0..k {
                let g = self.grad_g.row(r);
                let wi = self.interior_weight[r];
                let wb = self.band_weight[r];
                let resid_dot_g = resid.row(r).dot(&g);
                z_cot[[r, 0]] = wi * (-2.0 * zv[r] * resid_dot_g + 2.0 * t[r] + 2.0 * zv[r] * self.laplacian[r])
                    - wb * 2.0 * zv[r] * g.dot(&self.normals.row(r));
                t_cot[[r, 0]] = wi * 2.0 * zv[r];
            }
            z.backward(tape, z_cot.view(), gz);
            z.jvp_backward(tape, jvp, t_cot.view(), gz);
        }
        (loss, Some(grads))
    }

    pub fn loss(&self, nets: &VelocityNets) -> f64 {
        self.evaluate(nets, false).0
    }

    pub fn loss_and_grad(&self, nets: &VelocityNets) -> (f64, VelocityNets) {
        let (l, g) = self.evaluate(nets, true);
        (l, g.expect("gradient requested"))
    }
}

/// Band-wise boundary flux estimate `1/(m·h) Σ_band hᵀ∇g/‖∇g‖`.
pub fn boundary_term(
    nets: &VelocityNets,
    domain: &ConstraintDomain,
    part: &ParticlePartition,
    positions: ArrayView2<f64>,
    h: f64,
) -> Result<f64> {
    let m = part.m();
    if m == 0 {
        return Err(Error::NoInsideParticles);
    }
    let mut total = 0.0;
    for &i in &part.band {
        let x = positions.row(i).to_vec();
        if let Some(n) = domain.unit_normal(&x) {
            let v = crate::net::h_net_eval(nets, domain, &x);
            total += v.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (m as f64 * h))
}

pub fn rsd_loss(
    nets: &VelocityNets,
    domain: &ConstraintDomain,
    target: &TargetDistribution,
    part: &ParticlePartition,
    positions: ArrayView2<f64>,
    h: f64,
) -> Result<f64> {
    Ok(RsdBatch::new(domain, target, part, positions, h, true)?.loss(nets))
}

pub fn rsd_loss_grad(
    nets: &VelocityNets,
    domain: &ConstraintDomain,
    target: &TargetDistribution,
    part: &ParticlePartition,
    positions: ArrayView2<f64>,
    h: f64,
) -> Result<VelocityNets> {
    Ok(RsdBatch::new(domain, target, part, positions, h, true)?.loss_and_grad(nets).1)
}
