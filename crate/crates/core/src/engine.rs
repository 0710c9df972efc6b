//! The outer/inner training loop: partition particles, fit the interior
//! velocity for a few Adam steps, move every particle one Euler step.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domains::{adaptive_bandwidth, ConstraintDomain, DomainSpec};
use crate::error::{Error, Result};
use crate::flow::{partition, velocity_field, RsdBatch};
use crate::metrics::{MetricReference, SinkhornOptions};
use crate::net::{adam_step, AdamConfig, AdamState, VelocityNets};
use crate::rng::{derive_seed, rng_for, stream};
use crate::targets::{TargetDistribution, TargetSpec};

/// A scalar broadcast to every coordinate, or one value per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    pub fn expand(&self, dim: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; dim]),
            ScalarOrVec::Vector(v) if v.len() == dim => Ok(v.clone()),
            ScalarOrVec::Vector(v) => {
                Err(Error::Config(format!("`{field}` has {} entries but the domain has dimension {dim}", v.len())))
            }
        }
    }
}

/// Initial particle distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Independent normal coordinates.
    Gaussian { mean: ScalarOrVec, std: ScalarOrVec },
    /// Uniform on the box `[low, high]`.
    Uniform { low: ScalarOrVec, high: ScalarOrVec },
    /// Independent normal coordinates around the target's base-density center.
    Centered { std: ScalarOrVec },
}

/// Band half-width: a fixed value, or `h0·(dN)^{-1/3}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthSpec {
    Fixed(f64),
    Adaptive(AdaptiveBandwidth),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveBandwidth {
    pub h0: f64,
    pub adaptive: bool,
}

impl BandwidthSpec {
    pub fn resolve(&self, dim: usize, n: usize) -> Result<f64> {
        let h = match *self {
            BandwidthSpec::Fixed(h) => h,
            BandwidthSpec::Adaptive(AdaptiveBandwidth { h0, adaptive: true }) => adaptive_bandwidth(h0, dim, n),
            BandwidthSpec::Adaptive(AdaptiveBandwidth { h0, adaptive: false }) => h0,
        };
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("`bandwidth` must resolve to a positive value, got {h}")));
        }
        Ok(h)
    }
}

/// Reference sample for the quality metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    /// Snapshot-format CSV; the rows with the largest `iter` are used.
    File(String),
    /// Fresh rejection draws of this size, seeded from the run seed.
    Rejection(usize),
}

fn default_snapshot_every() -> usize {
    100
}

fn default_true() -> bool {
    true
}

fn default_out_dir() -> String {
    "out".into()
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub target: TargetSpec,
    #[serde(rename = "N")]
    pub n: usize,
    pub init: InitSpec,
    pub f_hidden: Vec<usize>,
    /// Defaults to `f_hidden`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_hidden: Option<Vec<usize>>,
    pub lambda: f64,
    pub bandwidth: BandwidthSpec,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "L_prime")]
    pub l_prime: usize,
    pub alpha: f64,
    pub eta: f64,
    pub seed: u64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Fresh Adam moments at every outer iteration.
    #[serde(default)]
    pub reset_adam: bool,
    /// Include the band-wise boundary term in the objective.
    #[serde(default = "default_true")]
    pub boundary_term: bool,
    /// Use `h = f − z²∇g`; otherwise `h = f`.
    #[serde(default = "default_true")]
    pub use_z_net: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthSpec>,
    #[serde(default)]
    pub sinkhorn: SinkhornOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("`{field}` {msg}")));
        if self.n < 1 {
            return bad("N", "must be at least 1");
        }
        if self.l < 1 {
            return bad("L", "must be at least 1");
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha", "must be positive");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad("eta", "must be positive");
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad("lambda", "must be positive");
        }
        if self.snapshot_every < 1 {
            return bad("snapshot_every", "must be at least 1");
        }
        if self.f_hidden.is_empty() || self.f_hidden.contains(&0) {
            return bad("f_hidden", "needs at least one nonzero width");
        }
        if let Some(z) = &self.z_hidden {
            if z.is_empty() || z.contains(&0) {
                return bad("z_hidden", "needs at least one nonzero width");
            }
        }
        if let Some(TruthSpec::Rejection(0)) = self.truth {
            return bad("truth", "rejection sample size must be positive");
        }
        Ok(())
    }

    pub fn build_target(&self) -> Result<TargetDistribution> {
        self.target.build(&self.domain)
    }

    pub fn z_widths(&self) -> &[usize] {
        self.z_hidden.as_deref().unwrap_or(&self.f_hidden)
    }
}

/// Particle positions with their iteration counter and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub positions: Array2<f64>,
    pub iteration: usize,
    pub seed: u64,
}

/// `config.n` draws from the initializer, seeded from the run seed.
/// `center` is the target's base-density center; its length is the dimension.
pub fn init_ensemble(config: &RunConfig, center: &[f64]) -> Result<Ensemble> {
    let mut rng = rng_for(config.seed, &[stream::INIT]);
    let (n, dim) = (config.n, center.len());
    let positions = match &config.init {
        InitSpec::Gaussian { mean, std } => {
            let mean = mean.expand(dim, "init.gaussian.mean")?;
            let std = std.expand(dim, "init.gaussian.std")?;
            if std.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::Config("`init.gaussian.std` must be nonnegative".into()));
            }
            Array2::from_shape_fn((n, dim), |(_, j)| {
                let z: f64 = rng.sample(StandardNormal);
                mean[j] + std[j] * z
            })
        }
        InitSpec::Uniform { low, high } => {
            let low = low.expand(dim, "init.uniform.low")?;
            let high = high.expand(dim, "init.uniform.high")?;
            if low.iter().zip(&high).any(|(a, b)| !(a < b)) {
                return Err(Error::Config("`init.uniform` needs low < high in every coordinate".into()));
            }
            Array2::from_shape_fn((n, dim), |(_, j)| rng.random_range(low[j]..high[j]))
        }
        InitSpec::Centered { std } => {
            let std = std.expand(dim, "init.centered.std")?;
            if std.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::Config("`init.centered.std` must be nonnegative".into()));
            }
            Array2::from_shape_fn((n, dim), |(_, j)| {
                let z: f64 = rng.sample(StandardNormal);
                center[j] + std[j] * z
            })
        }
    };
    Ok(Ensemble { positions, iteration: 0, seed: config.seed })
}

/// Synchronous Euler step `x ← x + α v(x)` with `v` evaluated on the
/// pre-step positions.
pub fn step_particles(ensemble: &Ensemble, velocity: impl Fn(ArrayView2<f64>) -> Array2<f64>, alpha: f64) -> Result<Ensemble> {
    let v = velocity(ensemble.positions.view());
    if v.dim() != ensemble.positions.dim() {
        return Err(Error::ShapeMismatch(format!("velocity {:?} vs positions {:?}", v.dim(), ensemble.positions.dim())));
    }
    Ok(Ensemble { positions: &ensemble.positions + &(v * alpha), iteration: ensemble.iteration + 1, seed: ensemble.seed })
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    /// Iteration count after the step.
    pub iteration: usize,
    /// Objective at the last inner step; `None` without inside particles or inner steps.
    pub rsd_loss: Option<f64>,
    /// Fraction with `g > 0` after the step.
    pub ratio_out: f64,
    /// Inside and band counts before the step.
    pub inside: usize,
    pub band: usize,
}

/// Particle positions at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub positions: Array2<f64>,
}

/// One row of the metrics series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub iter: usize,
    pub rsd_loss: Option<f64>,
    pub ratio_out: f64,
    pub w2_sinkhorn: Option<f64>,
    pub energy: Option<f64>,
}

/// Outputs of a complete run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub snapshots: Vec<Snapshot>,
    pub metrics: Vec<MetricRow>,
    pub bandwidth: f64,
    pub nets: VelocityNets,
}

impl RunArtifacts {
    pub fn final_positions(&self) -> &Array2<f64> {
        &self.snapshots.last().expect("a run always records its final snapshot").positions
    }
}

/// Mutable state of a run.
pub struct Engine {
    config: RunConfig,
    domain: ConstraintDomain,
    target: TargetDistribution,
    nets: VelocityNets,
    adam: AdamState,
    ensemble: Ensemble,
    bandwidth: f64,
}

impl Engine {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let target = config.build_target()?;
        let domain = target.domain().clone();
        let dim = domain.dim();
        let z_widths = config.use_z_net.then(|| config.z_widths().to_vec());
        let nets = VelocityNets::new(
            dim,
            &config.f_hidden,
            z_widths.as_deref(),
            derive_seed(config.seed, &[stream::F_NET]),
            derive_seed(config.seed, &[stream::Z_NET]),
        )?;
        let adam = AdamState::for_nets(&nets, config.adam);
        let ensemble = init_ensemble(&config, &target.center())?;
        let bandwidth = config.bandwidth.resolve(dim, config.n)?;
        Ok(Self { config, domain, target, nets, adam, ensemble, bandwidth })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn domain(&self) -> &ConstraintDomain {
        &self.domain
    }

    pub fn target(&self) -> &TargetDistribution {
        &self.target
    }

    pub fn nets(&self) -> &VelocityNets {
        &self.nets
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Replaces the particle positions (same shape).
    pub fn set_positions(&mut self, positions: Array2<f64>) -> Result<()> {
        if positions.dim() != self.ensemble.positions.dim() {
            return Err(Error::ShapeMismatch(format!(
                "positions {:?} vs ensemble {:?}",
                positions.dim(),
                self.ensemble.positions.dim()
            )));
        }
        self.ensemble.positions = positions;
        Ok(())
    }

    /// One outer iteration: train, then move every particle.
    pub fn step(&mut self) -> Result<StepReport> {
        let k = self.ensemble.iteration;
        let x = self.ensemble.positions.view();
        let part = partition(&self.domain, x, self.bandwidth);
        let mut rsd_loss = None;
        if part.m() >= 1 && self.config.l_prime > 0 {
            let batch = RsdBatch::new(&self.domain, &self.target, &part, x, self.bandwidth, self.config.boundary_term)?;
            if self.config.reset_adam {
                self.adam = AdamState::for_nets(&self.nets, self.config.adam);
            }
            for _ in 0..self.config.l_prime {
                let (loss, grads) = batch.loss_and_grad(&self.nets);
                if !loss.is_finite() {
                    return Err(Error::NonFinite { iteration: k, what: "loss".into() });
                }
                adam_step(&mut self.nets, &grads, &mut self.adam, self.config.eta)?;
                rsd_loss = Some(loss);
            }
            if self.nets.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite { iteration: k, what: "network parameters".into() });
            }
        }
        let (nets, domain, lambda) = (&self.nets, &self.domain, self.config.lambda);
        let next = step_particles(&self.ensemble, |p| velocity_field(nets, domain, lambda, p), self.config.alpha)?;
        if next.positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iteration: k + 1, what: "particle positions".into() });
        }
        self.ensemble = next;
        Ok(StepReport {
            iteration: self.ensemble.iteration,
            rsd_loss,
            ratio_out: crate::metrics::ratio_out(&self.domain, self.ensemble.positions.view()),
            inside: part.m(),
            band: part.n(),
        })
    }
}

/// Reference sample for a config, if one is configured. File truths are
/// loaded by `load_file`.
pub fn resolve_truth(
    config: &RunConfig,
    target: &TargetDistribution,
    load_file: impl Fn(&str) -> Result<Array2<f64>>,
) -> Result<Option<Array2<f64>>> {
    let truth = match &config.truth {
        None => return Ok(None),
        Some(TruthSpec::File(path)) => load_file(path)?,
        Some(TruthSpec::Rejection(n)) => crate::oracle::rejection_sample(target, *n, derive_seed(config.seed, &[stream::TRUTH]))?,
    };
    if truth.ncols() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: truth.ncols() });
    }
    Ok(Some(truth))
}

/// Runs the full loop. Snapshots at iteration 0, every `snapshot_every`
/// iterations and at the end; metric rows every iteration, with the
/// reference-sample columns filled at snapshot iterations.
pub fn cfg_run_with(
    config: &RunConfig,
    truth: Option<Array2<f64>>,
    mut observer: impl FnMut(&StepReport),
) -> Result<RunArtifacts> {
    let mut engine = Engine::new(config.clone())?;
    let reference = truth
        .map(|t| MetricReference::new(t, config.sinkhorn, derive_seed(config.seed, &[stream::METRICS])))
        .transpose()?;
    let metric_row = |iter: usize, rsd_loss: Option<f64>, ratio_out: f64, x: ArrayView2<f64>, full: bool| -> Result<MetricRow> {
        let (w2, energy) = match (&reference, full) {
            (Some(r), true) => (Some(r.sinkhorn(x)?.value), Some(r.energy(x)?)),
            _ => (None, None),
        };
        Ok(MetricRow { iter, rsd_loss, ratio_out, w2_sinkhorn: w2, energy })
    };

    let x0 = engine.ensemble().positions.clone();
    let mut snapshots = vec![Snapshot { iteration: 0, positions: x0.clone() }];
    let mut metrics = vec![metric_row(0, None, crate::metrics::ratio_out(engine.domain(), x0.view()), x0.view(), true)?];
    for _ in 0..config.l {
        let report = engine.step()?;
        observer(&report);
        let it = report.iteration;
        let snap = it % config.snapshot_every == 0 || it == config.l;
        let x = engine.ensemble().positions.view();
        metrics.push(metric_row(it, report.rsd_loss, report.ratio_out, x, snap)?);
        if snap {
            snapshots.push(Snapshot { iteration: it, positions: x.to_owned() });
        }
    }
    Ok(RunArtifacts { snapshots, metrics, bandwidth: engine.bandwidth(), nets: engine.nets })
}

/// [`cfg_run_with`] with rejection truths resolved and no observer. File
/// truths must go through [`cfg_run_with`].
pub fn cfg_run(config: &RunConfig) -> Result<RunArtifacts> {
    let target = config.build_target()?;
    let truth = resolve_truth(config, &target, |p| {
        Err(Error::Unsupported(format!("file truth `{p}` needs a loader; use cfg_run_with")))
    })?;
    cfg_run_with(config, truth, |_| {})
}

/// Inside fraction `1 − ratio_out` per metric row.
pub fn inside_fractions(metrics: &[MetricRow]) -> Array1<f64> {
    metrics.iter().map(|m| 1.0 - m.ratio_out).collect()
}

/// Largest drop of the inside fraction between consecutive entries.
pub fn max_inside_drop(fractions: &[f64]) -> f64 {
    fractions.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

/// Mean over rows.
pub fn particle_mean(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
