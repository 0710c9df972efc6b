use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use cfgflow::cli::{self, SIMULATION_FILE, SNAPSHOT_FILE, SUMMARY_FILE};
use cfgflow::domains::make_block;
use cfgflow::engine::{cfg_run_with, resolve_truth, Snapshot};
use cfgflow::metrics::{MetricReference, SinkhornOptions};
use cfgflow::oracle::{self, BandwidthRule, TestDensity, TestVelocity};
use cfgflow::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cfgflow", version, about = "Constrained particle sampling with learned velocity fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunSetup {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out_dir: Option<String>,
    /// `key=value` with dotted keys for nested fields; repeatable.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
}

impl RunSetup {
    fn load(&self) -> anyhow::Result<cfgflow::engine::RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(dir) = &self.out_dir {
            overrides.push(format!("out_dir={}", serde_json::to_string(dir)?));
        }
        Ok(cli::load_config(&self.config, &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampler and write snapshots, metrics and a manifest.
    Run {
        #[command(flatten)]
        setup: RunSetup,
        /// Suppress progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Monte Carlo study of the band estimator of the boundary integral.
    VerifyBoundary {
        /// Largest sample size; sizes are powers of ten from 100.
        #[arg(long, default_value_t = 1e6)]
        max_n: f64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Adaptive scale `h0` in `h0·(dN)^{-1/3}`; defaults to `0.5·d^{1/3}`.
        #[arg(long)]
        h0: Option<f64>,
        /// Use this fixed bandwidth at every sample size instead.
        #[arg(long)]
        fixed_h: Option<f64>,
        /// Quadrature segments per face for the reference values.
        #[arg(long, default_value_t = oracle::REFERENCE_RESOLUTION)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/verify_boundary")]
        out_dir: PathBuf,
    },
    /// Print sample-quality metrics of a snapshot against a reference sample as JSON.
    Metrics {
        /// Snapshot CSV; the last iteration is used.
        #[arg(long)]
        snapshot: PathBuf,
        /// Reference CSV in snapshot format.
        #[arg(long)]
        truth: PathBuf,
        /// Domain for the ratio-out column, as a JSON domain selector.
        #[arg(long, default_value = r#"{"name":"ring"}"#)]
        domain: String,
        #[arg(long, default_value_t = SinkhornOptions::default().eps_rel)]
        eps_rel: f64,
        #[arg(long, default_value_t = SinkhornOptions::default().max_iter)]
        max_iter: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact draws from a config's target by rejection sampling.
    OracleSample {
        #[command(flatten)]
        setup: RunSetup,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Output CSV in snapshot format; defaults to `<out_dir>/truth.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(raw) = std::env::var("CFG_THREADS") {
        let n: usize = raw.trim().parse().with_context(|| format!("CFG_THREADS must be a positive integer, got `{raw}`"))?;
        if n == 0 {
            bail!("CFG_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn cmd_run(setup: &RunSetup, quiet: bool) -> anyhow::Result<()> {
    let started = cli::unix_now();
    let config = setup.load()?;
    let target = config.build_target()?;
    let truth = resolve_truth(&config, &target, |p| cli::read_points(Path::new(p)))?;
    let every = config.snapshot_every;
    let total = config.l;
    let artifacts = cfg_run_with(&config, truth, |r| {
        if !quiet && (r.iteration % every == 0 || r.iteration == total) {
            let loss = r.rsd_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
            eprintln!("iter {:>6}/{total}  loss {loss}  ratio_out {:.4}  inside {}  band {}", r.iteration, r.ratio_out, r.inside, r.band);
        }
    })?;
    let dir = PathBuf::from(&config.out_dir);
    let manifest = cli::write_run(&dir, &config, &artifacts, started)?;
    if !quiet {
        if let Some(last) = artifacts.metrics.last() {
            eprintln!("final ratio_out {:.6}  w2 {:?}  energy {:?}", last.ratio_out, last.w2_sinkhorn, last.energy);
        }
        eprintln!("wrote {}", manifest.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct CellSummary {
    density: &'static str,
    velocity: &'static str,
    true_value: f64,
    expected_value: Option<f64>,
    slope: f64,
    mse: Vec<(usize, f64)>,
    pass: bool,
}

/// Reference values of the boundary integral on the block.
const EXPECTED: [(&str, &str, f64); 4] = [("p1", "v1", 1.0), ("p2", "v1", 0.226259), ("p3", "v1", 0.911333), ("p3", "v3", -0.617187)];
const SLOPE_WINDOW: (f64, f64) = (-0.85, -0.50);
const VALUE_TOL: f64 = 1e-3;

#[allow(clippy::too_many_arguments)]
fn cmd_verify_boundary(
    max_n: f64,
    trials: usize,
    h0: Option<f64>,
    fixed_h: Option<f64>,
    resolution: usize,
    seed: u64,
    out_dir: &Path,
) -> anyhow::Result<bool> {
    let started = cli::unix_now();
    if max_n.is_nan() || max_n < 100.0 {
        bail!("--max-n must be at least 100");
    }
    let block = make_block();
    let mut n_list = vec![];
    let mut n = 100usize;
    while n as f64 <= max_n * (1.0 + 1e-9) {
        n_list.push(n);
        n *= 10;
    }
    let rule = match fixed_h {
        Some(h) => BandwidthRule::Fixed(h),
        None => BandwidthRule::Adaptive { h0: h0.unwrap_or(0.5 * 2f64.cbrt()) },
    };
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut all_pass = true;
    for density in TestDensity::ALL {
        for velocity in TestVelocity::ALL {
            let sweep = oracle::mse_slope_experiment(&block, density, velocity, &n_list, rule, trials, seed)?;
            let quad = oracle::boundary_quadrature_for(&block, density, velocity, resolution)?;
            let expected = EXPECTED.iter().find(|(p, v, _)| *p == density.label() && *v == velocity.label()).map(|e| e.2);
            let value_ok = expected.is_none_or(|e| (quad - e).abs() <= VALUE_TOL);
            let slope_ok = sweep.slope >= SLOPE_WINDOW.0 && sweep.slope <= SLOPE_WINDOW.1;
            let pass = value_ok && slope_ok;
            all_pass &= pass;
            println!(
                "{} {}  true {:+.6}{}  slope {:+.3}  {}",
                density.label(),
                velocity.label(),
                quad,
                expected.map_or(String::new(), |e| format!(" (expected {e:+.6})")),
                sweep.slope,
                if pass { "PASS" } else { "FAIL" }
            );
            if !value_ok {
                println!("  reference value off by {:.2e}", (quad - expected.unwrap_or(quad)).abs());
            }
            if !slope_ok {
                println!("  slope outside [{}, {}]", SLOPE_WINDOW.0, SLOPE_WINDOW.1);
            }
            cells.push(CellSummary {
                density: density.label(),
                velocity: velocity.label(),
                true_value: quad,
                expected_value: expected,
                slope: sweep.slope,
                mse: sweep.mse.clone(),
                pass,
            });
            rows.extend(sweep.rows);
        }
    }
    cli::write_simulation(&out_dir.join(SIMULATION_FILE), &rows)?;
    cli::write_json(&out_dir.join(SUMMARY_FILE), &cells)?;
    let params = serde_json::json!({
        "n_list": n_list, "trials": trials, "rule": rule, "resolution": resolution, "seed": seed
    });
    cli::write_manifest(out_dir, "verify-boundary", params, started, &[SIMULATION_FILE, SUMMARY_FILE])?;
    Ok(all_pass)
}

fn cmd_metrics(snapshot: &Path, truth: &Path, domain: &str, eps_rel: f64, max_iter: usize, seed: u64) -> anyhow::Result<()> {
    let domain: cfgflow::domains::DomainSpec =
        serde_json::from_str(domain).map_err(|e| Error::Config(format!("--domain: {e}")))?;
    let domain = domain.build()?;
    let x = cli::read_points(snapshot).with_context(|| format!("reading {}", snapshot.display()))?;
    let y = cli::read_points(truth).with_context(|| format!("reading {}", truth.display()))?;
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch { expected: y.ncols(), got: x.ncols() }.into());
    }
    if x.ncols() != domain.dim() {
        return Err(Error::DimensionMismatch { expected: domain.dim(), got: x.ncols() }.into());
    }
    let opts = SinkhornOptions { eps_rel, max_iter, ..Default::default() };
    let reference = MetricReference::new(y, opts, seed)?;
    let report = reference.report(&domain, x.view())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_oracle_sample(setup: &RunSetup, n: usize, output: Option<&Path>) -> anyhow::Result<()> {
    let started = cli::unix_now();
    let config = setup.load()?;
    let target = config.build_target()?;
    let (x, stats) = oracle::rejection_sample_with_stats(&target, n, config.seed)?;
    let dir = PathBuf::from(&config.out_dir);
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| dir.join("truth.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    cli::write_snapshots(&path, &[Snapshot { iteration: 0, positions: x }])?;
    eprintln!("accepted {} of {} draws (rate {:.4})", stats.accepted, stats.drawn, stats.rate());
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or(SNAPSHOT_FILE);
    let params = serde_json::json!({"target": config.target, "domain": config.domain, "n": n, "seed": config.seed});
    cli::write_manifest(parent, "oracle-sample", params, started, &[name])?;
    Ok(())
}

/// 2 for input and schema problems, 3 for numerical blow-up, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } => 3,
                Error::Config(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Malformed { .. }
                | Error::DimensionMismatch { .. }
                | Error::ShapeMismatch(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Run { setup, quiet } => cmd_run(setup, *quiet).map(|()| true),
        Command::VerifyBoundary { max_n, trials, h0, fixed_h, resolution, seed, out_dir } => {
            cmd_verify_boundary(*max_n, *trials, *h0, *fixed_h, *resolution, *seed, out_dir)
        }
        Command::Metrics { snapshot, truth, domain, eps_rel, max_iter, seed } => {
            cmd_metrics(snapshot, truth, domain, *eps_rel, *max_iter, *seed).map(|()| true)
        }
        Command::OracleSample { setup, n, output } => cmd_oracle_sample(setup, *n, output.as_deref()).map(|()| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
