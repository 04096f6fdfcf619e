//! Experiment drivers: single runs, link-failure sweeps, algorithm
//! comparisons and certificates.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ggn_core::analysis::{CertificateInputs, ConvergenceCertificate, ScheduleKind};
use ggn_core::ggn::{
    diffusion_baseline_run, ggn_run_from, max_pairwise_disagreement, site_metrics, GgnConfig,
    GgnTrajectory, SharedSite, StepSchedule,
};
use ggn_core::gossip::{build_cse_weights, GossipConfig, GossipProcess, Protocol, Topology};
use ggn_core::nlls::{
    estimate_constants, solve_centralized, stationarity_residual, BoxSet, StateVector,
};
use ggn_core::psse::{
    build_nlls_sites, default_box, ieee30, mse_metrics, parse_matpower_case, parse_true_state,
    partition_sites, site_topology, solve_power_flow, streaming_snapshots, GridModel,
    MeasurementPlan, MeasurementSet, PowerFlowOptions, PowerState,
};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::{
    Algorithm, CertScheduleSpec, ExperimentConfig, ProtocolKind, StepKind, TopologyKind,
    BUILTIN_IEEE30,
};
use crate::error::CliError;
use crate::metrics::{average_rows, totals, write_rows, MetricsRow, TotalsRow};

/// Offset separating the gossip random stream from the noise stream.
const GOSSIP_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Everything that is fixed across repetitions.
#[derive(Debug, Clone)]
pub struct Instance {
    pub grid: Arc<GridModel>,
    pub truth: PowerState,
    pub plan: MeasurementPlan,
    pub topology: Topology,
    pub bounds: BoxSet,
    pub x0: StateVector,
    pub noise_floor: f64,
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance, CliError> {
    let grid = if cfg.case == BUILTIN_IEEE30 {
        ieee30()
    } else {
        let text = read_input(Path::new(&cfg.case))?;
        parse_matpower_case(&text).map_err(|e| CliError::core(format!("case '{}'", cfg.case), e))?
    };
    let grid = Arc::new(grid);
    let truth = match &cfg.true_state {
        Some(path) => parse_true_state(&grid, &read_input(path)?)
            .map_err(|e| CliError::core(format!("true state '{}'", path.display()), e))?,
        None => {
            let opts = PowerFlowOptions {
                load_scale: cfg.load_scale,
                ..Default::default()
            };
            solve_power_flow(&grid, &opts)
                .map_err(|e| CliError::core("true-state power flow", e))?
        }
    };
    let plan = partition_sites(&grid, cfg.sites, cfg.partition).map_err(|e| CliError::Config {
        field: "sites".into(),
        message: e.to_string(),
    })?;
    let topology = match cfg.gossip.topology {
        TopologyKind::Grid => {
            site_topology(&grid, &plan).map_err(|e| CliError::core("site topology", e))?
        }
        TopologyKind::Complete => Topology::complete(cfg.sites),
    };
    if cfg.sites > 1 && !topology.is_connected() {
        return Err(CliError::Config {
            field: "gossip.topology".into(),
            message: "site communication graph is not connected".into(),
        });
    }
    let bounds = default_box(&grid);
    let x0 = PowerState::flat(&grid).to_x(&grid);
    let noise_floor = plan.total_measurements() as f64 * cfg.sigma2;
    Ok(Instance {
        grid,
        truth,
        plan,
        topology,
        bounds,
        x0,
        noise_floor,
    })
}

/// Measurements, NLLS sites and centralized reference for one snapshot.
#[derive(Clone)]
pub struct SnapshotProblem {
    pub measurements: MeasurementSet,
    pub sites: Vec<SharedSite>,
    pub x_star: StateVector,
}

pub fn repetition_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    cfg.seed.wrapping_add(rep as u64)
}

pub fn snapshot_problems(
    inst: &Instance,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<SnapshotProblem>, CliError> {
    let sets = streaming_snapshots(
        &inst.grid,
        &inst.truth,
        &inst.plan,
        cfg.sigma2,
        cfg.snapshots,
        seed,
    )
    .map_err(|e| CliError::core("measurement generation", e))?;
    sets.into_iter()
        .map(|m| {
            let sites = build_nlls_sites(&inst.grid, &inst.plan, &m)
                .map_err(|e| CliError::core("site build", e))?;
            let reference = solve_centralized(&sites, &inst.x0, 1.0, &inst.bounds, 1e-12, 100)
                .map_err(|e| {
                    CliError::core(format!("reference solve, snapshot {}", m.snapshot), e)
                })?;
            Ok(SnapshotProblem {
                measurements: m,
                sites,
                x_star: reference.x,
            })
        })
        .collect()
}

pub fn gossip_config(cfg: &ExperimentConfig, inst: &Instance, seed: u64) -> GossipConfig {
    let g = &cfg.gossip;
    let mut gc = match g.protocol {
        ProtocolKind::Cse => GossipConfig::cse(inst.topology.clone(), g.beta),
        ProtocolKind::Ure => GossipConfig::ure(inst.topology.clone(), g.beta, g.link_failure_prob),
    };
    gc.link_failure_prob = g.link_failure_prob;
    gc.comm_interval = g.comm_interval;
    gc.with_seed(seed.wrapping_add(GOSSIP_SEED_OFFSET))
}

pub fn ggn_config(cfg: &ExperimentConfig) -> GgnConfig {
    GgnConfig {
        alpha: cfg.ggn.alpha,
        schedule: cfg.ggn.schedule(),
        max_updates: cfg.ggn.max_updates,
        stop_tol: cfg.ggn.stop_tol,
        ridge: cfg.ggn.ridge,
        diagnostics: cfg.ggn.diagnostics,
    }
}

fn step_schedule(cfg: &ExperimentConfig, c: f64) -> StepSchedule {
    match cfg.diffusion.step_kind {
        StepKind::Diminishing => StepSchedule::Diminishing(c),
        StepKind::Constant => StepSchedule::Constant(c),
    }
}

/// Output of one repetition.
pub struct RepetitionOutput {
    pub rep: usize,
    pub rows: Vec<MetricsRow>,
    pub snapshots: Vec<SnapshotProblem>,
    /// GGN trajectories per snapshot (empty for other algorithms).
    pub ggn: Vec<GgnTrajectory>,
    /// Per-agent iterates at the end of the last snapshot.
    pub final_iterates: Vec<StateVector>,
}

impl RepetitionOutput {
    /// Largest global stationarity residual `||sum_i G_i^T g_i||` over the
    /// agents' final iterates, on the last snapshot.
    pub fn final_stationarity(&self) -> f64 {
        let sites = &self.snapshots.last().expect("at least one snapshot").sites;
        self.final_iterates
            .iter()
            .map(|x| stationarity_residual(sites, x))
            .fold(0.0, f64::max)
    }
}

struct RowContext<'a> {
    inst: &'a Instance,
    run_id: String,
    snapshot: usize,
    problem: &'a SnapshotProblem,
}

impl RowContext<'_> {
    fn push(
        &self,
        rows: &mut Vec<MetricsRow>,
        update: usize,
        exchange: usize,
        iterates: &[StateVector],
        discrepancy: Option<&[f64]>,
    ) {
        let (val, grad) = site_metrics(&self.problem.sites, iterates);
        let mse = mse_metrics(&self.inst.grid, iterates, &self.inst.truth);
        let disagreement = max_pairwise_disagreement(iterates);
        for (i, x) in iterates.iter().enumerate() {
            rows.push(MetricsRow {
                run_id: self.run_id.clone(),
                snapshot: self.snapshot,
                update,
                exchange,
                agent: i,
                val: val[i],
                grad: grad[i],
                mse_v: mse.mse_v[i],
                mse_theta: mse.mse_theta[i],
                disagreement,
                discrepancy: discrepancy.map(|d| d[i]),
                error_to_reference: (x - &self.problem.x_star).norm(),
            });
        }
    }
}

/// Run repetition `rep`; `diffusion_step` selects the step constant for the
/// diffusion baseline.
pub fn run_repetition(
    cfg: &ExperimentConfig,
    inst: &Instance,
    rep: usize,
    diffusion_step: f64,
) -> Result<RepetitionOutput, CliError> {
    let seed = repetition_seed(cfg, rep);
    log::debug!("repetition {rep}: seed {seed}");
    let snapshots = snapshot_problems(inst, cfg, seed)?;
    let n_agents = cfg.sites;
    let mut gossip = GossipProcess::new(gossip_config(cfg, inst, seed))
        .map_err(|e| CliError::core("gossip configuration", e))?;
    let mut starts = vec![inst.x0.clone(); n_agents];
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    let mut exchange_offset = 0;
    let run_id = format!("{rep}");

    for (t, problem) in snapshots.iter().enumerate() {
        let ctx = RowContext {
            inst,
            run_id: run_id.clone(),
            snapshot: t,
            problem,
        };
        let context = |what: &str| format!("repetition {rep}, snapshot {t}, {what}");
        match cfg.algorithm {
            Algorithm::Ggn => {
                let tr = ggn_run_from(
                    &problem.sites,
                    &inst.bounds,
                    &mut gossip,
                    &ggn_config(cfg),
                    starts,
                )
                .map_err(|e| CliError::core(context("ggn"), e))?;
                for (k, xs) in tr.iterates.iter().enumerate() {
                    let exchange = exchange_offset
                        + if k == 0 {
                            0
                        } else {
                            tr.updates[k - 1].cumulative_exchanges
                        };
                    let disc = tr
                        .updates
                        .get(k)
                        .and_then(|u| u.diagnostics.as_ref())
                        .map(|d| d.discrepancy.as_slice());
                    ctx.push(&mut rows, k, exchange, xs, disc);
                }
                exchange_offset += tr.updates.last().map_or(0, |u| u.cumulative_exchanges);
                starts = tr.iterates.last().expect("nonempty").clone();
                trajectories.push(tr);
            }
            Algorithm::Centralized => {
                let c = &cfg.centralized;
                let sol = solve_centralized(
                    &problem.sites,
                    &starts[0],
                    c.alpha,
                    &inst.bounds,
                    c.tol,
                    c.max_iter,
                )
                .map_err(|e| CliError::core(context("centralized"), e))?;
                for (k, x) in sol.trajectory.iter().enumerate() {
                    ctx.push(&mut rows, k, 0, &vec![x.clone(); n_agents], None);
                }
                starts = vec![sol.x; n_agents];
            }
            Algorithm::Diffusion => {
                let total = cfg.diffusion.total_exchanges;
                let tr = diffusion_baseline_run(
                    &problem.sites,
                    &inst.bounds,
                    &mut gossip,
                    step_schedule(cfg, diffusion_step),
                    total,
                    starts,
                )
                .map_err(|e| CliError::core(context("diffusion"), e))?;
                for (l, xs) in tr.iterates.iter().enumerate() {
                    ctx.push(&mut rows, l, exchange_offset + l, xs, None);
                }
                exchange_offset += total;
                starts = tr.iterates.last().expect("nonempty").clone();
            }
        }
    }
    Ok(RepetitionOutput {
        rep,
        rows,
        snapshots,
        ggn: trajectories,
        final_iterates: starts,
    })
}

/// Run every repetition in parallel; results are in repetition order.
pub fn run_repetitions(
    cfg: &ExperimentConfig,
    inst: &Instance,
    diffusion_step: f64,
) -> Result<Vec<RepetitionOutput>, CliError> {
    (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(cfg, inst, r, diffusion_step))
        .collect()
}

/// Estimate problem constants on the certification box around the
/// operating region and build the certificate.
pub fn compute_certificate(
    cfg: &ExperimentConfig,
    inst: &Instance,
    problem: &SnapshotProblem,
) -> Result<ConvergenceCertificate, CliError> {
    let c = &cfg.certificate;
    let n = inst.grid.n_buses();
    let nu = inst.grid.n_unknowns();
    let lower = DVector::from_fn(
        nu,
        |i, _| if i < n - 1 { -c.theta_bound } else { c.v_lower },
    );
    let upper = DVector::from_fn(nu, |i, _| if i < n - 1 { c.theta_bound } else { c.v_upper });
    let cbox = BoxSet::new(lower, upper).map_err(|e| CliError::core("certificate box", e))?;
    let constants = estimate_constants(&problem.sites, &cbox, c.samples, cfg.seed)
        .map_err(|e| CliError::core("constant estimation", e))?
        .with_reference(&problem.sites, &problem.x_star);
    let eta = match cfg.gossip.protocol {
        _ if cfg.sites == 1 => 1.0,
        ProtocolKind::Cse => build_cse_weights(&inst.topology, cfg.gossip.beta)
            .map_err(|e| CliError::core("CSE weights", e))?
            .eta(),
        ProtocolKind::Ure => cfg.gossip.beta.min(1.0 - cfg.gossip.beta),
    };
    let schedule = match c.schedule {
        CertScheduleSpec::Constant => ScheduleKind::Constant,
        CertScheduleSpec::Incrementing => ScheduleKind::Incrementing,
    };
    ConvergenceCertificate::compute(CertificateInputs {
        constants,
        alpha: cfg.ggn.alpha,
        n_agents: cfg.sites,
        n_unknowns: nu,
        eta,
        comm_interval: cfg.gossip.comm_interval,
        xi: c.xi,
        schedule,
    })
    .map_err(|e| CliError::core("certificate", e))
}

/// Key facts about the last point of a mean trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalMetrics {
    pub initial: TotalsRow,
    pub last: TotalsRow,
    pub agents_below_100x_floor: usize,
    pub mse_v_per_agent: Vec<f64>,
}

pub fn final_metrics(mean_rows: &[MetricsRow], noise_floor: f64) -> FinalMetrics {
    let t = totals(mean_rows);
    let last = t.last().expect("nonempty trace").clone();
    let final_rows: Vec<&MetricsRow> = mean_rows
        .iter()
        .filter(|r| {
            (r.snapshot, r.update, r.exchange) == (last.snapshot, last.update, last.exchange)
        })
        .collect();
    FinalMetrics {
        initial: t[0].clone(),
        agents_below_100x_floor: final_rows
            .iter()
            .filter(|r| r.val.is_finite() && r.val < 100.0 * noise_floor)
            .count(),
        mse_v_per_agent: final_rows.iter().map(|r| r.mse_v).collect(),
        last,
    }
}

pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub instance: Instance,
    pub repetitions: Vec<RepetitionOutput>,
    pub mean_rows: Vec<MetricsRow>,
    pub final_metrics: FinalMetrics,
    pub certificate: Option<ConvergenceCertificate>,
    pub summary: Vec<(String, String)>,
    pub wall_clock_seconds: f64,
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_key_values(path: &Path, kv: &[(String, String)]) -> Result<(), CliError> {
    let text: String = kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn summary_pairs(
    cfg: &ExperimentConfig,
    inst: &Instance,
    fm: &FinalMetrics,
    reps: &[RepetitionOutput],
    cert: Option<&ConvergenceCertificate>,
    seconds: f64,
) -> Vec<(String, String)> {
    let mut kv: Vec<(String, String)> = vec![
        ("algorithm", cfg.algorithm.name().to_string()),
        ("case", cfg.case.clone()),
        ("buses", inst.grid.n_buses().to_string()),
        ("sites", cfg.sites.to_string()),
        ("measurements", inst.plan.total_measurements().to_string()),
        ("unknowns", inst.grid.n_unknowns().to_string()),
        ("repetitions", cfg.repetitions.to_string()),
        ("seed", cfg.seed.to_string()),
        ("sigma2", cfg.sigma2.to_string()),
        ("snapshots", cfg.snapshots.to_string()),
        (
            "link_failure_prob",
            cfg.gossip.link_failure_prob.to_string(),
        ),
        ("noise_floor", inst.noise_floor.to_string()),
        ("initial.val", fm.initial.val.to_string()),
        ("initial.grad", fm.initial.grad.to_string()),
        ("final.snapshot", fm.last.snapshot.to_string()),
        ("final.update", fm.last.update.to_string()),
        ("final.exchange", fm.last.exchange.to_string()),
        ("final.val", fm.last.val.to_string()),
        ("final.max_agent_val", fm.last.max_val.to_string()),
        ("final.grad", fm.last.grad.to_string()),
        ("final.mse_v", fm.last.mse_v.to_string()),
        ("final.mse_theta", fm.last.mse_theta.to_string()),
        ("final.disagreement", fm.last.disagreement.to_string()),
        (
            "final.agents_below_100x_floor",
            fm.agents_below_100x_floor.to_string(),
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let stationarity = reps
        .iter()
        .map(RepetitionOutput::final_stationarity)
        .sum::<f64>()
        / reps.len() as f64;
    kv.push(("final.stationarity".into(), stationarity.to_string()));
    if cfg.algorithm == Algorithm::Ggn {
        let shifts: Vec<f64> = reps
            .iter()
            .flat_map(|r| r.ggn.iter())
            .flat_map(|t| t.updates.iter())
            .flat_map(|u| u.ridge_shifts.iter().copied())
            .collect();
        let fallbacks = shifts.iter().filter(|s| **s > 0.0).count();
        kv.push((
            "ridge.fallbacks".into(),
            format!("{fallbacks}/{}", shifts.len()),
        ));
        kv.push((
            "ridge.max_shift".into(),
            shifts.iter().copied().fold(0.0, f64::max).to_string(),
        ));
    }
    if let Some(c) = cert {
        kv.extend(c.to_key_values());
    }
    kv.push(("wall_clock_seconds".into(), format!("{seconds:.3}")));
    kv
}

/// Run the configured algorithm over all repetitions and write
/// `rep_NNN.csv`, `mean.csv` and `summary.txt` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary, CliError> {
    let start = Instant::now();
    let inst = build_instance(cfg)?;
    log::info!(
        "{} on {} buses, {} sites, {} repetitions",
        cfg.algorithm.name(),
        inst.grid.n_buses(),
        cfg.sites,
        cfg.repetitions
    );
    let reps = run_repetitions(cfg, &inst, cfg.diffusion.steps[0])?;
    let mean_rows = average_rows(&reps.iter().map(|r| r.rows.clone()).collect::<Vec<_>>());
    let certificate = if cfg.certificate.enabled {
        Some(compute_certificate(cfg, &inst, &reps[0].snapshots[0])?)
    } else {
        None
    };
    let fm = final_metrics(&mean_rows, inst.noise_floor);

    create_dir(&cfg.output_dir)?;
    for r in &reps {
        write_rows(
            &cfg.output_dir.join(format!("rep_{:03}.csv", r.rep)),
            &r.rows,
        )?;
    }
    write_rows(&cfg.output_dir.join("mean.csv"), &mean_rows)?;
    let seconds = start.elapsed().as_secs_f64();
    let summary = summary_pairs(cfg, &inst, &fm, &reps, certificate.as_ref(), seconds);
    write_key_values(&cfg.output_dir.join("summary.txt"), &summary)?;
    Ok(ExperimentSummary {
        output_dir: cfg.output_dir.clone(),
        instance: inst,
        repetitions: reps,
        mean_rows,
        final_metrics: fm,
        certificate,
        summary,
        wall_clock_seconds: seconds,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub p: f64,
    pub final_val: f64,
    pub final_mse_v_mean: f64,
    pub final_mse_v_min: f64,
    pub final_mse_v_max: f64,
    pub final_mse_v_spread: f64,
    pub final_mse_theta_mean: f64,
    pub final_disagreement: f64,
    /// Final over mid-run disagreement; above 1 means agents drift apart.
    pub disagreement_growth: f64,
    pub agents_below_100x_floor: usize,
    pub n_agents: usize,
    pub converged: bool,
}

/// Disagreement may grow by at most this factor over the second half of
/// the run before the run is flagged non-convergent.
pub const DISAGREEMENT_GROWTH_LIMIT: f64 = 1.5;

fn format_p(p: f64) -> String {
    format!("p_{p}")
}

/// One full run per failure probability, each in `output_dir/p_<p>/`, plus
/// `degradation.csv` in `output_dir`.
pub fn run_failure_sweep(
    cfg: &ExperimentConfig,
    p_values: &[f64],
) -> Result<Vec<SweepRow>, CliError> {
    if cfg.algorithm != Algorithm::Ggn || cfg.gossip.protocol != ProtocolKind::Ure {
        return Err(CliError::Invalid(
            "sweep-failures needs algorithm = \"ggn\" and gossip.protocol = \"ure\"".into(),
        ));
    }
    if p_values.is_empty() {
        return Err(CliError::Invalid("no failure probabilities given".into()));
    }
    let mut rows = Vec::new();
    for &p in p_values {
        let mut c = cfg.clone();
        c.gossip.link_failure_prob = p;
        c.output_dir = cfg.output_dir.join(format_p(p));
        c.validate()?;
        let s = run_experiment(&c)?;
        let fm = &s.final_metrics;
        let t = totals(&s.mean_rows);
        let mid = &t[t.len() / 2];
        let growth = if mid.disagreement > 0.0 {
            fm.last.disagreement / mid.disagreement
        } else if fm.last.disagreement > 0.0 {
            f64::INFINITY
        } else {
            1.0
        };
        let mse = &fm.mse_v_per_agent;
        let finite = fm.last.val.is_finite() && fm.last.disagreement.is_finite();
        rows.push(SweepRow {
            p,
            final_val: fm.last.val,
            final_mse_v_mean: mse.iter().sum::<f64>() / mse.len() as f64,
            final_mse_v_min: mse.iter().copied().fold(f64::INFINITY, f64::min),
            final_mse_v_max: mse.iter().copied().fold(0.0, f64::max),
            final_mse_v_spread: mse.iter().copied().fold(0.0, f64::max)
                - mse.iter().copied().fold(f64::INFINITY, f64::min),
            final_mse_theta_mean: fm.last.mse_theta,
            final_disagreement: fm.last.disagreement,
            disagreement_growth: growth,
            agents_below_100x_floor: fm.agents_below_100x_floor,
            n_agents: cfg.sites,
            converged: finite
                && fm.agents_below_100x_floor == cfg.sites
                && growth <= DISAGREEMENT_GROWTH_LIMIT,
        });
    }
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("degradation.csv");
    let csv_err = |e| CliError::Csv {
        path: path.clone(),
        source: e,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(rows)
}

/// Rep-averaged network totals of one algorithm against cumulative exchanges.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub algorithm: Algorithm,
    pub step: Option<f64>,
    /// `(exchanges, Val, Grad)`; centralized runs use the update index.
    pub points: Vec<(usize, f64, f64)>,
}

impl Series {
    /// Latest point at or before `exchanges`.
    pub fn at(&self, exchanges: usize) -> Option<(usize, f64, f64)> {
        self.points.iter().rev().find(|p| p.0 <= exchanges).copied()
    }

    pub fn budget(&self) -> usize {
        self.points.last().map_or(0, |p| p.0)
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub a: Vec<Series>,
    pub b: Vec<Series>,
    /// Largest exchange count reached by every series.
    pub common_budget: usize,
    /// `|Val_A - Val_B|` at the common budget, with the best series of B.
    pub val_gap: f64,
    pub grad_gap: f64,
}

fn ensure_same_instance(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<(), CliError> {
    let checks: [(&str, bool); 9] = [
        ("case", a.case == b.case),
        ("true_state", a.true_state == b.true_state),
        ("sites", a.sites == b.sites),
        ("partition", a.partition == b.partition),
        ("sigma2", a.sigma2 == b.sigma2),
        ("snapshots", a.snapshots == b.snapshots),
        ("load_scale", a.load_scale == b.load_scale),
        ("seed", a.seed == b.seed),
        ("repetitions", a.repetitions == b.repetitions),
    ];
    match checks.iter().find(|(_, same)| !same) {
        Some((field, _)) => Err(CliError::Invalid(format!(
            "mismatched problem instances: '{field}' differs between the two configs"
        ))),
        None => Ok(()),
    }
}

fn series_for(cfg: &ExperimentConfig, inst: &Instance) -> Result<Vec<Series>, CliError> {
    let steps: Vec<Option<f64>> = match cfg.algorithm {
        Algorithm::Diffusion => cfg.diffusion.steps.iter().map(|c| Some(*c)).collect(),
        _ => vec![None],
    };
    steps
        .into_iter()
        .map(|step| {
            let reps = run_repetitions(cfg, inst, step.unwrap_or(0.0))?;
            let mean = average_rows(&reps.iter().map(|r| r.rows.clone()).collect::<Vec<_>>());
            let points = totals(&mean)
                .into_iter()
                .enumerate()
                .map(|(j, t)| {
                    let x = if cfg.algorithm == Algorithm::Centralized {
                        j
                    } else {
                        t.exchange
                    };
                    (x, t.val, t.grad)
                })
                .collect();
            let label = match step {
                Some(c) => format!("{}(c={c})", cfg.algorithm.name()),
                None => cfg.algorithm.name().to_string(),
            };
            Ok(Series {
                label,
                algorithm: cfg.algorithm,
                step,
                points,
            })
        })
        .collect()
}

/// Run both configs on the same instance and align their traces by total
/// gossip exchanges. Writes `comparison.csv` and `comparison.txt` into A's
/// output directory.
pub fn compare_algorithms(
    a: &ExperimentConfig,
    b: &ExperimentConfig,
) -> Result<Comparison, CliError> {
    ensure_same_instance(a, b)?;
    let inst = build_instance(a)?;
    let sa = series_for(a, &inst)?;
    let sb = series_for(b, &inst)?;
    let common_budget = sa.iter().chain(&sb).map(Series::budget).min().unwrap_or(0);
    let best = |s: &[Series]| {
        s.iter()
            .filter_map(|x| x.at(common_budget))
            .min_by(|p, q| p.2.total_cmp(&q.2))
            .unwrap_or((0, f64::NAN, f64::NAN))
    };
    let (pa, pb) = (best(&sa), best(&sb));
    let cmp = Comparison {
        val_gap: (pa.1 - pb.1).abs(),
        grad_gap: (pa.2 - pb.2).abs(),
        common_budget,
        a: sa,
        b: sb,
    };

    create_dir(&a.output_dir)?;
    let path = a.output_dir.join("comparison.csv");
    let csv_err = |e| CliError::Csv {
        path: path.clone(),
        source: e,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record([
        "config",
        "series",
        "algorithm",
        "step",
        "exchanges",
        "val",
        "grad",
    ])
    .map_err(csv_err)?;
    for (tag, list) in [("A", &cmp.a), ("B", &cmp.b)] {
        for s in list.iter() {
            let step = s.step.map_or_else(String::new, |c| c.to_string());
            for (x, v, g) in &s.points {
                w.write_record([
                    tag,
                    &s.label,
                    s.algorithm.name(),
                    &step,
                    &x.to_string(),
                    &v.to_string(),
                    &g.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.clone(),
        source: e,
    })?;

    let mut kv = vec![("common_budget".to_string(), common_budget.to_string())];
    for (tag, list) in [("a", &cmp.a), ("b", &cmp.b)] {
        for s in list.iter() {
            if let Some((x, v, g)) = s.at(common_budget) {
                kv.push((
                    format!("{tag}.{}.at_common.exchanges", s.label),
                    x.to_string(),
                ));
                kv.push((format!("{tag}.{}.at_common.val", s.label), v.to_string()));
                kv.push((format!("{tag}.{}.at_common.grad", s.label), g.to_string()));
            }
            if let Some((x, v, g)) = s.points.last() {
                kv.push((format!("{tag}.{}.final.exchanges", s.label), x.to_string()));
                kv.push((format!("{tag}.{}.final.val", s.label), v.to_string()));
                kv.push((format!("{tag}.{}.final.grad", s.label), g.to_string()));
            }
        }
    }
    kv.push(("gap.val".into(), cmp.val_gap.to_string()));
    kv.push(("gap.grad".into(), cmp.grad_gap.to_string()));
    write_key_values(&a.output_dir.join("comparison.txt"), &kv)?;
    Ok(cmp)
}

/// Build the certificate for the first repetition's first snapshot.
pub fn certify(cfg: &ExperimentConfig) -> Result<ConvergenceCertificate, CliError> {
    let inst = build_instance(cfg)?;
    let problems = snapshot_problems(&inst, cfg, repetition_seed(cfg, 0))?;
    compute_certificate(cfg, &inst, &problems[0])
}

/// Gossip protocol in core terms, for reporting.
pub fn protocol_of(cfg: &ExperimentConfig) -> Protocol {
    match cfg.gossip.protocol {
        ProtocolKind::Cse => Protocol::Cse,
        ProtocolKind::Ure => Protocol::Ure,
    }
}
