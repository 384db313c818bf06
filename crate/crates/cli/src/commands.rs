use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, ValueEnum};
use serde::Serialize;

use ofps_core::bayes::{
    aggregate, best_pc_phase, simulate_many, Instance, PhaseGrid, Strategy, TwoStepSchedule, PC_SCAN_POINTS,
};
use ofps_core::channels::{apply_loss, Transmission};
use ofps_core::fock::{FockCutoff, PhaseKind, TwoModePureState};
use ofps_core::io::{self, Documented};
use ofps_core::metrology::{parity_povm, pc_povm, qfi, sldm_povm, Povm, ProbabilityModel};
use ofps_core::optimize::{
    optimize_probe, random_phase_validation, transmission_sweep, CobylaConfig, PhaseValidation, ProbeSearchProblem,
    ProbeSearchResult,
};
use ofps_core::probes::{noiseless_ofps, OfpsSpec};

use crate::output::{sig, write_with_manifest, RunManifest};

pub enum Outcome {
    Done,
    ValidationFailed(String),
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("transmission must lie in [0, 1], got {t}"))
    }
}

/// One transmission axis.
#[derive(Clone, Debug, Serialize)]
pub struct Axis(Vec<f64>);

/// Explicit `(T1, T2)` points.
#[derive(Clone, Debug, Serialize)]
pub struct Points(Vec<(f64, f64)>);

/// `LO:HI:COUNT`, evenly spaced and inclusive; `COUNT = 1` gives `LO`.
fn axis(s: &str) -> std::result::Result<Axis, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, count] = parts.as_slice() else {
        return Err(format!("expected LO:HI:COUNT, got {s:?}"));
    };
    let lo = unit_interval(lo)?;
    let hi = unit_interval(hi)?;
    let count: usize = count.parse().map_err(|e| format!("count: {e}"))?;
    if count == 0 {
        return Err("grid axis must have at least one point".into());
    }
    if count == 1 {
        return Ok(Axis(vec![lo]));
    }
    Ok(Axis(
        (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect(),
    ))
}

/// `T1,T2;T1,T2;…`.
fn point_list(s: &str) -> std::result::Result<Points, String> {
    let pts: Vec<(f64, f64)> = s
        .split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once(',').ok_or_else(|| format!("expected T1,T2 in {p:?}"))?;
            Ok((unit_interval(a.trim())?, unit_interval(b.trim())?))
        })
        .collect::<std::result::Result<_, String>>()?;
    if pts.is_empty() {
        return Err("point list is empty".into());
    }
    Ok(Points(pts))
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Linear,
    Nonlinear,
}

impl From<Kind> for PhaseKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Linear => PhaseKind::Linear,
            Kind::Nonlinear => PhaseKind::Nonlinear,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct CobylaArgs {
    /// Independent starts (the first is the analytical state).
    #[arg(long, default_value_t = 16)]
    restarts: usize,
    #[arg(long, default_value_t = 20_000)]
    max_evals: usize,
    #[arg(long, default_value_t = 0.5)]
    rho_begin: f64,
    #[arg(long, default_value_t = 1e-7)]
    rho_end: f64,
    /// Slack on the normalization and mean-number constraints.
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CobylaArgs {
    fn config(&self) -> CobylaConfig {
        CobylaConfig {
            rho_begin: self.rho_begin,
            rho_end: self.rho_end,
            max_evals: self.max_evals,
            constraint_tolerance: self.tolerance,
            restarts: self.restarts,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct OfpsArgs {
    /// Fock cutoff N.
    #[arg(long)]
    n: usize,
    /// Mean particle number.
    #[arg(long)]
    nbar: f64,
    #[arg(long, value_enum, default_value = "linear")]
    kind: Kind,
    /// Relative phases θ₁,θ₂,θ₃ (comma separated).
    #[arg(long, value_delimiter = ',')]
    phases: Vec<f64>,
    /// Write the state as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the amplitude table as CSV.
    #[arg(long)]
    amplitudes: Option<PathBuf>,
}

fn print_state(state: &TwoModePureState) {
    println!("amplitudes (nonzero):");
    for (i, j) in state.cutoff().kets() {
        let z = state.amplitude(i, j);
        if z.norm() > 1e-12 {
            if z.im == 0.0 {
                println!("  |{i},{j}>  {}", sig(z.re));
            } else {
                println!("  |{i},{j}>  {} + {}i", sig(z.re), sig(z.im));
            }
        }
    }
}

fn write_state_outputs(
    state_json: Option<(&PathBuf, &impl Serialize)>,
    amplitudes: Option<&PathBuf>,
    state: &TwoModePureState,
    manifest: &RunManifest,
) -> Result<()> {
    if let Some((path, doc)) = state_json {
        write_with_manifest(path, manifest, |w| {
            serde_json::to_writer_pretty(&mut *w, doc)?;
            writeln!(w)?;
            Ok(())
        })?;
    }
    if let Some(path) = amplitudes {
        write_with_manifest(path, manifest, |w| Ok(io::write_amplitude_csv(state, w)?))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct OfpsReport<'a> {
    spec: &'a OfpsSpec,
    qfi: f64,
    state: &'a TwoModePureState,
}

pub fn ofps(a: &OfpsArgs) -> Result<Outcome> {
    let spec = OfpsSpec::new(FockCutoff::new(a.n)?, a.nbar, a.kind.into())?.with_phases(a.phases.clone());
    let state = noiseless_ofps(&spec)?;
    let f = qfi(
        &ofps_core::channels::DensityMatrix::pure(&state),
        &spec.phase_kind.generator(spec.cutoff),
    )?;
    println!(
        "N = {}, nbar = {}, kind = {}, regime = {:?}",
        a.n,
        sig(a.nbar),
        spec.phase_kind,
        spec.regime()?
    );
    print_state(&state);
    println!("QFI = {}", sig(f));
    let manifest = RunManifest::new("ofps", a, None)?;
    let doc = Documented::new(OfpsReport {
        spec: &spec,
        qfi: f,
        state: &state,
    });
    write_state_outputs(a.out.as_ref().map(|p| (p, &doc)), a.amplitudes.as_ref(), &state, &manifest)?;
    Ok(Outcome::Done)
}

#[derive(Args, Debug, Serialize)]
pub struct OptimizeArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    nbar: f64,
    #[arg(long, value_parser = unit_interval)]
    t1: f64,
    #[arg(long, value_parser = unit_interval)]
    t2: f64,
    #[arg(long, value_enum, default_value = "linear")]
    kind: Kind,
    /// Search over complex coefficients.
    #[arg(long)]
    complex: bool,
    #[command(flatten)]
    cobyla: CobylaArgs,
    /// Random-phase trials checking that no phase pattern beats the real
    /// optimum.
    #[arg(long, value_name = "TRIALS")]
    validate_phases: Option<usize>,
    /// Result JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Amplitude table CSV (i, j, amplitude).
    #[arg(long)]
    amplitudes: Option<PathBuf>,
}

#[derive(Serialize)]
struct OptimizeReport<'a> {
    problem: &'a ProbeSearchProblem,
    config: &'a CobylaConfig,
    catalog_qfi: f64,
    qfi: f64,
    restart_index: usize,
    evals_used: usize,
    converged: bool,
    seed: u64,
    validation: Option<&'a PhaseValidation>,
    state: &'a TwoModePureState,
}

fn catalog_qfi_under_loss(problem: &ProbeSearchProblem) -> Result<f64> {
    let catalog = noiseless_ofps(&OfpsSpec::new(problem.cutoff, problem.nbar, problem.phase_kind)?)?;
    Ok(qfi(
        &apply_loss(&catalog, problem.trans)?,
        &problem.phase_kind.generator(problem.cutoff),
    )?)
}

fn search(n: usize, nbar: f64, t1: f64, t2: f64, kind: Kind, complex: bool, cfg: &CobylaConfig) -> Result<(ProbeSearchProblem, ProbeSearchResult)> {
    let mut problem = ProbeSearchProblem::new(FockCutoff::new(n)?, nbar, Transmission::new(t1, t2)?, kind.into())?;
    if complex {
        problem = problem.complex();
    }
    let result = optimize_probe(&problem, cfg).context("probe optimization failed")?;
    Ok((problem, result))
}

pub fn optimize(a: &OptimizeArgs) -> Result<Outcome> {
    let cfg = a.cobyla.config();
    let (problem, result) = search(a.n, a.nbar, a.t1, a.t2, a.kind, a.complex, &cfg)?;
    let catalog = catalog_qfi_under_loss(&problem)?;
    let validation = match a.validate_phases {
        Some(trials) => Some(random_phase_validation(&result, &problem, trials, cfg.seed)?),
        None => None,
    };
    println!("QFI (optimized)      = {}", sig(result.qfi));
    println!("QFI (analytical, lossy) = {}", sig(catalog));
    println!(
        "best restart {} of {}, {} evaluations, converged: {}",
        result.restart_index, cfg.restarts, result.evals_used, result.converged
    );
    print_state(&result.state);
    if let Some(v) = &validation {
        println!(
            "random phases: {} trials, max QFI {} -> {}",
            v.trials,
            sig(v.max_random_qfi),
            if v.pass { "pass" } else { "FAIL" }
        );
    }
    let manifest = RunManifest::new("optimize", a, Some(cfg.seed))?;
    let doc = Documented::new(OptimizeReport {
        problem: &problem,
        config: &cfg,
        catalog_qfi: catalog,
        qfi: result.qfi,
        restart_index: result.restart_index,
        evals_used: result.evals_used,
        converged: result.converged,
        seed: result.seed,
        validation: validation.as_ref(),
        state: &result.state,
    });
    write_state_outputs(a.out.as_ref().map(|p| (p, &doc)), a.amplitudes.as_ref(), &result.state, &manifest)?;
    match validation {
        Some(v) if !v.pass => Ok(Outcome::ValidationFailed(format!(
            "a random phase pattern reached QFI {} > {}",
            v.max_random_qfi, v.reference_qfi
        ))),
        _ => Ok(Outcome::Done),
    }
}

#[derive(Args, Debug, Serialize)]
#[command(group(ArgGroup::new("grid_spec").required(true).args(["grid", "points"])))]
pub struct SweepArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    nbar: f64,
    #[arg(long, value_enum, default_value = "linear")]
    kind: Kind,
    /// Grid `LO:HI:COUNT` on both transmission axes (T2 overridable).
    #[arg(long, value_parser = axis)]
    grid: Option<Axis>,
    /// Separate T2 axis `LO:HI:COUNT`.
    #[arg(long, value_parser = axis, requires = "grid")]
    t2_grid: Option<Axis>,
    /// Explicit points `T1,T2;T1,T2;...`.
    #[arg(long, value_parser = point_list, conflicts_with = "grid")]
    points: Option<Points>,
    #[command(flatten)]
    cobyla: CobylaArgs,
    /// CSV table (T1, T2, qfi, converged, seed, evals).
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// JSON table with the optimal state per point.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

pub fn sweep(a: &SweepArgs) -> Result<Outcome> {
    let grid: Vec<(f64, f64)> = match (&a.points, &a.grid) {
        (Some(p), _) => p.0.clone(),
        (None, Some(Axis(t1s))) => {
            let t2s = a.t2_grid.as_ref().map_or(t1s, |g| &g.0);
            t1s.iter().flat_map(|&x| t2s.iter().map(move |&y| (x, y))).collect()
        }
        (None, None) => bail!("no grid given"),
    };
    let cfg = a.cobyla.config();
    let template = ProbeSearchProblem::new(FockCutoff::new(a.n)?, a.nbar, Transmission::lossless(), a.kind.into())?;
    let table = transmission_sweep(&template, &grid, &cfg)?;
    println!("{:>8} {:>8} {:>12} {:>9}", "T1", "T2", "QFI", "converged");
    for p in &table.points {
        match &p.result {
            Some(r) => println!("{:>8} {:>8} {:>12} {:>9}", sig(p.t1), sig(p.t2), sig(r.qfi), r.converged),
            None => println!(
                "{:>8} {:>8} {:>12} {}",
                sig(p.t1),
                sig(p.t2),
                "-",
                p.error.as_deref().unwrap_or("")
            ),
        }
    }
    for v in &table.diagonal_violations {
        log::warn!(
            "QFI drops along T1 = T2 from {} at T = {} to {} at T = {}",
            v.qfi_low,
            v.t_low,
            v.qfi_high,
            v.t_high
        );
    }
    let manifest = RunManifest::new("sweep", a, Some(cfg.seed))?;
    if let Some(path) = &a.out_csv {
        write_with_manifest(path, &manifest, |w| Ok(io::write_sweep_csv(&table, w)?))?;
    }
    if let Some(path) = &a.out_json {
        write_with_manifest(path, &manifest, |w| {
            io::write_sweep_json(&table, &mut *w)?;
            writeln!(w)?;
            Ok(())
        })?;
    }
    let failed = table.points.iter().filter(|p| p.result.is_none()).count();
    if failed > 0 {
        bail!("{failed} sweep point(s) failed");
    }
    Ok(Outcome::Done)
}

/// Probe given by catalog parameters, by an optimization at the run's
/// transmissions, or by a file from an earlier run.
#[derive(Args, Debug, Serialize)]
#[command(group(ArgGroup::new("probe_spec").required(true).args(["n", "probe"])))]
pub struct ProbeArgs {
    #[arg(long, requires = "nbar")]
    n: Option<usize>,
    #[arg(long)]
    nbar: Option<f64>,
    /// Use the optimized state at the given transmissions instead of the
    /// analytical one.
    #[arg(long, requires = "n")]
    optimized: bool,
    /// State file (optimize/ofps JSON or amplitude CSV).
    #[arg(long, conflicts_with_all = ["n", "nbar"])]
    probe: Option<PathBuf>,
}

impl ProbeArgs {
    fn load(&self, kind: Kind, trans: Transmission, cobyla: &CobylaArgs) -> Result<TwoModePureState> {
        if let Some(path) = &self.probe {
            return io::read_state_file(path).with_context(|| format!("reading probe {}", path.display()));
        }
        let (Some(n), Some(nbar)) = (self.n, self.nbar) else {
            bail!("give --n and --nbar, or --probe");
        };
        if self.optimized {
            let (_, r) = search(n, nbar, trans.t1(), trans.t2(), kind, false, &cobyla.config())?;
            log::info!("optimized probe: QFI {}", r.qfi);
            return Ok(r.state);
        }
        Ok(noiseless_ofps(&OfpsSpec::new(FockCutoff::new(n)?, nbar, kind.into())?)?)
    }
}

#[derive(Args, Debug, Serialize)]
pub struct CurvesArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, value_parser = unit_interval)]
    t1: f64,
    #[arg(long, value_parser = unit_interval)]
    t2: f64,
    #[arg(long, value_enum, default_value = "linear")]
    kind: Kind,
    /// Measurements: `parity`, `pc`, `sldm:PHI` (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "parity,pc")]
    povm: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    phi_min: f64,
    #[arg(long, default_value_t = PI)]
    phi_max: f64,
    #[arg(long, default_value_t = 201)]
    phi_points: usize,
    #[command(flatten)]
    cobyla: CobylaArgs,
    /// CSV (phi, qfi, cfi per measurement).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_povm(spec: &str, instance: &Instance) -> Result<(String, Povm)> {
    let cutoff = instance.rho.cutoff();
    let s = spec.trim();
    Ok(match s {
        "parity" => ("parity".into(), parity_povm(cutoff)),
        "pc" => ("pc".into(), pc_povm(cutoff)),
        _ => match s.strip_prefix("sldm:") {
            Some(phi) => {
                let phi: f64 = phi.parse().with_context(|| format!("bad SLDM phase in {s:?}"))?;
                (format!("sldm@{phi}"), sldm_povm(&instance.rho, &instance.generator, phi)?)
            }
            None => bail!("unknown measurement {s:?} (use parity, pc or sldm:PHI)"),
        },
    })
}

pub fn curves(a: &CurvesArgs) -> Result<Outcome> {
    if a.phi_points < 2 || !(a.phi_min < a.phi_max) {
        bail!("need phi_min < phi_max and at least 2 points");
    }
    let trans = Transmission::new(a.t1, a.t2)?;
    let state = a.probe.load(a.kind, trans, &a.cobyla)?;
    let instance = Instance::from_probe(&state, trans, a.kind.into())?;
    let f = instance.qfi()?;
    let models: Vec<(String, ProbabilityModel)> = a
        .povm
        .iter()
        .map(|s| {
            let (label, povm) = parse_povm(s, &instance)?;
            Ok((label, instance.model(&povm)?))
        })
        .collect::<Result<_>>()?;
    let phis: Vec<f64> = (0..a.phi_points)
        .map(|k| a.phi_min + (a.phi_max - a.phi_min) * k as f64 / (a.phi_points - 1) as f64)
        .collect();
    let columns: Vec<Vec<f64>> = models
        .iter()
        .map(|(_, m)| ofps_core::par::map_slice(&phis, |&x| m.cfi(x).value))
        .collect();
    println!("QFI = {}", sig(f));
    for ((label, _), col) in models.iter().zip(&columns) {
        let (k, best) = col
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        println!("max CFI {label:>12} = {} at phi = {}", sig(best), sig(phis[k]));
    }
    if let Some(path) = &a.out {
        let manifest = RunManifest::new("curves", a, None)?;
        write_with_manifest(path, &manifest, |w| {
            let mut cw = csv::Writer::from_writer(w);
            let mut header = vec!["phi".to_string(), "qfi".to_string()];
            header.extend(models.iter().map(|(l, _)| format!("cfi_{l}")));
            cw.write_record(&header)?;
            for (k, x) in phis.iter().enumerate() {
                let mut row = vec![x.to_string(), f.to_string()];
                row.extend(columns.iter().map(|c| c[k].to_string()));
                cw.write_record(&row)?;
            }
            cw.flush()?;
            Ok(())
        })?;
    }
    Ok(Outcome::Done)
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    TwoStep,
    AdaptivePc,
    SldmAtTruth,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, value_parser = unit_interval)]
    t1: f64,
    #[arg(long, value_parser = unit_interval)]
    t2: f64,
    #[arg(long, value_enum, default_value = "linear")]
    kind: Kind,
    #[arg(long, default_value_t = 0.2)]
    phi_true: f64,
    #[arg(long, value_enum, default_value = "two-step")]
    strategy: StrategyArg,
    /// Counting pre-estimation iterations.
    #[arg(long, default_value_t = 50)]
    pre: usize,
    /// Iterations per SLDM stage (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "250,200")]
    stages: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    sims: usize,
    #[arg(long, default_value_t = 0.0)]
    grid_lower: f64,
    #[arg(long, default_value_t = PI / 6.0)]
    grid_upper: f64,
    #[arg(long, default_value_t = 1000)]
    grid_points: usize,
    #[command(flatten)]
    cobyla: CobylaArgs,
    /// Per-iteration records (JSON lines).
    #[arg(long)]
    out_jsonl: Option<PathBuf>,
    /// Cross-trajectory averages (CSV).
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

pub fn simulate(a: &SimulateArgs) -> Result<Outcome> {
    let trans = Transmission::new(a.t1, a.t2)?;
    let state = a.probe.load(a.kind, trans, &a.cobyla)?;
    let instance = Instance::from_probe(&state, trans, a.kind.into())?;
    let grid = PhaseGrid::new(a.grid_lower, a.grid_upper, a.grid_points)?;
    let schedule = TwoStepSchedule {
        pre_iterations: a.pre,
        sldm_stage_iterations: a.stages.clone(),
        total_iterations: a.pre + a.stages.iter().sum::<usize>(),
        simulations: a.sims,
    };
    let strategy = match a.strategy {
        StrategyArg::TwoStep => Strategy::TwoStep,
        StrategyArg::AdaptivePc => Strategy::AdaptivePc,
        StrategyArg::SldmAtTruth => Strategy::SldmAtTruth,
    };
    let seed = a.cobyla.seed;
    let trajectories = simulate_many(&instance, a.phi_true, &schedule, &strategy, &grid, seed)?;
    let f = instance.qfi()?;
    let (_, best_pc) = best_pc_phase(&instance, PC_SCAN_POINTS)?;
    let rows = aggregate(&trajectories, f, best_pc);
    println!("QFI = {}, max counting CFI = {}", sig(f), sig(best_pc));
    if let Some(last) = rows.last() {
        println!(
            "iteration {}: MSE = {}, 1/(mF) = {}, ratio = {}",
            last.iter,
            sig(last.mean_sq_error),
            sig(last.crb_qfi),
            sig(last.mean_sq_error / last.crb_qfi)
        );
    }
    let manifest = RunManifest::new("simulate", a, Some(seed))?;
    if let Some(path) = &a.out_jsonl {
        write_with_manifest(path, &manifest, |w| Ok(io::write_trajectories_jsonl(&trajectories, w)?))?;
    }
    if let Some(path) = &a.out_csv {
        write_with_manifest(path, &manifest, |w| Ok(io::write_aggregate_csv(&rows, w)?))?;
    }
    Ok(Outcome::Done)
}

