//! Monte-Carlo Bayesian phase estimation.
//!
//! Strategies:
//!
//! * two-step: particle-counting pre-estimation, then one or more stages with
//!   the SLD measurement built at the current estimate;
//! * adaptive counting: a control phase keeps the estimate at the point of
//!   maximal counting CFI;
//! * a fixed measurement for reference runs.
//!
//! The point estimator is the posterior mean on a discrete phase grid.

use std::f64::consts::{PI, TAU};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::channels::{apply_loss, DensityMatrix, Transmission};
use crate::fock::{Operator, PhaseKind, TwoModePureState};
use crate::metrology::{pc_povm, qfi, sldm_povm, Povm, ProbabilityModel};
use crate::{par, Error, Result};

/// Posterior mass below which a grid point counts as empty when deciding
/// whether to refine.
const MASS_FLOOR: f64 = 1e-9;
/// Refinement factor for a posterior concentrated on too few points.
const REFINE: usize = 4;

/// Uniform phase grid, used as a flat prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Default for PhaseGrid {
    fn default() -> Self {
        Self {
            lower: 0.0,
            upper: PI / 6.0,
            points: 1000,
        }
    }
}

impl PhaseGrid {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        let g = Self { lower, upper, points };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::InvalidGrid(format!("need lower < upper, got [{}, {}]", self.lower, self.upper)));
        }
        if self.points < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {}", self.points)));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn values(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.points).map(|k| self.lower + k as f64 * h).collect()
    }

    pub fn contains(&self, phi: f64) -> bool {
        (self.lower..=self.upper).contains(&phi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub estimate: f64,
    pub variance: f64,
}

/// Posterior over a phase grid.
#[derive(Clone, Debug)]
pub struct BayesState {
    grid: PhaseGrid,
    phis: Vec<f64>,
    posterior: Vec<f64>,
    iteration: usize,
    history: Vec<HistoryEntry>,
}

impl BayesState {
    /// Flat prior on `grid`.
    pub fn uniform(grid: PhaseGrid) -> Result<Self> {
        grid.validate()?;
        let n = grid.points;
        Ok(Self {
            phis: grid.values(),
            posterior: vec![1.0 / n as f64; n],
            grid,
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn phis(&self) -> &[f64] {
        &self.phis
    }

    pub fn posterior(&self) -> &[f64] {
        &self.posterior
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Posterior mean.
    pub fn estimate(&self) -> f64 {
        self.phis.iter().zip(&self.posterior).map(|(x, p)| x * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.estimate();
        self.phis
            .iter()
            .zip(&self.posterior)
            .map(|(x, p)| p * (x - m).powi(2))
            .sum()
    }

    /// Multiplies by `likelihood` (one value per grid point) and renormalizes.
    pub fn update_with(&mut self, likelihood: &[f64]) -> Result<()> {
        if likelihood.len() != self.posterior.len() {
            return Err(Error::DimensionMismatch {
                expected: self.posterior.len(),
                found: likelihood.len(),
            });
        }
        let mut total = 0.0;
        let mut next = Vec::with_capacity(self.posterior.len());
        for (p, l) in self.posterior.iter().zip(likelihood) {
            let v = p * l.max(0.0);
            total += v;
            next.push(v);
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::LikelihoodUnderflow {
                iteration: self.iteration + 1,
                points: self.grid.points,
                lower: self.grid.lower,
                upper: self.grid.upper,
            });
        }
        for v in next.iter_mut() {
            *v /= total;
        }
        self.posterior = next;
        self.iteration += 1;
        self.history.push(HistoryEntry {
            iteration: self.iteration,
            estimate: self.estimate(),
            variance: self.variance(),
        });
        Ok(())
    }

    /// Number of grid points carrying non-negligible mass.
    pub fn occupied_points(&self) -> usize {
        self.posterior.iter().filter(|&&p| p > MASS_FLOOR).count()
    }

    /// Replaces the grid by one `REFINE` times finer spanning the occupied
    /// region (plus one cell each side), interpolating the posterior.
    pub fn refine(&mut self) -> Result<()> {
        let occupied: Vec<usize> = (0..self.posterior.len())
            .filter(|&k| self.posterior[k] > MASS_FLOOR)
            .collect();
        let (Some(&first), Some(&last)) = (occupied.first(), occupied.last()) else {
            return Ok(());
        };
        let lo = first.saturating_sub(1);
        let hi = (last + 1).min(self.phis.len() - 1);
        let grid = PhaseGrid::new(self.phis[lo], self.phis[hi], (hi - lo) * REFINE + 1)?;
        let phis = grid.values();
        let h = self.grid.step();
        let mut post: Vec<f64> = phis
            .iter()
            .map(|&x| {
                let t = (x - self.grid.lower) / h;
                let i = (t.floor() as usize).min(self.phis.len() - 2);
                let f = (t - i as f64).clamp(0.0, 1.0);
                (1.0 - f) * self.posterior[i] + f * self.posterior[i + 1]
            })
            .collect();
        let s: f64 = post.iter().sum();
        post.iter_mut().for_each(|p| *p /= s);
        self.grid = grid;
        self.phis = phis;
        self.posterior = post;
        Ok(())
    }
}

/// Outcome likelihoods of one measurement over a phase grid, `rows[k][g]`.
#[derive(Clone, Debug)]
pub struct LikelihoodTable {
    rows: Vec<Vec<f64>>,
}

impl LikelihoodTable {
    pub fn new(model: &ProbabilityModel, phis: &[f64]) -> Self {
        let per_phi: Vec<Vec<f64>> = phis.iter().map(|&x| model.probabilities(x)).collect();
        let rows = (0..model.outcomes())
            .map(|k| per_phi.iter().map(|p| p[k]).collect())
            .collect();
        Self { rows }
    }

    pub fn row(&self, outcome: usize) -> &[f64] {
        &self.rows[outcome]
    }

    pub fn outcomes(&self) -> usize {
        self.rows.len()
    }
}

/// Multiplies the posterior by the likelihood of `outcome`.
pub fn bayes_update(state: &mut BayesState, outcome: usize, table: &LikelihoodTable) -> Result<()> {
    state.update_with(table.row(outcome))
}

/// Draws an outcome index from a probability vector.
pub fn sample_from(probs: &[f64], rng: &mut impl Rng) -> usize {
    match WeightedIndex::new(probs) {
        Ok(dist) => dist.sample(rng),
        // All weights zero cannot happen for a complete POVM; fall back to
        // the largest entry.
        Err(_) => (0..probs.len())
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
            .unwrap_or(0),
    }
}

/// Samples one measurement outcome at `phi_true`.
pub fn sample_outcome(model: &ProbabilityModel, phi_true: f64, rng: &mut impl Rng) -> usize {
    sample_from(&model.probabilities(phi_true), rng)
}

/// Probe, channel and generator of one estimation experiment.
#[derive(Clone, Debug)]
pub struct Instance {
    pub rho: DensityMatrix,
    pub generator: Operator,
}

impl Instance {
    pub fn new(rho: DensityMatrix, generator: Operator) -> Self {
        Self { rho, generator }
    }

    pub fn from_probe(state: &TwoModePureState, trans: Transmission, kind: PhaseKind) -> Result<Self> {
        Ok(Self {
            rho: apply_loss(state, trans)?,
            generator: kind.generator(state.cutoff()),
        })
    }

    pub fn qfi(&self) -> Result<f64> {
        qfi(&self.rho, &self.generator)
    }

    pub fn model(&self, povm: &Povm) -> Result<ProbabilityModel> {
        ProbabilityModel::new(&self.rho, &self.generator, povm)
    }
}

/// Iteration budget of the two-step strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStepSchedule {
    pub pre_iterations: usize,
    pub sldm_stage_iterations: Vec<usize>,
    pub total_iterations: usize,
    pub simulations: usize,
}

impl Default for TwoStepSchedule {
    fn default() -> Self {
        Self {
            pre_iterations: 50,
            sldm_stage_iterations: vec![250, 200],
            total_iterations: 500,
            simulations: 2000,
        }
    }
}

impl TwoStepSchedule {
    pub fn validate(&self) -> Result<()> {
        let sum = self.pre_iterations + self.sldm_stage_iterations.iter().sum::<usize>();
        if sum != self.total_iterations {
            return Err(Error::InvalidSchedule(format!(
                "stages add up to {sum}, total is {}",
                self.total_iterations
            )));
        }
        Ok(())
    }
}

/// Which measurement produced an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PreEstimation,
    /// 1-based SLDM stage.
    Sldm(usize),
    AdaptivePc,
    Fixed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::PreEstimation => f.write_str("pre"),
            Stage::Sldm(k) => write!(f, "sldm{k}"),
            Stage::AdaptivePc => f.write_str("adaptive_pc"),
            Stage::Fixed => f.write_str("fixed"),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub stage: Stage,
    pub estimate: f64,
    pub variance: f64,
    pub sq_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub sim_id: usize,
    pub records: Vec<IterationRecord>,
    /// Estimates at which each SLDM stage built its measurement.
    pub stage_estimates: Vec<f64>,
}

impl Trajectory {
    pub fn final_estimate(&self) -> Option<f64> {
        self.records.last().map(|r| r.estimate)
    }
}

fn push_record(records: &mut Vec<IterationRecord>, state: &BayesState, stage: Stage, phi_true: f64) {
    let h = state.history().last().expect("update recorded");
    records.push(IterationRecord {
        iter: h.iteration,
        stage,
        estimate: h.estimate,
        variance: h.variance,
        sq_error: (h.estimate - phi_true).powi(2),
    });
}

fn check_phi(grid: &PhaseGrid, phi_true: f64) -> Result<()> {
    grid.validate()?;
    if !grid.contains(phi_true) {
        return Err(Error::InvalidGrid(format!(
            "true phase {phi_true} outside [{}, {}]",
            grid.lower, grid.upper
        )));
    }
    Ok(())
}

/// Runs `iterations` updates with one fixed measurement.
fn run_stage(
    state: &mut BayesState,
    model: &ProbabilityModel,
    iterations: usize,
    stage: Stage,
    phi_true: f64,
    rng: &mut impl Rng,
    records: &mut Vec<IterationRecord>,
) -> Result<()> {
    if iterations == 0 {
        return Ok(());
    }
    let table = LikelihoodTable::new(model, state.phis());
    let probs = model.probabilities(phi_true);
    for _ in 0..iterations {
        let k = sample_from(&probs, rng);
        bayes_update(state, k, &table)?;
        push_record(records, state, stage, phi_true);
    }
    Ok(())
}

/// Shared, trajectory-independent pieces of the two-step strategy.
pub struct TwoStepContext<'a> {
    instance: &'a Instance,
    pc_table: LikelihoodTable,
    pc_probs: Vec<f64>,
    grid: PhaseGrid,
}

impl<'a> TwoStepContext<'a> {
    pub fn new(instance: &'a Instance, grid: &PhaseGrid, phi_true: f64) -> Result<Self> {
        check_phi(grid, phi_true)?;
        let pc_model = instance.model(&pc_povm(instance.rho.cutoff()))?;
        let pc_table = LikelihoodTable::new(&pc_model, &grid.values());
        let pc_probs = pc_model.probabilities(phi_true);
        Ok(Self {
            instance,
            pc_table,
            pc_probs,
            grid: grid.clone(),
        })
    }
}

/// Counting pre-estimation followed by SLDM stages, each measurement built
/// at the estimate the previous stage ended with.
pub fn run_two_step(
    ctx: &TwoStepContext<'_>,
    phi_true: f64,
    schedule: &TwoStepSchedule,
    sim_id: usize,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    schedule.validate()?;
    let mut state = BayesState::uniform(ctx.grid.clone())?;
    let mut records = Vec::with_capacity(schedule.total_iterations);
    for _ in 0..schedule.pre_iterations {
        let k = sample_from(&ctx.pc_probs, rng);
        bayes_update(&mut state, k, &ctx.pc_table)?;
        push_record(&mut records, &state, Stage::PreEstimation, phi_true);
    }
    let mut stage_estimates = Vec::with_capacity(schedule.sldm_stage_iterations.len());
    for (s, &iters) in schedule.sldm_stage_iterations.iter().enumerate() {
        if s == 0 && state.occupied_points() < 3 {
            log::warn!(
                "sim {sim_id}: posterior on {} grid point(s) before the SLDM stage; refining ×{REFINE}",
                state.occupied_points()
            );
            state.refine()?;
        }
        let phi_hat = state.estimate();
        stage_estimates.push(phi_hat);
        let model = ctx.instance.model(&sldm_povm(&ctx.instance.rho, &ctx.instance.generator, phi_hat)?)?;
        run_stage(&mut state, &model, iters, Stage::Sldm(s + 1), phi_true, rng, &mut records)?;
    }
    Ok(Trajectory {
        sim_id,
        records,
        stage_estimates,
    })
}

/// Phase in `[0, 2π)` where the counting CFI is largest, from a scan of
/// `samples` points. Near-ties (within 1e-6 relative) go to the phase with
/// the largest total slope `Σ_k |∂p_k|`, which keeps the working point away
/// from fringe extrema where `φ_c ± φ` cannot be told apart.
pub fn best_pc_phase(instance: &Instance, samples: usize) -> Result<(f64, f64)> {
    let model = instance.model(&pc_povm(instance.rho.cutoff()))?;
    let phis: Vec<f64> = (0..samples).map(|k| TAU * k as f64 / samples as f64).collect();
    let h = 1e-5;
    let scored = par::map_slice(&phis, |&x| {
        let (pp, pm) = (model.probabilities(x + h), model.probabilities(x - h));
        let slope: f64 = pp.iter().zip(&pm).map(|(a, b)| (a - b).abs()).sum();
        (model.cfi(x).value, slope)
    });
    let best = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let mut pick = None::<usize>;
    for (k, &(v, slope)) in scored.iter().enumerate() {
        if v >= best * (1.0 - 1e-6) && pick.is_none_or(|p| slope > scored[p].1) {
            pick = Some(k);
        }
    }
    let k = pick.unwrap_or(0);
    Ok((phis[k], scored[k].0))
}

/// Adaptive counting baseline: before every shot the control phase is set to
/// `φ_opt − φ̂` so the total phase sits at the CFI maximum.
pub fn run_adaptive_pc(
    model: &ProbabilityModel,
    phi_opt: f64,
    phi_true: f64,
    grid: &PhaseGrid,
    iterations: usize,
    sim_id: usize,
    rng: &mut impl Rng,
) -> Result<(BayesState, Trajectory)> {
    check_phi(grid, phi_true)?;
    let mut state = BayesState::uniform(grid.clone())?;
    let mut records = Vec::with_capacity(iterations);
    let mut row = vec![0.0; grid.points];
    for _ in 0..iterations {
        let control = phi_opt - state.estimate();
        let k = sample_from(&model.probabilities(phi_true + control), rng);
        for (r, &x) in row.iter_mut().zip(state.phis()) {
            *r = model.outcome_probability(k, x + control);
        }
        state.update_with(&row)?;
        push_record(&mut records, &state, Stage::AdaptivePc, phi_true);
    }
    Ok((
        state,
        Trajectory {
            sim_id,
            records,
            stage_estimates: Vec::new(),
        },
    ))
}

/// Runs one fixed measurement for `iterations` shots.
pub fn run_fixed(
    model: &ProbabilityModel,
    phi_true: f64,
    grid: &PhaseGrid,
    iterations: usize,
    sim_id: usize,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    check_phi(grid, phi_true)?;
    let mut state = BayesState::uniform(grid.clone())?;
    let mut records = Vec::with_capacity(iterations);
    run_stage(&mut state, model, iterations, Stage::Fixed, phi_true, rng, &mut records)?;
    Ok(Trajectory {
        sim_id,
        records,
        stage_estimates: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TwoStep,
    AdaptivePc,
    /// SLD measurement built once at the true phase.
    SldmAtTruth,
}

/// Per-trajectory RNG: stream `sim_id` of the master seed.
pub fn trajectory_rng(seed: u64, sim_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sim_id as u64);
    rng
}

/// Number of points in the scan locating the counting-CFI maximum.
pub const PC_SCAN_POINTS: usize = 4096;

/// Runs `schedule.simulations` independent trajectories in parallel.
pub fn simulate_many(
    instance: &Instance,
    phi_true: f64,
    schedule: &TwoStepSchedule,
    strategy: &Strategy,
    grid: &PhaseGrid,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    schedule.validate()?;
    check_phi(grid, phi_true)?;
    let n = schedule.simulations;
    let runs: Vec<Result<Trajectory>> = match strategy {
        Strategy::TwoStep => {
            let ctx = TwoStepContext::new(instance, grid, phi_true)?;
            par::map_range(n, |i| run_two_step(&ctx, phi_true, schedule, i, &mut trajectory_rng(seed, i)))
        }
        Strategy::AdaptivePc => {
            let model = instance.model(&pc_povm(instance.rho.cutoff()))?;
            let (phi_opt, _) = best_pc_phase(instance, PC_SCAN_POINTS)?;
            par::map_range(n, |i| {
                run_adaptive_pc(
                    &model,
                    phi_opt,
                    phi_true,
                    grid,
                    schedule.total_iterations,
                    i,
                    &mut trajectory_rng(seed, i),
                )
                .map(|(_, t)| t)
            })
        }
        Strategy::SldmAtTruth => {
            let model = instance.model(&sldm_povm(&instance.rho, &instance.generator, phi_true)?)?;
            par::map_range(n, |i| {
                run_fixed(&model, phi_true, grid, schedule.total_iterations, i, &mut trajectory_rng(seed, i))
            })
        }
    };
    runs.into_iter().collect()
}

/// Cross-trajectory averages at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub iter: usize,
    pub mean_sq_error: f64,
    pub mean_estimate: f64,
    pub crb_qfi: f64,
    pub crb_best_cfi: f64,
}

/// Averages trajectories iteration by iteration (fixed summation order).
/// `qfi` and `best_cfi` set the reference bounds `1/(m·F)`.
pub fn aggregate(trajectories: &[Trajectory], qfi: f64, best_cfi: f64) -> Vec<AggregateRow> {
    let len = trajectories.iter().map(|t| t.records.len()).min().unwrap_or(0);
    let count = trajectories.len() as f64;
    (0..len)
        .map(|i| {
            let (mut se, mut est) = (0.0, 0.0);
            for t in trajectories {
                se += t.records[i].sq_error;
                est += t.records[i].estimate;
            }
            let m = trajectories[0].records[i].iter as f64;
            AggregateRow {
                iter: trajectories[0].records[i].iter,
                mean_sq_error: se / count,
                mean_estimate: est / count,
                crb_qfi: 1.0 / (m * qfi),
                crb_best_cfi: 1.0 / (m * best_cfi),
            }
        })
        .collect()
}

/// CFI-versus-phase curves of the SLD measurements built at the stage
/// estimates, averaged over trajectories. `curves[s][k]` is stage `s`
/// evaluated at `phis[k]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SldmCfiCurves {
    pub phis: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
}

pub fn average_sldm_cfi(instance: &Instance, trajectories: &[Trajectory], phis: &[f64]) -> Result<SldmCfiCurves> {
    let stages = trajectories
        .iter()
        .map(|t| t.stage_estimates.len())
        .min()
        .unwrap_or(0);
    let per_traj: Vec<Result<Vec<Vec<f64>>>> = par::map_slice(trajectories, |t| {
        (0..stages)
            .map(|s| {
                let m = instance.model(&sldm_povm(&instance.rho, &instance.generator, t.stage_estimates[s])?)?;
                Ok(phis.iter().map(|&x| m.cfi(x).value).collect())
            })
            .collect()
    });
    let mut curves = vec![vec![0.0; phis.len()]; stages];
    for r in per_traj {
        for (acc, c) in curves.iter_mut().zip(r?) {
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
    }
    let n = trajectories.len().max(1) as f64;
    curves.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(SldmCfiCurves {
        phis: phis.to_vec(),
        curves,
    })
}

/// Runs the two-step strategy and averages the CFI curves of the SLDMs it
/// built.
pub fn average_cfi_of_estimated_sldm(
    instance: &Instance,
    phi_true: f64,
    schedule: &TwoStepSchedule,
    grid: &PhaseGrid,
    phis: &[f64],
    seed: u64,
) -> Result<SldmCfiCurves> {
    let trajs = simulate_many(instance, phi_true, schedule, &Strategy::TwoStep, grid, seed)?;
    average_sldm_cfi(instance, &trajs, phis)
}
