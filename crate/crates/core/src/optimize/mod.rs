//! Constrained search for the probe state that maximizes the QFI after loss.
//!
//! The decision variables are the Fock coefficients `C_ij` (real by default).
//! The search maximizes the QFI of the lossy state subject to normalization
//! and a fixed mean particle number, both written as pairs of inequalities
//! for [`cobyla`].

pub mod cobyla;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channels::{apply_loss, loss_kraus_set, Transmission};
use crate::fock::{FockCutoff, PhaseKind, TwoModePureState};
use crate::linalg::eigh_real;
use crate::metrology::{qfi, DEFAULT_SUPPORT_THRESHOLD};
use crate::probes::{noiseless_ofps, OfpsSpec};
use crate::{par, CVector, Error, Result, C64};

pub use cobyla::{cobyla_minimize, CobylaConfig, CobylaOutcome, CobylaStatus};

/// Largest `|n̄ − ⟨n⟩|` accepted from the final mean-number correction.
const NBAR_CORRECTION_LIMIT: f64 = 1e-6;
/// Best-QFI movement below which the final trust-region shrink counts as
/// converged.
const CONVERGENCE_DELTA: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSearchProblem {
    pub cutoff: FockCutoff,
    pub nbar: f64,
    pub trans: Transmission,
    pub phase_kind: PhaseKind,
    #[serde(default = "default_true")]
    pub coefficients_real: bool,
}

fn default_true() -> bool {
    true
}

impl ProbeSearchProblem {
    pub fn new(cutoff: FockCutoff, nbar: f64, trans: Transmission, phase_kind: PhaseKind) -> Result<Self> {
        let p = Self {
            cutoff,
            nbar,
            trans,
            phase_kind,
            coefficients_real: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn complex(mut self) -> Self {
        self.coefficients_real = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let max = 2.0 * self.cutoff.n() as f64;
        if !(self.nbar > 0.0 && self.nbar < max) {
            return Err(Error::InvalidMeanNumber { nbar: self.nbar, max });
        }
        Ok(())
    }

    /// Length of the decision vector.
    pub fn dimension(&self) -> usize {
        let d = self.cutoff.dim();
        if self.coefficients_real {
            d
        } else {
            2 * d
        }
    }

    fn amplitudes(&self, x: &[f64]) -> CVector {
        let d = self.cutoff.dim();
        if self.coefficients_real {
            CVector::from_fn(d, |k, _| C64::new(x[k], 0.0))
        } else {
            CVector::from_fn(d, |k, _| C64::new(x[k], x[d + k]))
        }
    }

    fn decision_vector(&self, state: &TwoModePureState) -> Vec<f64> {
        let a = state.amplitudes();
        if self.coefficients_real {
            a.iter().map(|c| c.re).collect()
        } else {
            a.iter().map(|c| c.re).chain(a.iter().map(|c| c.im)).collect()
        }
    }

    fn number_diagonal(&self) -> Vec<f64> {
        self.cutoff.kets().map(|(i, j)| (i + j) as f64).collect()
    }

    fn catalog_state(&self) -> Result<TwoModePureState> {
        noiseless_ofps(&OfpsSpec::new(self.cutoff, self.nbar, self.phase_kind)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSearchResult {
    pub state: TwoModePureState,
    pub qfi: f64,
    pub evals_used: usize,
    pub restart_index: usize,
    pub converged: bool,
    pub seed: u64,
}

/// QFI of the lossy state for a diagonal generator, with a real-arithmetic
/// path when all amplitudes are real.
pub struct LossyQfi {
    levels: usize,
    kraus_a: Vec<DMatrix<f64>>,
    kraus_b: Vec<DMatrix<f64>>,
    generator: Vec<f64>,
    trans: Transmission,
    kind: PhaseKind,
    cutoff: FockCutoff,
}

impl LossyQfi {
    pub fn new(cutoff: FockCutoff, trans: Transmission, kind: PhaseKind) -> Self {
        let generator = kind
            .generator(cutoff)
            .diagonal()
            .expect("phase generators are diagonal")
            .to_vec();
        Self {
            levels: cutoff.levels(),
            kraus_a: loss_kraus_set(cutoff, trans.t1()).expect("validated transmission"),
            kraus_b: loss_kraus_set(cutoff, trans.t2()).expect("validated transmission"),
            generator,
            trans,
            kind,
            cutoff,
        }
    }

    /// QFI of the normalized input `amps / ‖amps‖`; zero for a null vector.
    pub fn eval(&self, amps: &CVector) -> f64 {
        let norm = amps.norm();
        if norm == 0.0 || !norm.is_finite() {
            return 0.0;
        }
        if self.trans.is_lossless() {
            // Pure output: 4 Var(G).
            let (mut m1, mut m2) = (0.0, 0.0);
            for (c, g) in amps.iter().zip(&self.generator) {
                let w = c.norm_sqr() / (norm * norm);
                m1 += w * g;
                m2 += w * g * g;
            }
            return 4.0 * (m2 - m1 * m1).max(0.0);
        }
        if amps.iter().all(|c| c.im == 0.0) {
            let x: Vec<f64> = amps.iter().map(|c| c.re / norm).collect();
            self.eval_real(&x)
        } else {
            let Ok(state) = TwoModePureState::normalized(self.cutoff, amps.clone()) else {
                return 0.0;
            };
            apply_loss(&state, self.trans)
                .and_then(|rho| qfi(&rho, &self.kind.generator(self.cutoff)))
                .unwrap_or(0.0)
        }
    }

    fn eval_real(&self, x: &[f64]) -> f64 {
        let l = self.levels;
        let dim = l * l;
        let psi = DMatrix::from_fn(l, l, |i, j| x[i * l + j]);
        let mut rho = DMatrix::<f64>::zeros(dim, dim);
        for ka in &self.kraus_a {
            let left = ka * &psi;
            for kb in &self.kraus_b {
                let m = &left * kb.transpose();
                let v = DVector::from_fn(dim, |k, _| m[(k / l, k % l)]);
                if v.norm_squared() > 0.0 {
                    rho.ger(1.0, &v, &v, 1.0);
                }
            }
        }
        let (values, vectors) = eigh_real(&rho);
        let support: Vec<usize> = (0..dim)
            .filter(|&k| values[k] > DEFAULT_SUPPORT_THRESHOLD)
            .collect();
        let vs = vectors.select_columns(&support);
        let mut gv = vs.clone();
        for (r, g) in self.generator.iter().enumerate() {
            gv.row_mut(r).scale_mut(*g);
        }
        let g_ss = vs.transpose() * &gv;
        let lam: Vec<f64> = support.iter().map(|&k| values[k]).collect();
        let mut f = 0.0;
        for (a, &la) in lam.iter().enumerate() {
            let second = gv.column(a).norm_squared();
            let first = g_ss[(a, a)];
            f += 4.0 * la * (second - first * first);
            for (b, &lb) in lam.iter().enumerate() {
                if a != b {
                    f -= 8.0 * la * lb / (la + lb) * g_ss[(a, b)].powi(2);
                }
            }
        }
        f.max(0.0)
    }
}

fn restart_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random start: a normalized Gaussian vector mixed with `|0,0⟩` or `|N,N⟩`
/// so that its mean particle number equals `n̄` exactly.
fn random_start(problem: &ProbeSearchProblem, rng: &mut impl Rng) -> Result<TwoModePureState> {
    let c = problem.cutoff;
    let n = c.n();
    let numbers = problem.number_diagonal();
    let vac = c.index(0, 0);
    let full = c.index(n, n);
    let mut g: Vec<C64> = (0..c.dim())
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = if problem.coefficients_real {
                0.0
            } else {
                rng.sample(StandardNormal)
            };
            C64::new(re, im)
        })
        .collect();
    g[vac] = C64::new(0.0, 0.0);
    let nrm = g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    g.iter_mut().for_each(|z| *z /= nrm);
    let mean: f64 = g.iter().zip(&numbers).map(|(z, n)| z.norm_sqr() * n).sum();
    let top = 2.0 * n as f64;
    let (anchor, alpha2) = if mean >= problem.nbar {
        (vac, problem.nbar / mean)
    } else {
        // Remove the |N,N⟩ component before mixing it back in.
        let w = g[full].norm_sqr();
        g[full] = C64::new(0.0, 0.0);
        let rest = 1.0 - w;
        let m = (mean - w * top) / rest;
        g.iter_mut().for_each(|z| *z /= rest.sqrt());
        (full, (top - problem.nbar) / (top - m))
    };
    let mut amps = CVector::from_fn(c.dim(), |k, _| g[k] * alpha2.sqrt());
    amps[anchor] = C64::new((1.0 - alpha2).max(0.0).sqrt(), 0.0);
    TwoModePureState::normalized(c, amps)
}

/// Renormalizes and moves `⟨n⟩` onto `n̄` by reweighting
/// `w_k → w_k (1 + β (n_k − ⟨n⟩))`, which keeps `Σ w_k = 1`.
/// Returns the state and the size of the correction `|n̄ − ⟨n⟩|`.
fn project_onto_constraints(problem: &ProbeSearchProblem, amps: &CVector) -> Result<(TwoModePureState, f64)> {
    let state = TwoModePureState::normalized(problem.cutoff, amps.clone())?;
    let numbers = problem.number_diagonal();
    let a = state.amplitudes();
    let w: Vec<f64> = a.iter().map(|z| z.norm_sqr()).collect();
    let mean: f64 = w.iter().zip(&numbers).map(|(w, n)| w * n).sum();
    let var: f64 = w.iter().zip(&numbers).map(|(w, n)| w * (n - mean).powi(2)).sum();
    let gap = problem.nbar - mean;
    if gap == 0.0 || var <= 0.0 {
        return Ok((state, gap.abs()));
    }
    let beta = gap / var;
    let scaled = CVector::from_fn(a.len(), |k, _| {
        a[k] * (1.0 + beta * (numbers[k] - mean)).max(0.0).sqrt()
    });
    Ok((TwoModePureState::normalized(problem.cutoff, scaled)?, gap.abs()))
}

/// One seeded COBYLA run from `start`.
fn run_restart(
    problem: &ProbeSearchProblem,
    config: &CobylaConfig,
    evaluator: &LossyQfi,
    start: &TwoModePureState,
) -> Result<(TwoModePureState, CobylaOutcome, f64)> {
    let d = problem.cutoff.dim();
    let real = problem.coefficients_real;
    let numbers = problem.number_diagonal();
    let eps = config.constraint_tolerance;
    let nbar = problem.nbar;
    let n_box = if real { 2 * d } else { d };
    let m = n_box + 4;
    let func = |x: &[f64], c: &mut [f64]| {
        let w: Vec<f64> = if real {
            x.iter().map(|v| v * v).collect()
        } else {
            (0..d).map(|k| x[k] * x[k] + x[d + k] * x[d + k]).collect()
        };
        if real {
            for k in 0..d {
                c[2 * k] = 1.0 - x[k];
                c[2 * k + 1] = 1.0 + x[k];
            }
        } else {
            for k in 0..d {
                c[k] = 1.0 - w[k];
            }
        }
        let s: f64 = w.iter().sum();
        let nn: f64 = w.iter().zip(&numbers).map(|(w, n)| w * n).sum();
        c[n_box] = s - 1.0 + eps;
        c[n_box + 1] = 1.0 - s + eps;
        c[n_box + 2] = nn - nbar + eps;
        c[n_box + 3] = nbar - nn + eps;
        -evaluator.eval(&problem.amplitudes(x))
    };
    let x0 = problem.decision_vector(start);
    let outcome = cobyla::minimize(func, m, &x0, config)?;
    let (state, correction) = project_onto_constraints(problem, &problem.amplitudes(&outcome.x))?;
    Ok((state, outcome, correction))
}

/// Maximizes the lossy QFI over probe states with the problem's mean particle
/// number. Restart 0 starts from the catalog state; the others from seeded
/// random points on the constraint manifold.
pub fn optimize_probe(problem: &ProbeSearchProblem, config: &CobylaConfig) -> Result<ProbeSearchResult> {
    problem.validate()?;
    config.validate()?;
    let warm = problem.catalog_state()?;
    let evaluator = LossyQfi::new(problem.cutoff, problem.trans, problem.phase_kind);
    let generator = problem.phase_kind.generator(problem.cutoff);

    let runs = par::map_range(config.restarts, |r| -> Result<ProbeSearchResult> {
        let start = if r == 0 {
            warm.clone()
        } else {
            random_start(problem, &mut restart_rng(config.seed, r as u64))?
        };
        let (state, outcome, correction) = run_restart(problem, config, &evaluator, &start)?;
        if correction > NBAR_CORRECTION_LIMIT {
            log::warn!("restart {r}: mean-number correction {correction:e} exceeds {NBAR_CORRECTION_LIMIT:e}");
        } else {
            log::debug!("restart {r}: mean-number correction {correction:e}");
        }
        let value = qfi(&apply_loss(&state, problem.trans)?, &generator)?;
        let converged = outcome.status == CobylaStatus::Converged
            && outcome
                .f_at_final_radius
                .is_some_and(|f| (f - outcome.f).abs() < CONVERGENCE_DELTA);
        log::debug!(
            "restart {r}: qfi {value:.9} after {} evals ({:?})",
            outcome.evals,
            outcome.status
        );
        Ok(ProbeSearchResult {
            state,
            qfi: value,
            evals_used: outcome.evals,
            restart_index: r,
            converged,
            seed: config.seed,
        })
    });

    let mut best: Option<ProbeSearchResult> = None;
    let mut total_evals = 0;
    let mut last_err = None;
    for run in runs {
        match run {
            Ok(res) => {
                total_evals += res.evals_used;
                if best.as_ref().is_none_or(|b| res.qfi > b.qfi) {
                    best = Some(res);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(mut b) => {
            b.evals_used = total_evals;
            Ok(b)
        }
        None => Err(last_err.unwrap_or_else(|| Error::Infeasible("no restart produced a state".into()))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseValidation {
    pub trials: usize,
    pub reference_qfi: f64,
    pub max_random_qfi: f64,
    pub pass: bool,
}

/// QFI after multiplying each amplitude by `e^{iθ_k}`.
pub fn qfi_with_phases(result: &ProbeSearchResult, problem: &ProbeSearchProblem, phases: &[f64]) -> Result<f64> {
    let a = result.state.amplitudes();
    if phases.len() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: phases.len(),
        });
    }
    let shifted = CVector::from_fn(a.len(), |k, _| a[k] * C64::from_polar(1.0, phases[k]));
    let state = TwoModePureState::normalized(problem.cutoff, shifted)?;
    qfi(
        &apply_loss(&state, problem.trans)?,
        &problem.phase_kind.generator(problem.cutoff),
    )
}

/// Adds uniformly random phases to the nonzero coefficients of a real
/// optimum and checks that no trial beats it.
pub fn random_phase_validation(
    result: &ProbeSearchResult,
    problem: &ProbeSearchProblem,
    trials: usize,
    seed: u64,
) -> Result<PhaseValidation> {
    let a = result.state.amplitudes();
    let support: Vec<bool> = a.iter().map(|z| z.norm() > 1e-12).collect();
    let values = par::map_range(trials, |t| {
        let mut rng = restart_rng(seed, t as u64);
        let phases: Vec<f64> = support
            .iter()
            .map(|&s| {
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                if s {
                    th
                } else {
                    0.0
                }
            })
            .collect();
        qfi_with_phases(result, problem, &phases)
    });
    let mut max_random = result.qfi;
    if trials > 0 {
        max_random = f64::NEG_INFINITY;
        for v in values {
            max_random = max_random.max(v?);
        }
    }
    Ok(PhaseValidation {
        trials,
        reference_qfi: result.qfi,
        max_random_qfi: max_random,
        pass: max_random <= result.qfi * (1.0 + 1e-6),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t1: f64,
    pub t2: f64,
    pub seed: u64,
    pub result: Option<ProbeSearchResult>,
    pub error: Option<String>,
}

impl SweepPoint {
    pub fn qfi(&self) -> Option<f64> {
        self.result.as_ref().map(|r| r.qfi)
    }
}

/// A decrease along the diagonal `T₁ = T₂` larger than the slack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotonicityViolation {
    pub t_low: f64,
    pub t_high: f64,
    pub qfi_low: f64,
    pub qfi_high: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub points: Vec<SweepPoint>,
    pub diagonal_slack: f64,
    pub diagonal_violations: Vec<MonotonicityViolation>,
}

/// Slack for the diagonal monotonicity check.
pub const SWEEP_MONOTONE_SLACK: f64 = 1e-3;

/// Runs [`optimize_probe`] at every `(T₁, T₂)` with an independent seed per
/// point. Failing points are recorded and the sweep continues.
pub fn transmission_sweep(template: &ProbeSearchProblem, grid: &[(f64, f64)], config: &CobylaConfig) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty transmission grid".into()));
    }
    template.validate()?;
    let indexed: Vec<(usize, (f64, f64))> = grid.iter().copied().enumerate().collect();
    let points = par::map_slice(&indexed, |&(i, (t1, t2))| {
        let seed = restart_rng(config.seed, (1u64 << 32) + i as u64).next_u64();
        let run = Transmission::new(t1, t2).and_then(|trans| {
            let problem = ProbeSearchProblem {
                trans,
                ..template.clone()
            };
            optimize_probe(&problem, &CobylaConfig { seed, ..config.clone() })
        });
        match run {
            Ok(r) => SweepPoint {
                t1,
                t2,
                seed,
                result: Some(r),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep point ({t1}, {t2}) failed: {e}");
                SweepPoint {
                    t1,
                    t2,
                    seed,
                    result: None,
                    error: Some(e.to_string()),
                }
            }
        }
    });
    let diagonal_violations = diagonal_violations(&points, SWEEP_MONOTONE_SLACK);
    Ok(SweepTable {
        points,
        diagonal_slack: SWEEP_MONOTONE_SLACK,
        diagonal_violations,
    })
}

fn diagonal_violations(points: &[SweepPoint], slack: f64) -> Vec<MonotonicityViolation> {
    let mut diag: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.t1 == p.t2)
        .filter_map(|p| p.qfi().map(|q| (p.t1, q)))
        .collect();
    diag.sort_by(|a, b| a.0.total_cmp(&b.0));
    diag.windows(2)
        .filter(|w| w[1].1 < w[0].1 - slack)
        .map(|w| MonotonicityViolation {
            t_low: w[0].0,
            t_high: w[1].0,
            qfi_low: w[0].1,
            qfi_high: w[1].1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(n: usize, nbar: f64, t: f64) -> ProbeSearchProblem {
        ProbeSearchProblem::new(
            FockCutoff::new(n).unwrap(),
            nbar,
            Transmission::symmetric(t).unwrap(),
            PhaseKind::Linear,
        )
        .unwrap()
    }

    fn quick() -> CobylaConfig {
        CobylaConfig {
            restarts: 3,
            max_evals: 3000,
            rho_end: 1e-6,
            seed: 7,
            ..CobylaConfig::default()
        }
    }

    #[test]
    fn fast_qfi_matches_reference() {
        for t in [0.7, 1.0] {
            check_fast_qfi(problem(3, 1.3, t));
        }
    }

    fn check_fast_qfi(p: ProbeSearchProblem) {
        let ev = LossyQfi::new(p.cutoff, p.trans, p.phase_kind);
        let mut rng = restart_rng(1, 0);
        for _ in 0..5 {
            let s = random_start(&p, &mut rng).unwrap();
            let fast = ev.eval(s.amplitudes());
            let slow = qfi(&apply_loss(&s, p.trans).unwrap(), &p.phase_kind.generator(p.cutoff)).unwrap();
            assert!((fast - slow).abs() < 1e-9 * slow.max(1.0), "{fast} {slow}");
        }
    }

    #[test]
    fn random_starts_sit_on_the_constraints() {
        for nbar in [0.3, 2.0, 5.5] {
            let p = problem(3, nbar, 0.9);
            let mut rng = restart_rng(3, 1);
            for _ in 0..10 {
                let s = random_start(&p, &mut rng).unwrap();
                assert!((s.mean_particle_number() - nbar).abs() < 1e-12);
                assert!((s.amplitudes().norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correction_hits_nbar() {
        let p = problem(3, 2.0, 0.9);
        let s = random_start(&p, &mut restart_rng(5, 2)).unwrap();
        let mut a = s.amplitudes().clone();
        a[1] += C64::new(1e-4, 0.0);
        let (fixed, size) = project_onto_constraints(&p, &a).unwrap();
        assert!(size > 0.0 && size < 1e-3);
        assert!((fixed.mean_particle_number() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn lossless_small_instance_recovers_closed_form() {
        let p = problem(3, 1.5, 1.0);
        let r = optimize_probe(&p, &quick()).unwrap();
        assert!(r.qfi >= 4.5 * (1.0 - 1e-4), "{}", r.qfi);
        assert!(r.qfi <= 4.5 + 1e-6);
    }

    #[test]
    fn lossy_optimum_beats_catalog_state() {
        let p = problem(3, 1.5, 0.8);
        let r = optimize_probe(&p, &quick()).unwrap();
        let catalog = qfi(
            &apply_loss(&p.catalog_state().unwrap(), p.trans).unwrap(),
            &p.phase_kind.generator(p.cutoff),
        )
        .unwrap();
        assert!(r.qfi >= catalog - 1e-6, "{} {}", r.qfi, catalog);
        assert!((r.state.mean_particle_number() - 1.5).abs() < 1e-8);
        let again = qfi(&apply_loss(&r.state, p.trans).unwrap(), &p.phase_kind.generator(p.cutoff)).unwrap();
        assert!((again - r.qfi).abs() < 1e-9);
    }

    #[test]
    fn phase_validation_edge_cases() {
        let p = problem(2, 1.0, 0.8);
        let r = optimize_probe(&p, &quick()).unwrap();
        let zero = qfi_with_phases(&r, &p, &vec![0.0; p.cutoff.dim()]).unwrap();
        assert_eq!(zero, r.qfi);
        let v = random_phase_validation(&r, &p, 0, 1).unwrap();
        assert!(v.pass);
        assert_eq!(v.max_random_qfi, r.qfi);
    }

    #[test]
    fn sweep_handles_total_loss_and_bad_points() {
        let p = problem(2, 1.0, 1.0);
        let table = transmission_sweep(&p, &[(0.0, 0.0), (1.0, 1.0), (1.5, 0.5)], &quick()).unwrap();
        assert!(table.points[0].qfi().unwrap().abs() < 1e-12);
        assert!((table.points[1].qfi().unwrap() - 2.0).abs() < 1e-6);
        assert!(table.points[2].error.is_some());
        assert!(transmission_sweep(&p, &[], &quick()).is_err());
    }

    #[test]
    fn infeasible_nbar_is_rejected() {
        let r = ProbeSearchProblem::new(
            FockCutoff::new(2).unwrap(),
            4.0,
            Transmission::lossless(),
            PhaseKind::Linear,
        );
        assert!(r.is_err());
    }
}
