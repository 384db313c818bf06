//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ofps_core::bayes::{
    aggregate, bayes_update, sample_outcome, simulate_many, trajectory_rng, BayesState, Instance, LikelihoodTable,
    PhaseGrid, Strategy, TwoStepSchedule,
};
use ofps_core::channels::{
    apply_loss, loss_kraus_set, loss_phase_commutation_check, loss_via_trace_out, DensityMatrix, Transmission,
};
use ofps_core::fock::{build_jz, FockCutoff, PhaseKind, TwoModePureState};
use ofps_core::linalg::{max_abs_diff, trace_product_re};
use ofps_core::metrology::{
    parity_povm, pc_povm, qfi, rotated_state, sld, sldm_povm, Povm, ProbabilityModel,
};
use ofps_core::optimize::{optimize_probe, random_phase_validation, CobylaConfig, ProbeSearchProblem, ProbeSearchResult};
use ofps_core::probes::{noiseless_ofps, taylor_qfi_first_order, OfpsSpec};
use ofps_core::{CVector, C64};

/// QFI of the optimized probe for N = 6, n̄ = 2, T₁ = T₂ = 0.8 with the seed
/// below, recorded from the first verified run.
const PINNED_NOISY_QFI: f64 = 3.974510665;
const SEED: u64 = 20_240_601;

/// Runs the checks one at a time so each runtime is measured without
/// competing work.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes to the raw stderr handle so the line survives test output capture.
fn report(id: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id:>2} [{name}]: {} ({detail}; {:.1} s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn cut(n: usize) -> FockCutoff {
    FockCutoff::new(n).unwrap()
}

fn random_state(cutoff: FockCutoff, rng: &mut impl Rng) -> TwoModePureState {
    let amps = CVector::from_fn(cutoff.dim(), |_, _| {
        C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    TwoModePureState::normalized(cutoff, amps).unwrap()
}

fn lossy_catalog_qfi(n: usize, nbar: f64, t: f64) -> f64 {
    let s = noiseless_ofps(&OfpsSpec::new(cut(n), nbar, PhaseKind::Linear).unwrap()).unwrap();
    qfi(
        &apply_loss(&s, Transmission::symmetric(t).unwrap()).unwrap(),
        &build_jz(cut(n)),
    )
    .unwrap()
}

fn config() -> CobylaConfig {
    CobylaConfig {
        seed: SEED,
        ..CobylaConfig::default()
    }
}

fn fig2_problem(n: usize) -> ProbeSearchProblem {
    ProbeSearchProblem::new(cut(n), 2.0, Transmission::symmetric(0.8).unwrap(), PhaseKind::Linear).unwrap()
}

/// Optimized noisy probe for the T = 0.8, n̄ = 2, N = 6 instance, shared by
/// several criteria.
fn noisy_optimum() -> &'static (ProbeSearchResult, Duration) {
    static CELL: OnceLock<(ProbeSearchResult, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let r = optimize_probe(&fig2_problem(6), &config()).unwrap();
        (r, t.elapsed())
    })
}

#[test]
fn criterion_01_closed_form_qfi() {
    let _guard = exclusive();
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for n in 2..=8usize {
        let nf = n as f64;
        let low = (1..=20).map(|k| nf * k as f64 / 20.0);
        let high = (0..20).map(|k| nf + nf * k as f64 / 20.0);
        for nbar in low.chain(high) {
            let spec = OfpsSpec::new(cut(n), nbar, PhaseKind::Linear).unwrap();
            let f = qfi(&DensityMatrix::pure(&noiseless_ofps(&spec).unwrap()), &build_jz(cut(n))).unwrap();
            let expect = if nbar <= nf { nbar * nf } else { nf * (2.0 * nf - nbar) };
            worst = worst.max((f - expect).abs() / expect);
        }
    }
    let pass = worst <= 1e-9 && t.elapsed() < Duration::from_secs(10);
    report(1, "closed-form QFI", pass, format!("max rel err {worst:.2e}"), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_02_channel_equivalence() {
    let _guard = exclusive();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=4);
        let s = random_state(cut(n), &mut rng);
        let tr = Transmission::new(rng.random(), rng.random()).unwrap();
        let kraus = apply_loss(&s, tr).unwrap();
        let oracle = loss_via_trace_out(&s, tr, false).unwrap();
        worst = worst.max(max_abs_diff(kraus.matrix(), oracle.matrix()));
    }
    let pass = worst <= 1e-10 && t.elapsed() < Duration::from_secs(30);
    report(2, "Kraus vs trace-out", pass, format!("max abs diff {worst:.2e}"), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_03_loss_phase_commutation() {
    let _guard = exclusive();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let g = build_jz(cut(4));
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let s = random_state(cut(4), &mut rng);
        let tr = Transmission::new(rng.random(), rng.random()).unwrap();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (before, after) = loss_phase_commutation_check(&s, tr, &g, phi).unwrap();
        worst = worst.max((before - after).abs() / before.abs().max(1e-300));
    }
    let pass = worst <= 1e-8 && t.elapsed() < Duration::from_secs(30);
    report(3, "loss/phase commutation", pass, format!("max rel diff {worst:.2e}"), t.elapsed());
    assert!(pass);
}

/// `(|Tr ρL|, |Tr ρL² − F|/F, |CFI − F|/F)` for the SLD at `phi`.
fn sld_errors(rho: &DensityMatrix, phi: f64) -> (f64, f64, f64) {
    let g = build_jz(rho.cutoff());
    let f = qfi(rho, &g).unwrap();
    let l = sld(rho, &g, phi).unwrap();
    let (rho_phi, _) = rotated_state(rho, &g, phi).unwrap();
    let first = trace_product_re(rho_phi.matrix(), &l.matrix).abs();
    let l2 = &l.matrix * &l.matrix;
    let second = (trace_product_re(rho_phi.matrix(), &l2) - f).abs() / f;
    let model = ProbabilityModel::new(rho, &g, &sldm_povm(rho, &g, phi).unwrap()).unwrap();
    let c = (model.cfi(phi).value - f).abs() / f;
    (first, second, c)
}

#[test]
fn criterion_04_sld_correctness() {
    let _guard = exclusive();
    let (opt, _) = noisy_optimum();
    let t_own = Instant::now();
    let tr = Transmission::symmetric(0.8).unwrap();
    let mut cases = vec![(apply_loss(&opt.state, tr).unwrap(), 0.2)];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    for _ in 0..20 {
        let n = rng.random_range(2..=5);
        let s = random_state(cut(n), &mut rng);
        let tr = Transmission::new(rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)).unwrap();
        cases.push((apply_loss(&s, tr).unwrap(), rng.random_range(0.0..3.0)));
    }
    let (mut e1, mut e2, mut e3) = (0.0f64, 0.0f64, 0.0f64);
    for (rho, phi) in &cases {
        let (a, b, c) = sld_errors(rho, *phi);
        e1 = e1.max(a);
        e2 = e2.max(b);
        e3 = e3.max(c);
    }
    let pass = e1 <= 1e-8 && e2 <= 1e-8 && e3 <= 1e-6 && t_own.elapsed() < Duration::from_secs(60);
    report(
        4,
        "SLD correctness",
        pass,
        format!("|Tr ρL| {e1:.1e}, Tr ρL² rel {e2:.1e}, SLDM CFI rel {e3:.1e}; shared optimum excluded"),
        t_own.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_05_lossless_recovery() {
    let _guard = exclusive();
    let t = Instant::now();
    let mut detail = Vec::new();
    let mut pass = true;
    for (nbar, closed) in [(2.0, 12.0), (8.0, 24.0)] {
        let p = ProbeSearchProblem::new(cut(6), nbar, Transmission::lossless(), PhaseKind::Linear).unwrap();
        let r = optimize_probe(&p, &config()).unwrap();
        pass &= r.qfi >= closed * (1.0 - 1e-4);
        detail.push(format!("nbar {nbar}: {:.9} / {closed}", r.qfi));
    }
    pass &= t.elapsed() < Duration::from_secs(300);
    report(5, "optimizer at T=1", pass, detail.join(", "), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_06_noisy_ordering() {
    let _guard = exclusive();
    let t = Instant::now();
    let (opt, opt_time) = noisy_optimum();
    let catalog = lossy_catalog_qfi(6, 2.0, 0.8);
    let v = random_phase_validation(opt, &fig2_problem(6), 10_000, SEED).unwrap();
    let pinned_ok = (opt.qfi - PINNED_NOISY_QFI).abs() <= 1e-6;
    let elapsed = t.elapsed() + *opt_time;
    let pass = opt.qfi > catalog + 1e-3
        && opt.qfi < 12.0
        && v.pass
        && pinned_ok
        && elapsed < Duration::from_secs(600);
    report(
        6,
        "noisy optimum ordering",
        pass,
        format!(
            "optimized {:.9}, analytical {catalog:.9}, max random-phase {:.9}, pinned {PINNED_NOISY_QFI}",
            opt.qfi, v.max_random_qfi
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_07_taylor_accuracy() {
    let _guard = exclusive();
    let t = Instant::now();
    let spec = OfpsSpec::new(cut(6), 2.0, PhaseKind::Linear).unwrap();
    let exact = |d: f64| lossy_catalog_qfi(6, 2.0, 1.0 - d);
    let err = |d: f64| (taylor_qfi_first_order(&spec, d, d).unwrap() - exact(d)).abs();
    let mut rel_ok = true;
    let mut worst_rel: f64 = 0.0;
    for d in [0.01, 0.02, 0.04, 0.06, 0.08, 0.1] {
        let r = err(d) / exact(d);
        worst_rel = worst_rel.max(r);
        rel_ok &= r <= 0.05;
    }
    // |err|/δ² must stay bounded as δ shrinks: halving δ may not grow the
    // ratio by more than a factor 3.
    let deltas = [0.04, 0.02, 0.01];
    let ratios: Vec<f64> = deltas.iter().map(|&d| err(d) / (d * d)).collect();
    let bounded = ratios.windows(2).all(|w| w[1] <= 3.0 * w[0]);
    let pass = rel_ok && bounded && t.elapsed() < Duration::from_secs(60);
    report(
        7,
        "Taylor accuracy",
        pass,
        format!(
            "max rel err {worst_rel:.2e}, |err|/δ² at δ=0.04,0.02,0.01: {:.2e}, {:.2e}, {:.2e}",
            ratios[0], ratios[1], ratios[2]
        ),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_08_fock_dimension_trends() {
    let _guard = exclusive();
    let t = Instant::now();
    let (opt6, opt6_time) = noisy_optimum();
    let t_own = Instant::now();
    let ns: Vec<usize> = (2..=6).collect();
    let catalog: Vec<f64> = ns.iter().map(|&n| lossy_catalog_qfi(n, 2.0, 0.8)).collect();
    let optimized: Vec<f64> = ns
        .iter()
        .map(|&n| {
            if n == 6 {
                opt6.qfi
            } else {
                optimize_probe(&fig2_problem(n), &config()).unwrap().qfi
            }
        })
        .collect();
    let cat_ok = catalog[1..].windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let opt_ok = optimized.windows(2).all(|w| w[1] >= w[0] - 1e-3);
    let elapsed = t_own.elapsed() + *opt6_time;
    let pass = cat_ok && opt_ok && elapsed < Duration::from_secs(900);
    // n̄N·T^N peaks at N = −1/ln T ≈ 4.5 for T = 0.8, so the analytical
    // trend is reported but only the optimized trend is asserted.
    let expected: Vec<f64> = ns.iter().map(|&n| 2.0 * n as f64 * 0.8f64.powi(n as i32)).collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
    report(
        8,
        "Fock-dimension trends",
        pass,
        format!(
            "analytical [{}] non-increasing from N=3: {cat_ok}, optimized [{}] non-decreasing: {opt_ok}",
            fmt(&catalog),
            fmt(&optimized)
        ),
        elapsed.max(t.elapsed()),
    );
    for (c, e) in catalog.iter().zip(&expected) {
        assert!((c - e).abs() < 1e-9 * e, "{c} vs n̄N·T^N = {e}");
    }
    assert!(opt_ok && elapsed < Duration::from_secs(900));
}

#[test]
fn criterion_09_two_step_saturation() {
    let _guard = exclusive();
    let t = Instant::now();
    let (opt, opt_time) = noisy_optimum();
    let t_own = Instant::now();
    let instance = Instance::from_probe(&opt.state, Transmission::symmetric(0.8).unwrap(), PhaseKind::Linear).unwrap();
    let f = instance.qfi().unwrap();
    let schedule = TwoStepSchedule {
        simulations: 500,
        ..TwoStepSchedule::default()
    };
    let grid = PhaseGrid::default();
    let two = simulate_many(&instance, 0.2, &schedule, &Strategy::TwoStep, &grid, SEED).unwrap();
    let apc = simulate_many(&instance, 0.2, &schedule, &Strategy::AdaptivePc, &grid, SEED).unwrap();
    let mse_two = aggregate(&two, f, 1.0).last().unwrap().mean_sq_error;
    let mse_apc = aggregate(&apc, f, 1.0).last().unwrap().mean_sq_error;
    let crb = 1.0 / (500.0 * f);
    let ratio = mse_two / crb;
    let elapsed = t_own.elapsed() + *opt_time;
    let pass = (ratio - 1.0).abs() <= 0.2 && mse_two < mse_apc && elapsed < Duration::from_secs(1200);
    report(
        9,
        "two-step Cramér-Rao saturation",
        pass,
        format!("MSE·500F = {ratio:.3}, two-step {mse_two:.3e} vs adaptive PC {mse_apc:.3e}"),
        elapsed.max(t.elapsed()),
    );
    assert!(pass);
}

#[test]
fn criterion_10_property_suite() {
    let _guard = exclusive();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 10);

    // CFI ≤ QFI.
    let mut cfi_ok = true;
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let c = cut(n);
        let s = random_state(c, &mut rng);
        let rho = apply_loss(&s, Transmission::new(rng.random(), rng.random()).unwrap()).unwrap();
        let g = build_jz(c);
        let f = qfi(&rho, &g).unwrap();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let povm: Povm = match rng.random_range(0..3) {
            0 => parity_povm(c),
            1 => pc_povm(c),
            _ => sldm_povm(&rho, &g, rng.random_range(0.0..3.0)).unwrap(),
        };
        let i = ProbabilityModel::new(&rho, &g, &povm).unwrap().cfi(phi).value;
        worst_excess = worst_excess.max(i - f);
        cfi_ok &= i <= f * (1.0 + 1e-6) + 1e-9;
    }

    // Kraus completeness on a T grid.
    let mut kraus_worst: f64 = 0.0;
    for n in 1..=6 {
        for k in 0..=20 {
            let ks = loss_kraus_set(cut(n), k as f64 / 20.0).unwrap();
            let sum = ks.iter().fold(DMatrix::<f64>::zeros(n + 1, n + 1), |acc, m| acc + m.transpose() * m);
            kraus_worst = kraus_worst.max((sum - DMatrix::identity(n + 1, n + 1)).abs().max());
        }
    }

    // Posterior normalization after every update.
    let state = noiseless_ofps(&OfpsSpec::new(cut(3), 1.5, PhaseKind::Linear).unwrap()).unwrap();
    let instance = Instance::from_probe(&state, Transmission::symmetric(0.8).unwrap(), PhaseKind::Linear).unwrap();
    let model = instance.model(&pc_povm(cut(3))).unwrap();
    let mut post = BayesState::uniform(PhaseGrid::default()).unwrap();
    let table = LikelihoodTable::new(&model, post.phis());
    let mut draw = trajectory_rng(SEED, 0);
    let mut norm_worst: f64 = 0.0;
    for _ in 0..300 {
        let k = sample_outcome(&model, 0.2, &mut draw);
        bayes_update(&mut post, k, &table).unwrap();
        let total: f64 = post.posterior().iter().sum();
        norm_worst = norm_worst.max((total - 1.0).abs());
        assert!(post.posterior().iter().all(|&p| p >= 0.0));
    }

    // Bit reproducibility.
    let schedule = TwoStepSchedule {
        pre_iterations: 20,
        sldm_stage_iterations: vec![40, 40],
        total_iterations: 100,
        simulations: 8,
    };
    let run = || simulate_many(&instance, 0.2, &schedule, &Strategy::TwoStep, &PhaseGrid::default(), SEED).unwrap();
    let (a, b) = (run(), run());
    let sims_equal = a.iter().zip(&b).all(|(x, y)| {
        x.records
            .iter()
            .zip(&y.records)
            .all(|(r, s)| r.estimate.to_bits() == s.estimate.to_bits() && r.variance.to_bits() == s.variance.to_bits())
    });
    let small = ProbeSearchProblem::new(cut(2), 1.0, Transmission::symmetric(0.7).unwrap(), PhaseKind::Linear).unwrap();
    let cfg = CobylaConfig {
        restarts: 3,
        seed: SEED,
        ..CobylaConfig::default()
    };
    let (o1, o2) = (optimize_probe(&small, &cfg).unwrap(), optimize_probe(&small, &cfg).unwrap());
    let opt_equal = o1.qfi.to_bits() == o2.qfi.to_bits() && o1.state == o2.state;

    let pass = cfi_ok
        && kraus_worst <= 1e-12
        && norm_worst <= 1e-12
        && sims_equal
        && opt_equal
        && t.elapsed() < Duration::from_secs(120);
    report(
        10,
        "property suite",
        pass,
        format!(
            "max CFI−QFI {worst_excess:.1e}, Kraus defect {kraus_worst:.1e}, posterior defect {norm_worst:.1e}, reproducible {}",
            sims_equal && opt_equal
        ),
        t.elapsed(),
    );
    assert!(pass);
}
