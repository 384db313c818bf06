//! Particle loss on both arms of the interferometer.
//!
//! Production path: single-mode Kraus operators
//! `⟨n−l|K_l|n⟩ = √(C(n,l) T^{n−l} (1−T)^l)` applied as `K_l ⊗ K_m`.
//! Reference path: explicit fictitious beam splitters coupling each arm to a
//! vacuum environment mode, followed by a partial trace over the environment.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::fock::{phase_unitary, FockCutoff, Operator, TwoModePureState};
use crate::linalg::{eigh, expm_i_hermitian, hermitian_defect};
use crate::metrology::{qfi, qfi_from_derivative};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Largest cutoff the four-mode trace-out accepts without an override.
pub const TRACE_OUT_MAX_CUTOFF: usize = 8;

/// Transmission coefficients of the two arms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransmission")]
pub struct Transmission {
    t1: f64,
    t2: f64,
}

#[derive(Deserialize)]
struct RawTransmission {
    t1: f64,
    t2: f64,
}

impl TryFrom<RawTransmission> for Transmission {
    type Error = Error;

    fn try_from(r: RawTransmission) -> Result<Self> {
        Self::new(r.t1, r.t2)
    }
}

impl Transmission {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        for t in [t1, t2] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidTransmission(t));
            }
        }
        Ok(Self { t1, t2 })
    }

    pub fn symmetric(t: f64) -> Result<Self> {
        Self::new(t, t)
    }

    pub fn lossless() -> Self {
        Self { t1: 1.0, t2: 1.0 }
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn t2(&self) -> f64 {
        self.t2
    }

    /// Beam-splitter angles `η` with `T = cos²(η/2)`.
    pub fn angles(&self) -> (f64, f64) {
        (transmission_angle(self.t1), transmission_angle(self.t2))
    }

    pub fn is_lossless(&self) -> bool {
        self.t1 == 1.0 && self.t2 == 1.0
    }
}

fn transmission_angle(t: f64) -> f64 {
    2.0 * t.sqrt().min(1.0).acos()
}

/// Hermitian, unit-trace, positive semidefinite operator on the two-mode space.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    cutoff: FockCutoff,
    matrix: CMatrix,
}

impl DensityMatrix {
    /// Validates Hermiticity (1e-12), trace (1e-10) and positivity (−1e-10).
    pub fn new(cutoff: FockCutoff, matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != cutoff.dim() || matrix.ncols() != cutoff.dim() {
            return Err(Error::DimensionMismatch {
                expected: cutoff.dim(),
                found: matrix.nrows(),
            });
        }
        let defect = hermitian_defect(&matrix);
        if defect > 1e-12 {
            return Err(Error::InvalidDensityMatrix(format!(
                "not Hermitian (deviation {defect:e})"
            )));
        }
        let tr = matrix.trace().re;
        if (tr - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidDensityMatrix(format!("trace {tr}")));
        }
        let (vals, _) = eigh(&matrix);
        if vals[0] < -1e-10 {
            return Err(Error::InvalidDensityMatrix(format!(
                "negative eigenvalue {:e}",
                vals[0]
            )));
        }
        Ok(Self { cutoff, matrix })
    }

    /// For matrices that are valid by construction (channel outputs, unitary
    /// conjugates of valid states).
    pub(crate) fn from_trusted(cutoff: FockCutoff, matrix: CMatrix) -> Self {
        Self { cutoff, matrix }
    }

    pub fn pure(state: &TwoModePureState) -> Self {
        Self {
            cutoff: state.cutoff(),
            matrix: state.projector(),
        }
    }

    /// `I / d`.
    pub fn maximally_mixed(cutoff: FockCutoff) -> Self {
        let d = cutoff.dim();
        Self {
            cutoff,
            matrix: CMatrix::identity(d, d).unscale(d as f64),
        }
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.cutoff
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// `U ρ U†`.
    pub fn conjugate(&self, unitary: &Operator) -> Self {
        let m = unitary.matrix() * &self.matrix * unitary.matrix().adjoint();
        Self::from_trusted(self.cutoff, m)
    }

    /// Convex combination `w ρ + (1 − w) σ`.
    pub fn mix(&self, other: &DensityMatrix, w: f64) -> Result<Self> {
        if self.cutoff != other.cutoff {
            return Err(Error::DimensionMismatch {
                expected: self.cutoff.dim(),
                found: other.cutoff.dim(),
            });
        }
        Ok(Self::from_trusted(
            self.cutoff,
            self.matrix.scale(w) + other.matrix.scale(1.0 - w),
        ))
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Single-mode Kraus operators `K_0 … K_N` for transmission `t`.
pub fn loss_kraus_set(cutoff: FockCutoff, t: f64) -> Result<Vec<DMatrix<f64>>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTransmission(t));
    }
    let levels = cutoff.levels();
    Ok((0..levels)
        .map(|l| {
            let mut k = DMatrix::zeros(levels, levels);
            for n in l..levels {
                let w = binomial(n, l) * t.powi((n - l) as i32) * (1.0 - t).powi(l as i32);
                k[(n - l, n)] = w.sqrt();
            }
            k
        })
        .collect())
}

/// Two-arm loss channel in Kraus form.
#[derive(Clone, Debug)]
pub struct LossChannel {
    cutoff: FockCutoff,
    trans: Transmission,
    kraus_a: Vec<DMatrix<f64>>,
    kraus_b: Vec<DMatrix<f64>>,
}

impl LossChannel {
    pub fn new(cutoff: FockCutoff, trans: Transmission) -> Self {
        // Transmission is validated on construction, so these cannot fail.
        let kraus_a = loss_kraus_set(cutoff, trans.t1()).expect("validated transmission");
        let kraus_b = loss_kraus_set(cutoff, trans.t2()).expect("validated transmission");
        Self {
            cutoff,
            trans,
            kraus_a,
            kraus_b,
        }
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.cutoff
    }

    pub fn transmission(&self) -> Transmission {
        self.trans
    }

    fn check(&self, cutoff: FockCutoff) -> Result<()> {
        if cutoff != self.cutoff {
            return Err(Error::DimensionMismatch {
                expected: self.cutoff.dim(),
                found: cutoff.dim(),
            });
        }
        Ok(())
    }

    /// All nonvanishing branch vectors `(K_l ⊗ K_m) v`.
    fn branches(&self, v: &CVector) -> Vec<CVector> {
        let levels = self.cutoff.levels();
        let psi = CMatrix::from_fn(levels, levels, |i, j| v[i * levels + j]);
        let mut out = Vec::with_capacity(levels * levels);
        for ka in &self.kraus_a {
            let left = ka.map(|x| C64::new(x, 0.0)) * &psi;
            for kb in &self.kraus_b {
                let kbt = kb.transpose().map(|x| C64::new(x, 0.0));
                let m = &left * kbt;
                out.push(CVector::from_fn(levels * levels, |k, _| {
                    m[(k / levels, k % levels)]
                }));
            }
        }
        out
    }

    /// Output state for a pure input.
    pub fn apply(&self, state: &TwoModePureState) -> Result<DensityMatrix> {
        self.check(state.cutoff())?;
        let m = self.apply_outer(state.amplitudes(), state.amplitudes());
        Ok(DensityMatrix::from_trusted(self.cutoff, m))
    }

    /// Channel acting on the (not necessarily Hermitian) operator `|a⟩⟨b|`.
    pub fn apply_outer(&self, a: &CVector, b: &CVector) -> CMatrix {
        let ba = self.branches(a);
        let bb = self.branches(b);
        let dim = self.cutoff.dim();
        let mut rho = CMatrix::zeros(dim, dim);
        for (x, y) in ba.iter().zip(bb.iter()) {
            if x.norm_squared() == 0.0 || y.norm_squared() == 0.0 {
                continue;
            }
            rho.ger(C64::new(1.0, 0.0), x, &y.conjugate(), C64::new(1.0, 0.0));
        }
        rho
    }

    /// Channel acting on an arbitrary operator (linear extension).
    pub fn apply_operator(&self, op: &CMatrix) -> CMatrix {
        let dim = self.cutoff.dim();
        let mut out = CMatrix::zeros(dim, dim);
        for ka in &self.kraus_a {
            for kb in &self.kraus_b {
                let k = ka.kronecker(kb).map(|x| C64::new(x, 0.0));
                out += &k * op * k.adjoint();
            }
        }
        out
    }

    pub fn apply_density(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        self.check(rho.cutoff())?;
        Ok(DensityMatrix::from_trusted(
            self.cutoff,
            self.apply_operator(rho.matrix()),
        ))
    }
}

/// Loss on both arms, Kraus form.
pub fn apply_loss(state: &TwoModePureState, trans: Transmission) -> Result<DensityMatrix> {
    LossChannel::new(state.cutoff(), trans).apply(state)
}

/// Reference implementation: couples modes a, b to vacuum modes c, d with
/// `exp(i(η/2)(a†c + a c†))`, `exp(i(η/2)(b†d + b d†))` and traces out c, d.
/// Works on the `(N+1)⁴` space; refuses `N > 8` unless `allow_large` is set.
pub fn loss_via_trace_out(
    state: &TwoModePureState,
    trans: Transmission,
    allow_large: bool,
) -> Result<DensityMatrix> {
    let cutoff = state.cutoff();
    let n = cutoff.n();
    if n > TRACE_OUT_MAX_CUTOFF && !allow_large {
        return Err(Error::CutoffTooLarge {
            n,
            max: TRACE_OUT_MAX_CUTOFF,
        });
    }
    let l = cutoff.levels();
    let (eta1, eta2) = trans.angles();
    let b1 = coupling_unitary(cutoff, eta1);
    let b2 = coupling_unitary(cutoff, eta2);

    // Four-mode tensor with index ((a·L + b)·L + c)·L + d.
    let idx = |a: usize, b: usize, c: usize, d: usize| ((a * l + b) * l + c) * l + d;
    let mut psi = vec![C64::new(0.0, 0.0); l * l * l * l];
    for (a, b) in cutoff.kets() {
        psi[idx(a, b, 0, 0)] = state.amplitude(a, b);
    }

    // B_ac acts on the (a, c) pair, flat index a·L + c.
    let mut next = vec![C64::new(0.0, 0.0); psi.len()];
    for b in 0..l {
        for d in 0..l {
            for a_out in 0..l {
                for c_out in 0..l {
                    let mut acc = C64::new(0.0, 0.0);
                    for a_in in 0..l {
                        for c_in in 0..l {
                            acc += b1[(a_out * l + c_out, a_in * l + c_in)] * psi[idx(a_in, b, c_in, d)];
                        }
                    }
                    next[idx(a_out, b, c_out, d)] = acc;
                }
            }
        }
    }
    let psi = next;
    let mut next = vec![C64::new(0.0, 0.0); psi.len()];
    for a in 0..l {
        for c in 0..l {
            for b_out in 0..l {
                for d_out in 0..l {
                    let mut acc = C64::new(0.0, 0.0);
                    for b_in in 0..l {
                        for d_in in 0..l {
                            acc += b2[(b_out * l + d_out, b_in * l + d_in)] * psi[idx(a, b_in, c, d_in)];
                        }
                    }
                    next[idx(a, b_out, c, d_out)] = acc;
                }
            }
        }
    }
    let psi = next;

    let dim = cutoff.dim();
    let mut rho = CMatrix::zeros(dim, dim);
    for (r, (a, b)) in cutoff.kets().enumerate() {
        for (s, (a2, b2)) in cutoff.kets().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for c in 0..l {
                for d in 0..l {
                    acc += psi[idx(a, b, c, d)] * psi[idx(a2, b2, c, d)].conj();
                }
            }
            rho[(r, s)] = acc;
        }
    }
    Ok(DensityMatrix::from_trusted(cutoff, rho))
}

/// `exp(i(η/2)(x†y + x y†))` on a pair of modes each truncated to `N+1`
/// levels, flat index `x·(N+1) + y`.
fn coupling_unitary(cutoff: FockCutoff, eta: f64) -> CMatrix {
    let l = cutoff.levels();
    let mut g = CMatrix::zeros(l * l, l * l);
    for x in 0..l {
        for y in 0..l {
            let src = x * l + y;
            if y >= 1 && x + 1 < l {
                g[((x + 1) * l + (y - 1), src)] += C64::new((((x + 1) * y) as f64).sqrt(), 0.0);
            }
            if x >= 1 && y + 1 < l {
                g[((x - 1) * l + (y + 1), src)] += C64::new(((x * (y + 1)) as f64).sqrt(), 0.0);
            }
        }
    }
    expm_i_hermitian(&g, eta / 2.0)
}

/// QFI of the phase family with loss applied before the phase shift and with
/// loss applied after it, both evaluated at `phi`. Returns `(before, after)`.
pub fn loss_phase_commutation_check(
    state: &TwoModePureState,
    trans: Transmission,
    generator: &Operator,
    phi: f64,
) -> Result<(f64, f64)> {
    let channel = LossChannel::new(state.cutoff(), trans);
    let before = qfi(&channel.apply(state)?, generator)?;

    let u = phase_unitary(generator, phi)?;
    let chi = state.evolve(&u)?;
    let rho_phi = channel.apply(&chi)?;
    // ∂φ (U ψψ† U†) = i(|Gχ⟩⟨χ| − |χ⟩⟨Gχ|), pushed through the channel.
    let g_chi = generator.matrix() * chi.amplitudes();
    let i = C64::new(0.0, 1.0);
    let d_rho = (channel.apply_outer(&g_chi, chi.amplitudes())
        - channel.apply_outer(chi.amplitudes(), &g_chi))
        * i;
    let after = qfi_from_derivative(&rho_phi, &d_rho);
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::build_jz;
    use crate::linalg::max_abs_diff;

    fn cut(n: usize) -> FockCutoff {
        FockCutoff::new(n).unwrap()
    }

    #[test]
    fn transmission_bounds() {
        assert!(Transmission::new(1.2, 0.5).is_err());
        assert!(Transmission::new(0.5, -0.1).is_err());
        let t = Transmission::new(0.5, 1.0).unwrap();
        let (e1, e2) = t.angles();
        assert!(((e1 / 2.0).cos().powi(2) - 0.5).abs() < 1e-15);
        assert_eq!(e2, 0.0);
        assert!(loss_kraus_set(cut(2), 1.5).is_err());
    }

    #[test]
    fn kraus_completeness_on_grid() {
        for n in 1..=6 {
            for step in 0..=10 {
                let t = step as f64 / 10.0;
                let ks = loss_kraus_set(cut(n), t).unwrap();
                let sum = ks
                    .iter()
                    .fold(DMatrix::<f64>::zeros(n + 1, n + 1), |acc, k| acc + k.transpose() * k);
                let err = (sum - DMatrix::<f64>::identity(n + 1, n + 1)).abs().max();
                assert!(err < 1e-12, "n={n} t={t} err={err}");
            }
        }
    }

    #[test]
    fn kraus_lossless_is_identity() {
        let ks = loss_kraus_set(cut(3), 1.0).unwrap();
        assert_eq!(ks[0], DMatrix::identity(4, 4));
        assert!(ks[1..].iter().all(|k| k.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn total_loss_gives_vacuum() {
        let c = cut(3);
        let s = TwoModePureState::from_real(c, &(0..16).map(|k| k as f64 + 1.0).collect::<Vec<_>>()).unwrap();
        let rho = apply_loss(&s, Transmission::new(0.0, 0.0).unwrap()).unwrap();
        let vac = DensityMatrix::pure(&TwoModePureState::basis(c, 0, 0));
        assert!(max_abs_diff(rho.matrix(), vac.matrix()) < 1e-14);
    }

    #[test]
    fn single_photon_damping() {
        let c = cut(1);
        let s = TwoModePureState::basis(c, 1, 0);
        let rho = apply_loss(&s, Transmission::new(0.8, 1.0).unwrap()).unwrap();
        let mut expected = CMatrix::zeros(4, 4);
        expected[(c.index(1, 0), c.index(1, 0))] = C64::new(0.8, 0.0);
        expected[(0, 0)] = C64::new(0.2, 0.0);
        assert!(max_abs_diff(rho.matrix(), &expected) < 1e-14);

        let oracle = loss_via_trace_out(&s, Transmission::new(0.5, 1.0).unwrap(), false).unwrap();
        let mut half = CMatrix::zeros(4, 4);
        half[(c.index(1, 0), c.index(1, 0))] = C64::new(0.5, 0.0);
        half[(0, 0)] = C64::new(0.5, 0.0);
        assert!(max_abs_diff(oracle.matrix(), &half) < 1e-12);
    }

    #[test]
    fn vacuum_and_identity_channel() {
        let c = cut(3);
        let vac = TwoModePureState::basis(c, 0, 0);
        let rho = apply_loss(&vac, Transmission::new(0.3, 0.6).unwrap()).unwrap();
        assert!(max_abs_diff(rho.matrix(), &vac.projector()) < 1e-15);
        let s = TwoModePureState::from_real(c, &(0..16).map(|k| (k as f64).sin()).collect::<Vec<_>>()).unwrap();
        let same = apply_loss(&s, Transmission::lossless()).unwrap();
        assert!(max_abs_diff(same.matrix(), &s.projector()) < 1e-15);
        let oracle = loss_via_trace_out(&s, Transmission::lossless(), false).unwrap();
        assert!(max_abs_diff(oracle.matrix(), &s.projector()) < 1e-12);
    }

    #[test]
    fn trace_out_guard() {
        let c = cut(9);
        let s = TwoModePureState::basis(c, 1, 1);
        assert!(matches!(
            loss_via_trace_out(&s, Transmission::lossless(), false),
            Err(Error::CutoffTooLarge { .. })
        ));
    }

    #[test]
    fn eq11_state_matches_oracle() {
        let c = cut(6);
        let mut w = vec![0.0; c.dim()];
        w[0] = (4.0_f64 / 6.0).sqrt();
        w[c.index(0, 6)] = (1.0_f64 / 6.0).sqrt();
        w[c.index(6, 0)] = (1.0_f64 / 6.0).sqrt();
        let s = TwoModePureState::from_real(c, &w).unwrap();
        let t = Transmission::symmetric(0.8).unwrap();
        let a = apply_loss(&s, t).unwrap();
        let b = loss_via_trace_out(&s, t, false).unwrap();
        assert!(max_abs_diff(a.matrix(), b.matrix()) < 1e-10);
        assert!(DensityMatrix::new(c, a.matrix().clone()).is_ok());
    }

    #[test]
    fn operator_extension_matches_pure_path() {
        let c = cut(2);
        let s = TwoModePureState::from_real(c, &[0.1, 0.4, -0.2, 0.3, 0.5, 0.1, -0.3, 0.2, 0.6]).unwrap();
        let ch = LossChannel::new(c, Transmission::new(0.7, 0.4).unwrap());
        let a = ch.apply(&s).unwrap();
        let b = ch.apply_operator(&s.projector());
        assert!(max_abs_diff(a.matrix(), &b) < 1e-14);
    }

    #[test]
    fn commutation_extremes() {
        let c = cut(3);
        let s = TwoModePureState::from_real(c, &(0..16).map(|k| ((k * 7 % 5) as f64) - 1.5).collect::<Vec<_>>()).unwrap();
        let jz = build_jz(c);
        let pure = qfi(&DensityMatrix::pure(&s), &jz).unwrap();
        let (b, a) = loss_phase_commutation_check(&s, Transmission::lossless(), &jz, 0.4).unwrap();
        assert!((b - pure).abs() < 1e-9 && (a - pure).abs() < 1e-9);
        let (b, a) = loss_phase_commutation_check(&s, Transmission::new(0.0, 0.0).unwrap(), &jz, 0.4).unwrap();
        assert!(b.abs() < 1e-12 && a.abs() < 1e-12);
    }
}
