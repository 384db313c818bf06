//! Analytical noiseless optimal probe states and the small-loss expansion of
//! their QFI.

use serde::{Deserialize, Serialize};

use crate::channels::{apply_loss, DensityMatrix, Transmission};
use crate::fock::{FockCutoff, PhaseKind, TwoModePureState};
use crate::metrology::{qfi, SpectralDecomposition};
use crate::{CVector, Error, Result, C64};

/// Parameters selecting a catalog state.
///
/// `relative_phases` holds `θ₁, θ₂, θ₃` in the order they appear in the
/// state formulas; missing entries default to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfpsSpec {
    pub cutoff: FockCutoff,
    pub nbar: f64,
    pub phase_kind: PhaseKind,
    #[serde(default)]
    pub relative_phases: Vec<f64>,
}

/// Which closed form applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Vacuum plus the two "N00N" kets; `n̄ ∈ (0, N]`, both phase kinds.
    VacuumNoon,
    /// "N00N" kets plus `|N, N⟩`; linear, `n̄ ∈ [N, 2N)`.
    NoonFull,
    /// Four kets `|⌊n̄⌋−N (+1), N⟩` and mirrors; nonlinear, `n̄ ∈ (N, ⌊(4N+1)/3⌋]`.
    /// Reduces to two kets for integer `n̄`.
    NonlinearMid,
    /// `|ζ, N⟩`, `|N, ζ⟩` plus `|N, N⟩` with `ζ = ⌊(N+1)/3⌋`; nonlinear,
    /// `n̄ ∈ (⌊(4N+1)/3⌋, 2N)`.
    NonlinearHigh,
}

impl OfpsSpec {
    pub fn new(cutoff: FockCutoff, nbar: f64, phase_kind: PhaseKind) -> Result<Self> {
        let spec = Self {
            cutoff,
            nbar,
            phase_kind,
            relative_phases: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_phases(mut self, phases: Vec<f64>) -> Self {
        self.relative_phases = phases;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let max = 2.0 * self.cutoff.n() as f64;
        if !(self.nbar > 0.0 && self.nbar < max) || !self.nbar.is_finite() {
            return Err(Error::InvalidMeanNumber { nbar: self.nbar, max });
        }
        Ok(())
    }

    pub fn regime(&self) -> Result<Regime> {
        self.validate()?;
        let n = self.cutoff.n() as f64;
        Ok(match self.phase_kind {
            _ if self.nbar <= n => Regime::VacuumNoon,
            PhaseKind::Linear => Regime::NoonFull,
            PhaseKind::Nonlinear => {
                if self.nbar <= nonlinear_mid_upper(self.cutoff) as f64 {
                    Regime::NonlinearMid
                } else {
                    Regime::NonlinearHigh
                }
            }
        })
    }

    fn phase(&self, k: usize) -> C64 {
        C64::from_polar(1.0, self.relative_phases.get(k).copied().unwrap_or(0.0))
    }
}

/// `⌊(4N+1)/3⌋`.
pub fn nonlinear_mid_upper(cutoff: FockCutoff) -> usize {
    (4 * cutoff.n() + 1) / 3
}

/// `ζ = ⌊(N+1)/3⌋`.
pub fn zeta(cutoff: FockCutoff) -> usize {
    (cutoff.n() + 1) / 3
}

/// The catalog state for `spec`.
pub fn noiseless_ofps(spec: &OfpsSpec) -> Result<TwoModePureState> {
    let regime = spec.regime()?;
    let c = spec.cutoff;
    let n = c.n();
    let nf = n as f64;
    let nbar = spec.nbar;
    let mut amps = CVector::zeros(c.dim());
    let mut put = |i: usize, j: usize, weight: f64, phase: C64| -> Result<()> {
        if i > n || j > n {
            return Err(Error::InvalidMeanNumber {
                nbar,
                max: 2.0 * nf,
            });
        }
        amps[c.index(i, j)] += phase * weight.max(0.0).sqrt();
        Ok(())
    };
    let one = C64::new(1.0, 0.0);
    match regime {
        Regime::VacuumNoon => {
            put(0, 0, (nf - nbar) / nf, one)?;
            put(0, n, nbar / (2.0 * nf), spec.phase(0))?;
            put(n, 0, nbar / (2.0 * nf), spec.phase(1))?;
        }
        Regime::NoonFull => {
            put(0, n, (2.0 * nf - nbar) / (2.0 * nf), spec.phase(0))?;
            put(n, 0, (2.0 * nf - nbar) / (2.0 * nf), spec.phase(1))?;
            put(n, n, (nbar - nf) / nf, one)?;
        }
        Regime::NonlinearMid => {
            let fl = nbar.floor();
            let frac = nbar - fl;
            let lo = fl as usize - n;
            if frac > 0.0 {
                put(lo + 1, n, frac / 2.0, one)?;
                put(n, lo + 1, frac / 2.0, spec.phase(0))?;
            }
            put(lo, n, (1.0 - frac) / 2.0, spec.phase(1))?;
            put(n, lo, (1.0 - frac) / 2.0, spec.phase(2))?;
        }
        Regime::NonlinearHigh => {
            let z = zeta(c);
            let zf = z as f64;
            put(z, n, (2.0 * nf - nbar) / (2.0 * (nf - zf)), spec.phase(0))?;
            put(n, z, (2.0 * nf - nbar) / (2.0 * (nf - zf)), spec.phase(1))?;
            put(n, n, (nbar - nf - zf) / (nf - zf), one)?;
        }
    }
    TwoModePureState::normalized(c, amps)
}

/// QFI of the catalog state: closed forms `n̄N` and `N(2N − n̄)` in the linear
/// regimes, numerical evaluation otherwise.
pub fn noiseless_ofps_qfi(spec: &OfpsSpec) -> Result<f64> {
    let n = spec.cutoff.n() as f64;
    match (spec.phase_kind, spec.regime()?) {
        (PhaseKind::Linear, Regime::VacuumNoon) => Ok(spec.nbar * n),
        (PhaseKind::Linear, Regime::NoonFull) => Ok(n * (2.0 * n - spec.nbar)),
        (kind, _) => {
            let state = noiseless_ofps(spec)?;
            qfi(&DensityMatrix::pure(&state), &kind.generator(spec.cutoff))
        }
    }
}

/// First-order small-loss approximation of the QFI of a catalog probe under
/// transmissions `(1 − δ₁, 1 − δ₂)`: `4λ₀ var_{|λ₀⟩}(G)` on the dominant
/// eigen-branch of the lossy state.
pub fn taylor_qfi_first_order(spec: &OfpsSpec, delta1: f64, delta2: f64) -> Result<f64> {
    for d in [delta1, delta2] {
        if !(0.0..=0.2).contains(&d) {
            return Err(Error::InvalidPerturbation(d));
        }
    }
    let state = noiseless_ofps(spec)?;
    let rho = apply_loss(&state, Transmission::new(1.0 - delta1, 1.0 - delta2)?)?;
    let spec_rho = SpectralDecomposition::of(&rho);
    let dim = spec_rho.eigenvalues.len();
    let dominant = spec_rho.eigenvalues[dim - 1];
    let next = if dim > 1 {
        spec_rho.eigenvalues[dim - 2].max(0.0)
    } else {
        0.0
    };
    if dominant < 10.0 * next {
        return Err(Error::BranchCrossing { dominant, next });
    }
    let v = spec_rho.eigenvectors.column(dim - 1);
    let g = spec.phase_kind.generator(spec.cutoff);
    let gv = g.matrix() * v;
    let mean = v.dotc(&gv).re;
    let second = gv.norm_squared();
    Ok(4.0 * dominant * (second - mean * mean))
}
