//! Fisher information, symmetric logarithmic derivative and measurements.
//!
//! Every measurement here is read out after the second beam splitter
//! `V = exp(iπ J_x / 2)`: outcome probabilities are
//! `p_k(φ) = Tr(V U ρ U† V† E_k)` with `U = exp(iφ G)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::channels::DensityMatrix;
use crate::fock::{beam_splitter_rotation, phase_unitary, FockCutoff, Operator};
use crate::linalg::eigh;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Eigenvalues at or below this are outside the support of ρ.
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 1e-12;
/// Default central-difference step for the classical Fisher information.
pub const DEFAULT_CFI_STEP: f64 = 1e-5;

const ZERO_PROB: f64 = 1e-12;
const ZERO_SLOPE: f64 = 1e-9;

/// Spectrum of a density matrix with an explicit support threshold.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMatrix,
    pub support_threshold: f64,
}

impl SpectralDecomposition {
    pub fn of(rho: &DensityMatrix) -> Self {
        Self::with_threshold(rho, DEFAULT_SUPPORT_THRESHOLD)
    }

    pub fn with_threshold(rho: &DensityMatrix, support_threshold: f64) -> Self {
        let (eigenvalues, eigenvectors) = eigh(rho.matrix());
        Self {
            eigenvalues,
            eigenvectors,
            support_threshold,
        }
    }

    /// Indices of eigenvalues in the support.
    pub fn support(&self) -> Vec<usize> {
        (0..self.eigenvalues.len())
            .filter(|&k| self.eigenvalues[k] > self.support_threshold)
            .collect()
    }

    fn check_state(&self) -> Result<()> {
        let sum: f64 = self.eigenvalues.iter().sum();
        if !((sum - 1.0).abs() <= 1e-10) || self.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDensityMatrix(format!("eigenvalues sum to {sum}")));
        }
        if self.eigenvalues[0] < -1e-10 {
            return Err(Error::InvalidDensityMatrix(format!(
                "negative eigenvalue {:e}",
                self.eigenvalues[0]
            )));
        }
        Ok(())
    }
}

/// QFI of the unitary family `exp(iφG) ρ exp(−iφG)` from the spectral formula
/// `Σ_S 4λ_i var_i(G) − Σ_{i≠j ∈ S} 8λ_iλ_j/(λ_i+λ_j) |G_ij|²`.
pub fn qfi(rho: &DensityMatrix, generator: &Operator) -> Result<f64> {
    qfi_with_threshold(rho, generator, DEFAULT_SUPPORT_THRESHOLD)
}

pub fn qfi_with_threshold(rho: &DensityMatrix, generator: &Operator, threshold: f64) -> Result<f64> {
    generator.require_hermitian()?;
    check_cutoff(rho.cutoff(), generator.cutoff())?;
    let spec = SpectralDecomposition::with_threshold(rho, threshold);
    spec.check_state()?;
    Ok(qfi_from_spectrum(&spec, generator))
}

pub(crate) fn qfi_from_spectrum(spec: &SpectralDecomposition, generator: &Operator) -> f64 {
    let support = spec.support();
    let vs = spec.eigenvectors.select_columns(&support);
    let gv = generator.matrix() * &vs;
    // Generator in the support eigenbasis.
    let g_ss = vs.adjoint() * &gv;
    let lambdas: Vec<f64> = support.iter().map(|&k| spec.eigenvalues[k]).collect();
    let mut f = 0.0;
    for (a, &la) in lambdas.iter().enumerate() {
        let second = gv.column(a).norm_squared();
        let first = g_ss[(a, a)].re;
        f += 4.0 * la * (second - first * first);
    }
    for (a, &la) in lambdas.iter().enumerate() {
        for (b, &lb) in lambdas.iter().enumerate() {
            if a != b {
                f -= 8.0 * la * lb / (la + lb) * g_ss[(a, b)].norm_sqr();
            }
        }
    }
    f.max(0.0)
}

/// QFI of a general family from `ρ_φ` and `∂_φρ_φ`:
/// `Σ_{λ_i+λ_j > thr} 2 |⟨λ_i|∂ρ|λ_j⟩|² / (λ_i + λ_j)`.
pub fn qfi_from_derivative(rho_phi: &DensityMatrix, d_rho: &CMatrix) -> f64 {
    let spec = SpectralDecomposition::of(rho_phi);
    let d = spec.eigenvectors.adjoint() * d_rho * &spec.eigenvectors;
    let n = spec.eigenvalues.len();
    let mut f = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s = spec.eigenvalues[i] + spec.eigenvalues[j];
            if s > spec.support_threshold {
                f += 2.0 * d[(i, j)].norm_sqr() / s;
            }
        }
    }
    f
}

fn check_cutoff(a: FockCutoff, b: FockCutoff) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// Symmetric logarithmic derivative at a given phase.
#[derive(Clone, Debug)]
pub struct SldOperator {
    pub matrix: CMatrix,
    pub eval_phase: f64,
}

/// Rotated state `ρ_φ` and its analytic derivative `i[G, ρ_φ]`.
pub fn rotated_state(rho: &DensityMatrix, generator: &Operator, phi: f64) -> Result<(DensityMatrix, CMatrix)> {
    check_cutoff(rho.cutoff(), generator.cutoff())?;
    let u = phase_unitary(generator, phi)?;
    let rho_phi = rho.conjugate(&u);
    let g = generator.matrix();
    let d = (g * rho_phi.matrix() - rho_phi.matrix() * g) * C64::new(0.0, 1.0);
    Ok((rho_phi, d))
}

pub fn sld(rho: &DensityMatrix, generator: &Operator, phi: f64) -> Result<SldOperator> {
    generator.require_hermitian()?;
    let (rho_phi, d_rho) = rotated_state(rho, generator, phi)?;
    let spec = SpectralDecomposition::of(&rho_phi);
    spec.check_state()?;
    let v = &spec.eigenvectors;
    let d = v.adjoint() * d_rho * v;
    let n = spec.eigenvalues.len();
    let l_eig = CMatrix::from_fn(n, n, |i, j| {
        let s = spec.eigenvalues[i] + spec.eigenvalues[j];
        if s > spec.support_threshold {
            d[(i, j)] * (2.0 / s)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let l = v * l_eig * v.adjoint();
    // Hermitize away round-off.
    let l = (&l + l.adjoint()).scale(0.5);
    Ok(SldOperator {
        matrix: l,
        eval_phase: phi,
    })
}

/// Which family a POVM belongs to; recorded in output metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PovmKind {
    /// Photon-number parity of output mode a.
    Parity,
    /// Joint photon counting on both output modes.
    ParticleCounting,
    /// SLD eigenbasis built at an estimated phase.
    Sldm { phi_hat: f64 },
}

/// A POVM element written as `Σ_r |v_r⟩⟨v_r|` in the output-port frame.
#[derive(Clone, Debug)]
pub struct PovmElement {
    pub vectors: Vec<CVector>,
}

impl PovmElement {
    pub fn matrix(&self, dim: usize) -> CMatrix {
        let mut m = CMatrix::zeros(dim, dim);
        for v in &self.vectors {
            m += v * v.adjoint();
        }
        m
    }
}

/// Finite measurement with elements summing to the identity.
#[derive(Clone, Debug)]
pub struct Povm {
    pub cutoff: FockCutoff,
    pub kind: PovmKind,
    pub elements: Vec<PovmElement>,
    pub labels: Vec<String>,
}

impl Povm {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Largest elementwise deviation of `Σ E_k` from the identity.
    pub fn completeness_defect(&self) -> f64 {
        let dim = self.cutoff.dim();
        let mut sum = CMatrix::zeros(dim, dim);
        for e in &self.elements {
            sum += e.matrix(dim);
        }
        sum -= CMatrix::identity(dim, dim);
        sum.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let defect = self.completeness_defect();
        if defect > 1e-10 {
            return Err(Error::InvalidPovm(format!("elements miss identity by {defect:e}")));
        }
        Ok(())
    }
}

pub const PARITY_CONVENTION: &str = "parity (-1)^i of output mode a after the second beam splitter";

/// Photon-number parity of output mode a.
pub fn parity_povm(cutoff: FockCutoff) -> Povm {
    let mut even = Vec::new();
    let mut odd = Vec::new();
    for (k, (i, _)) in cutoff.kets().enumerate() {
        let v = unit(cutoff.dim(), k);
        if i % 2 == 0 {
            even.push(v);
        } else {
            odd.push(v);
        }
    }
    Povm {
        cutoff,
        kind: PovmKind::Parity,
        elements: vec![PovmElement { vectors: even }, PovmElement { vectors: odd }],
        labels: vec!["even".into(), "odd".into()],
    }
}

/// Joint photon counting: one projector per output ket `|i, j⟩`.
pub fn pc_povm(cutoff: FockCutoff) -> Povm {
    let (elements, labels) = cutoff
        .kets()
        .enumerate()
        .map(|(k, (i, j))| {
            (
                PovmElement {
                    vectors: vec![unit(cutoff.dim(), k)],
                },
                format!("{i},{j}"),
            )
        })
        .unzip();
    Povm {
        cutoff,
        kind: PovmKind::ParticleCounting,
        elements,
        labels,
    }
}

/// Projective measurement on the SLD eigenbasis at `phi_hat`, rotated by the
/// second beam splitter so that its action cancels at readout.
pub fn sldm_povm(rho: &DensityMatrix, generator: &Operator, phi_hat: f64) -> Result<Povm> {
    let l = sld(rho, generator, phi_hat)?;
    let (_, vecs) = eigh(&l.matrix);
    let v = beam_splitter_rotation(rho.cutoff());
    let rotated = v.matrix() * vecs;
    let dim = rho.cutoff().dim();
    let elements = (0..dim)
        .map(|k| PovmElement {
            vectors: vec![rotated.column(k).into_owned()],
        })
        .collect();
    Ok(Povm {
        cutoff: rho.cutoff(),
        kind: PovmKind::Sldm { phi_hat },
        elements,
        labels: (0..dim).map(|k| format!("L{k}")).collect(),
    })
}

fn unit(dim: usize, k: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    v[k] = C64::new(1.0, 0.0);
    v
}

/// Precomputed outcome-probability map `φ ↦ p(φ)` for a fixed
/// `(ρ, G, POVM)` triple.
///
/// For diagonal generators each `p_k(φ)` is a finite trigonometric sum
/// `Σ_ω c_{k,ω} e^{iφω}` over the distinct gaps `ω = g_a − g_b`; the
/// coefficients are computed once so that evaluation on a phase grid is cheap.
#[derive(Clone, Debug)]
pub struct ProbabilityModel {
    rho: DensityMatrix,
    generator: Operator,
    repr: Repr,
    outcomes: usize,
}

#[derive(Clone, Debug)]
enum Repr {
    Fourier {
        /// Nonnegative frequencies; index 0 is ω = 0.
        freqs: Vec<f64>,
        /// `coeffs[k][f]` for outcome k.
        coeffs: Vec<Vec<C64>>,
    },
    Dense {
        /// Measurement vectors pulled back through `V†`, per outcome.
        pulled: Vec<Vec<CVector>>,
    },
}

impl ProbabilityModel {
    pub fn new(rho: &DensityMatrix, generator: &Operator, povm: &Povm) -> Result<Self> {
        generator.require_hermitian()?;
        check_cutoff(rho.cutoff(), generator.cutoff())?;
        check_cutoff(rho.cutoff(), povm.cutoff)?;
        let v = beam_splitter_rotation(rho.cutoff());
        let vdag = v.matrix().adjoint();
        let pulled: Vec<Vec<CVector>> = povm
            .elements
            .iter()
            .map(|e| e.vectors.iter().map(|x| &vdag * x).collect())
            .collect();
        let repr = match generator.diagonal() {
            Some(g) => fourier_repr(rho.matrix(), g, &pulled),
            None => Repr::Dense { pulled },
        };
        Ok(Self {
            rho: rho.clone(),
            generator: generator.clone(),
            repr,
            outcomes: povm.len(),
        })
    }

    pub fn outcomes(&self) -> usize {
        self.outcomes
    }

    pub fn rho(&self) -> &DensityMatrix {
        &self.rho
    }

    pub fn generator(&self) -> &Operator {
        &self.generator
    }

    /// Raw Born-rule values before clipping.
    pub fn raw_probabilities(&self, phi: f64) -> Vec<f64> {
        match &self.repr {
            Repr::Fourier { freqs, coeffs } => {
                let phases: Vec<C64> = freqs.iter().map(|&w| C64::from_polar(1.0, phi * w)).collect();
                coeffs
                    .iter()
                    .map(|c| {
                        let mut p = c[0].re;
                        for (cf, e) in c.iter().zip(phases.iter()).skip(1) {
                            p += 2.0 * (cf * e).re;
                        }
                        p
                    })
                    .collect()
            }
            Repr::Dense { pulled } => {
                let u = phase_unitary(&self.generator, phi).expect("Hermitian generator");
                let sigma = self.rho.conjugate(&u);
                pulled
                    .iter()
                    .map(|vs| {
                        vs.iter()
                            .map(|w| (w.adjoint() * sigma.matrix() * w)[(0, 0)].re)
                            .sum()
                    })
                    .collect()
            }
        }
    }

    /// Born-rule value of one outcome, negative round-off clipped to zero.
    pub fn outcome_probability(&self, k: usize, phi: f64) -> f64 {
        let p = match &self.repr {
            Repr::Fourier { freqs, coeffs } => {
                let c = &coeffs[k];
                let mut p = c[0].re;
                for (cf, &w) in c.iter().zip(freqs.iter()).skip(1) {
                    p += 2.0 * (cf * C64::from_polar(1.0, phi * w)).re;
                }
                p
            }
            Repr::Dense { .. } => self.raw_probabilities(phi)[k],
        };
        p.max(0.0)
    }

    /// Probabilities with negative round-off clipped and the vector
    /// renormalized.
    pub fn probabilities(&self, phi: f64) -> Vec<f64> {
        let mut p = self.raw_probabilities(phi);
        for x in p.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let s: f64 = p.iter().sum();
        if s > 0.0 {
            for x in p.iter_mut() {
                *x /= s;
            }
        }
        p
    }

    pub fn cfi(&self, phi: f64) -> CfiReport {
        self.cfi_with_step(phi, DEFAULT_CFI_STEP)
    }

    /// Classical Fisher information by central differences.
    pub fn cfi_with_step(&self, phi: f64, h: f64) -> CfiReport {
        let p0 = self.probabilities(phi);
        let pp = self.probabilities(phi + h);
        let pm = self.probabilities(phi - h);
        let mut value = 0.0;
        let mut singular = 0;
        for k in 0..p0.len() {
            let dp = (pp[k] - pm[k]) / (2.0 * h);
            if p0[k] < ZERO_PROB {
                if dp.abs() >= ZERO_SLOPE {
                    singular += 1;
                }
                continue;
            }
            value += dp * dp / p0[k];
        }
        if singular > 0 {
            log::warn!("{singular} outcome(s) with vanishing probability but nonzero slope at φ = {phi}");
            let cap = qfi(&self.rho, &self.generator).unwrap_or(f64::INFINITY);
            value = cap;
        }
        CfiReport { value, singular }
    }
}

/// Classical Fisher information with the count of singular outcomes
/// (zero probability, nonzero slope). When any are present the value is
/// capped at the QFI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfiReport {
    pub value: f64,
    pub singular: usize,
}

fn fourier_repr(rho: &CMatrix, g: &[f64], pulled: &[Vec<CVector>]) -> Repr {
    let dim = g.len();
    // Distinct gaps keyed on a fine rational grid.
    let key = |w: f64| (w * 1e9).round() as i64;
    let mut index: BTreeMap<i64, f64> = BTreeMap::new();
    for &ga in g {
        for &gb in g {
            let w = ga - gb;
            if w >= -1e-12 {
                index.entry(key(w.max(0.0))).or_insert(w.max(0.0));
            }
        }
    }
    let freqs: Vec<f64> = index.values().copied().collect();
    let pos: BTreeMap<i64, usize> = index.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    // Pair (a, b) with ω_ab ≥ 0 → frequency slot.
    let mut slot = vec![usize::MAX; dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            let w = g[a] - g[b];
            if w >= -1e-12 {
                slot[a * dim + b] = pos[&key(w.max(0.0))];
            }
        }
    }
    let coeffs = pulled
        .iter()
        .map(|vs| {
            let mut c = vec![C64::new(0.0, 0.0); freqs.len()];
            for w in vs {
                for a in 0..dim {
                    let wa = w[a].conj();
                    if wa.norm_sqr() == 0.0 {
                        continue;
                    }
                    for b in 0..dim {
                        let s = slot[a * dim + b];
                        if s == usize::MAX {
                            continue;
                        }
                        // Both orderings of ω = 0 pairs land in slot 0;
                        // ω > 0 pairs stand in for their conjugate mirrors.
                        c[s] += wa * rho[(a, b)] * w[b];
                    }
                }
            }
            c
        })
        .collect();
    Repr::Fourier { freqs, coeffs }
}

/// Born-rule outcome probabilities after the phase shift and the second beam
/// splitter.
pub fn outcome_probabilities(rho: &DensityMatrix, generator: &Operator, phi: f64, povm: &Povm) -> Result<Vec<f64>> {
    Ok(ProbabilityModel::new(rho, generator, povm)?.probabilities(phi))
}

/// Classical Fisher information of `povm` at `phi`.
pub fn cfi(rho: &DensityMatrix, generator: &Operator, phi: f64, povm: &Povm) -> Result<f64> {
    Ok(ProbabilityModel::new(rho, generator, povm)?.cfi(phi).value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{apply_loss, Transmission};
    use crate::fock::{build_jz, build_nonlinear_generator, TwoModePureState};
    use crate::linalg::trace_product_re;

    fn cut(n: usize) -> FockCutoff {
        FockCutoff::new(n).unwrap()
    }

    fn eq11(n: usize, nbar: f64) -> TwoModePureState {
        let c = cut(n);
        let nf = n as f64;
        let mut w = vec![0.0; c.dim()];
        w[0] = ((nf - nbar) / nf).sqrt();
        w[c.index(0, n)] = (nbar / (2.0 * nf)).sqrt();
        w[c.index(n, 0)] = (nbar / (2.0 * nf)).sqrt();
        TwoModePureState::from_real(c, &w).unwrap()
    }

    fn eq12(n: usize, nbar: f64) -> TwoModePureState {
        let c = cut(n);
        let nf = n as f64;
        let mut w = vec![0.0; c.dim()];
        w[c.index(0, n)] = ((2.0 * nf - nbar) / (2.0 * nf)).sqrt();
        w[c.index(n, 0)] = ((2.0 * nf - nbar) / (2.0 * nf)).sqrt();
        w[c.index(n, n)] = ((nbar - nf) / nf).sqrt();
        TwoModePureState::from_real(c, &w).unwrap()
    }

    #[test]
    fn qfi_closed_forms() {
        let rho = DensityMatrix::pure(&eq11(6, 2.0));
        assert!((qfi(&rho, &build_jz(cut(6))).unwrap() - 12.0).abs() < 1e-9);
        let rho = DensityMatrix::pure(&eq12(6, 8.0));
        assert!((qfi(&rho, &build_jz(cut(6))).unwrap() - 24.0).abs() < 1e-9);
        // ⟨(nJz)²⟩ = (n̄/2N)·2·(N²/2)² = n̄N³/4, mean zero → F = n̄N³.
        let rho = DensityMatrix::pure(&eq11(6, 2.0));
        assert!((qfi(&rho, &build_nonlinear_generator(cut(6))).unwrap() - 432.0).abs() < 1e-8);
    }

    #[test]
    fn maximally_mixed_has_zero_qfi() {
        let rho = DensityMatrix::maximally_mixed(cut(3));
        assert!(qfi(&rho, &build_jz(cut(3))).unwrap().abs() < 1e-12);
    }

    #[test]
    fn qfi_rejects_bad_inputs() {
        let c = cut(1);
        let mut m = CMatrix::zeros(4, 4);
        m[(0, 1)] = C64::new(1.0, 0.0);
        let op = Operator::from_matrix(c, m).unwrap();
        let rho = DensityMatrix::maximally_mixed(c);
        assert!(matches!(qfi(&rho, &op), Err(Error::NotHermitian(_))));
        let bad = DensityMatrix::from_trusted(c, CMatrix::identity(4, 4));
        assert!(qfi(&bad, &build_jz(c)).is_err());
    }

    #[test]
    fn sld_traces_on_lossy_state() {
        let c = cut(6);
        let rho = apply_loss(&eq11(6, 2.0), Transmission::symmetric(0.8).unwrap()).unwrap();
        let g = build_jz(c);
        let f = qfi(&rho, &g).unwrap();
        let l = sld(&rho, &g, 0.2).unwrap();
        let (rho_phi, _) = rotated_state(&rho, &g, 0.2).unwrap();
        assert!(trace_product_re(rho_phi.matrix(), &l.matrix).abs() < 1e-9);
        let l2 = &l.matrix * &l.matrix;
        assert!((trace_product_re(rho_phi.matrix(), &l2) - f).abs() < 1e-8);
    }

    #[test]
    fn pure_state_sld_is_twice_derivative() {
        let c = cut(3);
        let s = TwoModePureState::from_real(c, &(0..16).map(|k| (k as f64 * 0.7).cos()).collect::<Vec<_>>()).unwrap();
        let rho = DensityMatrix::pure(&s);
        let g = build_jz(c);
        let l = sld(&rho, &g, 0.3).unwrap();
        let (_, d) = rotated_state(&rho, &g, 0.3).unwrap();
        let diff = &l.matrix - d.scale(2.0);
        assert!(diff.iter().all(|z| z.norm() < 1e-10));
    }

    #[test]
    fn povm_catalog_complete() {
        for n in 1..=4 {
            let c = cut(n);
            let par = parity_povm(c);
            assert!(par.completeness_defect() < 1e-14);
            let even = par.elements[0].matrix(c.dim());
            assert!(crate::linalg::max_abs_diff(&(&even * &even), &even) < 1e-14);
            let pc = pc_povm(c);
            assert_eq!(pc.len(), c.dim());
            assert!(pc.completeness_defect() < 1e-12);
        }
    }

    #[test]
    fn vacuum_probabilities() {
        let c = cut(3);
        let rho = DensityMatrix::pure(&TwoModePureState::basis(c, 0, 0));
        let g = build_jz(c);
        let p = outcome_probabilities(&rho, &g, 0.0, &pc_povm(c)).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        let q = outcome_probabilities(&rho, &g, 0.0, &parity_povm(c)).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probabilities_periodic_and_normalized() {
        let c = cut(3);
        let s = TwoModePureState::from_real(c, &(0..16).map(|k| (k as f64 * 1.3).sin()).collect::<Vec<_>>()).unwrap();
        let rho = apply_loss(&s, Transmission::new(0.7, 0.9).unwrap()).unwrap();
        let g = build_jz(c);
        let model = ProbabilityModel::new(&rho, &g, &pc_povm(c)).unwrap();
        let a = model.probabilities(0.37);
        let b = model.probabilities(0.37 + 4.0 * std::f64::consts::PI);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn fourier_and_dense_paths_agree() {
        let c = cut(3);
        let s = TwoModePureState::from_real(c, &(0..16).map(|k| (k as f64 * 0.9).cos() + 0.1).collect::<Vec<_>>()).unwrap();
        let rho = apply_loss(&s, Transmission::new(0.6, 0.85).unwrap()).unwrap();
        for g in [build_jz(c), build_nonlinear_generator(c)] {
            let povm = sldm_povm(&rho, &g, 0.1).unwrap();
            let fast = ProbabilityModel::new(&rho, &g, &povm).unwrap();
            // Direct Born-rule evaluation as the reference.
            let dense_g = g.clone();
            let v = beam_splitter_rotation(c).matrix().adjoint();
            let pulled = povm.elements.iter().map(|e| e.vectors.iter().map(|x| &v * x).collect()).collect();
            let slow = ProbabilityModel {
                rho: rho.clone(),
                generator: dense_g,
                repr: Repr::Dense { pulled },
                outcomes: povm.len(),
            };
            for phi in [0.0, 0.3, 1.7] {
                let a = fast.raw_probabilities(phi);
                let b = slow.raw_probabilities(phi);
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sldm_attains_qfi_at_build_point() {
        let c = cut(6);
        let rho = apply_loss(&eq11(6, 2.0), Transmission::symmetric(0.8).unwrap()).unwrap();
        let g = build_jz(c);
        let f = qfi(&rho, &g).unwrap();
        let povm = sldm_povm(&rho, &g, 0.2).unwrap();
        assert!(povm.completeness_defect() < 1e-10);
        let i = cfi(&rho, &g, 0.2, &povm).unwrap();
        assert!((i - f).abs() <= 1e-6 * f, "cfi {i} qfi {f}");
    }
}
