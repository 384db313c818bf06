//! Two-mode Fock basis and the operator algebra used by every other module.
//!
//! Basis kets `|i, j⟩` with `0 <= i, j <= N` are stored in row-major order,
//! flat index `k = i·(N+1) + j`.

use serde::{Deserialize, Serialize};

use crate::linalg::{eigh, expm_i_hermitian, hermitian_defect, unitary_defect};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Per-mode photon-number cutoff `N` (the Fock dimension).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct FockCutoff(usize);

impl FockCutoff {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidCutoff(n));
        }
        Ok(Self(n))
    }

    pub fn n(self) -> usize {
        self.0
    }

    /// Levels per mode, `N + 1`.
    pub fn levels(self) -> usize {
        self.0 + 1
    }

    /// Two-mode Hilbert-space dimension `(N + 1)²`.
    pub fn dim(self) -> usize {
        self.levels() * self.levels()
    }

    pub fn index(self, i: usize, j: usize) -> usize {
        debug_assert!(i <= self.0 && j <= self.0);
        i * self.levels() + j
    }

    /// Inverse of [`FockCutoff::index`].
    pub fn ket(self, k: usize) -> (usize, usize) {
        (k / self.levels(), k % self.levels())
    }

    /// All kets in flat-index order.
    pub fn kets(self) -> impl Iterator<Item = (usize, usize)> {
        let l = self.levels();
        (0..l * l).map(move |k| (k / l, k % l))
    }
}

impl TryFrom<usize> for FockCutoff {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        Self::new(n)
    }
}

impl From<FockCutoff> for usize {
    fn from(c: FockCutoff) -> usize {
        c.0
    }
}

/// Linear (`J_z`) or Kerr-type nonlinear (`n J_z`) phase accumulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Linear,
    Nonlinear,
}

impl PhaseKind {
    pub fn generator(self, cutoff: FockCutoff) -> Operator {
        match self {
            PhaseKind::Linear => build_jz(cutoff),
            PhaseKind::Nonlinear => build_nonlinear_generator(cutoff),
        }
    }
}

impl std::str::FromStr for PhaseKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "lin" => Ok(PhaseKind::Linear),
            "nonlinear" | "non" => Ok(PhaseKind::Nonlinear),
            other => Err(format!("unknown phase kind `{other}` (expected linear|nonlinear)")),
        }
    }
}

impl std::fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhaseKind::Linear => "linear",
            PhaseKind::Nonlinear => "nonlinear",
        })
    }
}

/// Pure two-mode state `Σ c_ij |i, j⟩`.
///
/// Serialized as the cutoff plus a flat row-major list of `[re, im]` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateRepr", into = "StateRepr")]
pub struct TwoModePureState {
    cutoff: FockCutoff,
    amplitudes: CVector,
}

#[derive(Serialize, Deserialize)]
struct StateRepr {
    cutoff: FockCutoff,
    amplitudes: Vec<[f64; 2]>,
}

impl From<TwoModePureState> for StateRepr {
    fn from(s: TwoModePureState) -> Self {
        Self {
            cutoff: s.cutoff,
            amplitudes: s.amplitudes.iter().map(|z| [z.re, z.im]).collect(),
        }
    }
}

impl TryFrom<StateRepr> for TwoModePureState {
    type Error = Error;

    fn try_from(r: StateRepr) -> Result<Self> {
        let amps = CVector::from_iterator(r.amplitudes.len(), r.amplitudes.iter().map(|p| C64::new(p[0], p[1])));
        // Round-tripped text may lose the last ulp of the norm.
        Self::normalized(r.cutoff, amps)
    }
}

impl TwoModePureState {
    /// Wraps amplitudes that must already be normalized to within `1e-12`.
    pub fn new(cutoff: FockCutoff, amplitudes: CVector) -> Result<Self> {
        if amplitudes.len() != cutoff.dim() {
            return Err(Error::DimensionMismatch {
                expected: cutoff.dim(),
                found: amplitudes.len(),
            });
        }
        let norm_sq = amplitudes.norm_squared();
        if (norm_sq - 1.0).abs() > 1e-12 {
            return Err(Error::NotNormalized(norm_sq));
        }
        Ok(Self { cutoff, amplitudes })
    }

    /// Normalizes arbitrary nonzero amplitudes.
    pub fn normalized(cutoff: FockCutoff, amplitudes: CVector) -> Result<Self> {
        if amplitudes.len() != cutoff.dim() {
            return Err(Error::DimensionMismatch {
                expected: cutoff.dim(),
                found: amplitudes.len(),
            });
        }
        let norm = amplitudes.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NotNormalized(norm * norm));
        }
        Ok(Self {
            cutoff,
            amplitudes: amplitudes.unscale(norm),
        })
    }

    pub fn from_real(cutoff: FockCutoff, coefficients: &[f64]) -> Result<Self> {
        let v = CVector::from_iterator(
            coefficients.len(),
            coefficients.iter().map(|&c| C64::new(c, 0.0)),
        );
        Self::normalized(cutoff, v)
    }

    /// The Fock state `|i, j⟩`.
    pub fn basis(cutoff: FockCutoff, i: usize, j: usize) -> Self {
        let mut v = CVector::zeros(cutoff.dim());
        v[cutoff.index(i, j)] = C64::new(1.0, 0.0);
        Self {
            cutoff,
            amplitudes: v,
        }
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.cutoff
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn amplitude(&self, i: usize, j: usize) -> C64 {
        self.amplitudes[self.cutoff.index(i, j)]
    }

    pub fn mean_particle_number(&self) -> f64 {
        mean_particle_number(self)
    }

    /// `|ψ⟩⟨ψ|` as a dense matrix.
    pub fn projector(&self) -> CMatrix {
        &self.amplitudes * self.amplitudes.adjoint()
    }

    /// `U|ψ⟩` for a unitary on the same space.
    pub fn evolve(&self, unitary: &Operator) -> Result<Self> {
        if unitary.cutoff() != self.cutoff {
            return Err(Error::DimensionMismatch {
                expected: self.cutoff.dim(),
                found: unitary.cutoff().dim(),
            });
        }
        Ok(Self {
            cutoff: self.cutoff,
            amplitudes: unitary.matrix() * &self.amplitudes,
        })
    }
}

/// Mean total photon number `Σ |c_ij|² (i + j)`.
pub fn mean_particle_number(state: &TwoModePureState) -> f64 {
    state
        .cutoff
        .kets()
        .zip(state.amplitudes.iter())
        .map(|((i, j), c)| c.norm_sqr() * (i + j) as f64)
        .sum()
}

/// Dense operator on the two-mode space. Diagonal real operators keep their
/// diagonal so that exponentials and phase evolutions stay elementwise.
#[derive(Clone, Debug)]
pub struct Operator {
    cutoff: FockCutoff,
    matrix: CMatrix,
    diagonal: Option<Vec<f64>>,
    hermitian: bool,
    unitary: bool,
}

impl Operator {
    pub fn from_matrix(cutoff: FockCutoff, matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != cutoff.dim() || matrix.ncols() != cutoff.dim() {
            return Err(Error::DimensionMismatch {
                expected: cutoff.dim(),
                found: matrix.nrows(),
            });
        }
        let hermitian = hermitian_defect(&matrix) <= 1e-12;
        let unitary = unitary_defect(&matrix) <= 1e-10;
        let mut off_diag = 0.0_f64;
        for ((r, c), v) in matrix
            .iter()
            .enumerate()
            .map(|(k, v)| ((k % matrix.nrows(), k / matrix.nrows()), v))
        {
            if r != c {
                off_diag = off_diag.max(v.norm());
            }
        }
        let diagonal = if hermitian && off_diag == 0.0 {
            Some(matrix.diagonal().iter().map(|z| z.re).collect())
        } else {
            None
        };
        Ok(Self {
            cutoff,
            matrix,
            diagonal,
            hermitian,
            unitary,
        })
    }

    /// Real diagonal (hence Hermitian) operator.
    pub fn from_real_diagonal(cutoff: FockCutoff, diag: Vec<f64>) -> Self {
        assert_eq!(diag.len(), cutoff.dim());
        let matrix = CMatrix::from_diagonal(&CVector::from_iterator(
            diag.len(),
            diag.iter().map(|&d| C64::new(d, 0.0)),
        ));
        let unitary = diag.iter().all(|d| (d.abs() - 1.0).abs() <= 1e-10);
        Self {
            cutoff,
            matrix,
            diagonal: Some(diag),
            hermitian: true,
            unitary,
        }
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.cutoff
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    /// The real diagonal if the operator is diagonal in the Fock basis.
    pub fn diagonal(&self) -> Option<&[f64]> {
        self.diagonal.as_deref()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn is_unitary(&self) -> bool {
        self.unitary
    }

    pub(crate) fn require_hermitian(&self) -> Result<()> {
        if self.hermitian {
            Ok(())
        } else {
            Err(Error::NotHermitian(hermitian_defect(&self.matrix)))
        }
    }

    /// `W G W†` for a unitary `W`.
    pub fn conjugate_by(&self, w: &CMatrix) -> Result<Self> {
        Self::from_matrix(self.cutoff, w * &self.matrix * w.adjoint())
    }
}

/// `J_z = (a†a − b†b)/2`, diagonal with entry `(i − j)/2`.
pub fn build_jz(cutoff: FockCutoff) -> Operator {
    let diag = cutoff
        .kets()
        .map(|(i, j)| (i as f64 - j as f64) / 2.0)
        .collect();
    Operator::from_real_diagonal(cutoff, diag)
}

/// `n J_z`, diagonal with entry `(i + j)(i − j)/2`.
pub fn build_nonlinear_generator(cutoff: FockCutoff) -> Operator {
    let diag = cutoff
        .kets()
        .map(|(i, j)| (i + j) as f64 * (i as f64 - j as f64) / 2.0)
        .collect();
    Operator::from_real_diagonal(cutoff, diag)
}

/// Total number operator `n = a†a + b†b`.
pub fn build_number_operator(cutoff: FockCutoff) -> Operator {
    let diag = cutoff.kets().map(|(i, j)| (i + j) as f64).collect();
    Operator::from_real_diagonal(cutoff, diag)
}

/// `J_x = (a†b + a b†)/2` truncated at the cutoff.
pub fn build_jx(cutoff: FockCutoff) -> Operator {
    let n = cutoff.n();
    let mut m = CMatrix::zeros(cutoff.dim(), cutoff.dim());
    for (i, j) in cutoff.kets() {
        let src = cutoff.index(i, j);
        // a†b: |i, j⟩ -> √((i+1) j) |i+1, j−1⟩
        if j >= 1 && i < n {
            m[(cutoff.index(i + 1, j - 1), src)] += C64::new((((i + 1) * j) as f64).sqrt() / 2.0, 0.0);
        }
        // a b†: |i, j⟩ -> √(i (j+1)) |i−1, j+1⟩
        if i >= 1 && j < n {
            m[(cutoff.index(i - 1, j + 1), src)] += C64::new(((i * (j + 1)) as f64).sqrt() / 2.0, 0.0);
        }
    }
    Operator {
        cutoff,
        matrix: m,
        diagonal: None,
        hermitian: true,
        unitary: false,
    }
}

/// `exp(i φ G)` for Hermitian `G`; elementwise for diagonal generators.
pub fn phase_unitary(generator: &Operator, phi: f64) -> Result<Operator> {
    generator.require_hermitian()?;
    let cutoff = generator.cutoff;
    if let Some(diag) = generator.diagonal() {
        let phases: Vec<C64> = diag.iter().map(|&g| C64::from_polar(1.0, phi * g)).collect();
        let matrix = CMatrix::from_diagonal(&CVector::from_vec(phases));
        return Ok(Operator {
            cutoff,
            matrix,
            diagonal: None,
            hermitian: false,
            unitary: true,
        });
    }
    let matrix = expm_i_hermitian(generator.matrix(), phi);
    Ok(Operator {
        cutoff,
        matrix,
        diagonal: None,
        hermitian: false,
        unitary: true,
    })
}

/// The second (physical) beam splitter `exp(iπ J_x / 2)`.
pub fn beam_splitter_rotation(cutoff: FockCutoff) -> Operator {
    let jx = build_jx(cutoff);
    let matrix = expm_i_hermitian(jx.matrix(), std::f64::consts::FRAC_PI_2);
    Operator {
        cutoff,
        matrix,
        diagonal: None,
        hermitian: false,
        unitary: true,
    }
}

/// Spectrum of `J_x`; exposed for diagnostics.
pub fn jx_spectrum(cutoff: FockCutoff) -> Vec<f64> {
    eigh(build_jx(cutoff).matrix()).0
}
