//! Dense Hermitian helpers. Eigendecompositions go through faer, whose
//! self-adjoint solver stays accurate on rank-deficient complex input.

use faer::{Mat, Side};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::{CMatrix, C64};

/// Eigendecomposition of a Hermitian matrix with eigenvalues sorted ascending.
/// Column `k` of the returned matrix is the eigenvector of eigenvalue `k`.
pub fn eigh(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let dim = m.nrows();
    // Symmetrize so round-off asymmetry never leaks into the solver.
    let h = Mat::<C64>::from_fn(dim, dim, |i, j| (m[(i, j)] + m[(j, i)].conj()) * 0.5);
    match h.self_adjoint_eigen(Side::Lower) {
        Ok(eig) => {
            let (s, u) = (eig.S(), eig.U());
            let values = (0..dim).map(|k| s[k].re).collect::<Vec<_>>();
            let vectors = CMatrix::from_fn(dim, dim, |i, j| u[(i, j)]);
            sorted(values, vectors)
        }
        Err(_) => {
            let eig = SymmetricEigen::new((m + m.adjoint()).scale(0.5));
            sorted(eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
        }
    }
}

/// Real symmetric counterpart of [`eigh`].
pub fn eigh_real(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let dim = m.nrows();
    let h = Mat::<f64>::from_fn(dim, dim, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    match h.self_adjoint_eigen(Side::Lower) {
        Ok(eig) => {
            let (s, u) = (eig.S(), eig.U());
            let values = (0..dim).map(|k| s[k]).collect::<Vec<_>>();
            sorted(values, DMatrix::from_fn(dim, dim, |i, j| u[(i, j)]))
        }
        Err(_) => {
            let eig = SymmetricEigen::new((m + m.transpose()).scale(0.5));
            sorted(eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
        }
    }
}

fn sorted<T: nalgebra::Scalar + Copy>(values: Vec<f64>, vectors: DMatrix<T>) -> (Vec<f64>, DMatrix<T>) {
    let dim = values.len();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let vals = order.iter().map(|&k| values[k]).collect();
    let vecs = DMatrix::from_fn(dim, dim, |i, j| vectors[(i, order[j])]);
    (vals, vecs)
}

/// `exp(i t H)` for Hermitian `H` via its eigendecomposition.
pub fn expm_i_hermitian(h: &CMatrix, t: f64) -> CMatrix {
    let (values, vectors) = eigh(h);
    let mut scaled = vectors.clone();
    for (k, lambda) in values.iter().enumerate() {
        let phase = C64::from_polar(1.0, t * lambda);
        for r in 0..scaled.nrows() {
            scaled[(r, k)] *= phase;
        }
    }
    scaled * vectors.adjoint()
}

/// Largest elementwise modulus of `m - m†`.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Largest elementwise modulus of `m† m - I`.
pub fn unitary_defect(m: &CMatrix) -> f64 {
    let p = m.adjoint() * m;
    let mut worst = 0.0_f64;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((p[(i, j)] - C64::new(target, 0.0)).norm());
        }
    }
    worst
}

/// Largest elementwise modulus of `a - b`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Real part of the trace of a product, `Re Tr(a b)`, without forming `a b`.
pub fn trace_product_re(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            acc += (a[(i, k)] * b[(k, i)]).re;
        }
    }
    acc
}
