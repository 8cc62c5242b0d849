//! Dense complex linear algebra for small operator matrices.
//!
//! Everything here operates on `Array2<Complex64>` at the dimensions this
//! crate cares about (d = n·m, typically ≤ 16; vectorized superoperators up
//! to d² ≤ 256). Routines are written for robustness at those sizes, not for
//! large-scale performance.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;

/// Complex square matrix used throughout the crate.
pub type CMat = Array2<Complex64>;
/// Complex vector.
pub type CVec = Array1<Complex64>;

/// Shorthand for a real scalar lifted to `Complex64`.
#[inline]
pub fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// d×d identity.
pub fn eye(d: usize) -> CMat {
    Array2::from_diag_elem(d, Complex64::new(1.0, 0.0))
}

/// Conjugate transpose.
pub fn dagger(a: &CMat) -> CMat {
    a.t().mapv(|z| z.conj())
}

/// Commutator [A, B] = AB − BA.
pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a.dot(b) - b.dot(a)
}

/// Anticommutator {A, B} = AB + BA.
pub fn anticommutator(a: &CMat, b: &CMat) -> CMat {
    a.dot(b) + b.dot(a)
}

/// Trace.
pub fn trace(a: &CMat) -> Complex64 {
    a.diag().sum()
}

/// Kronecker product A ⊗ B.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[[i, j]];
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}

/// Max-abs (entrywise) norm.
pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Column-stacking vectorization: vec(ρ)[i + d·j] = ρ[i, j].
///
/// With this convention vec(AXB) = (Bᵀ ⊗ A)·vec(X).
pub fn vec_col(a: &CMat) -> CVec {
    let (r, cdim) = a.dim();
    let mut v = Array1::zeros(r * cdim);
    for j in 0..cdim {
        for i in 0..r {
            v[i + r * j] = a[[i, j]];
        }
    }
    v
}

/// Inverse of [`vec_col`] for a square matrix of side `d`.
pub fn unvec_col(v: &CVec, d: usize) -> CMat {
    assert_eq!(v.len(), d * d, "vector length must be d²");
    let mut a = Array2::zeros((d, d));
    for j in 0..d {
        for i in 0..d {
            a[[i, j]] = v[i + d * j];
        }
    }
    a
}

/// 1-norm (max column sum of absolute values), used to pick the expm scaling.
fn norm_1(a: &CMat) -> f64 {
    let (r, cdim) = a.dim();
    let mut max_sum = 0.0_f64;
    for j in 0..cdim {
        let mut s = 0.0;
        for i in 0..r {
            s += a[[i, j]].norm();
        }
        max_sum = max_sum.max(s);
    }
    max_sum
}

/// Padé(13,13) coefficients for the matrix exponential (Higham 2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Matrix exponential by scaling-and-squaring with a Padé(13) approximant.
pub fn matrix_exp(a: &CMat) -> CMat {
    let d = a.nrows();
    assert_eq!(d, a.ncols(), "matrix_exp requires a square matrix");
    if d == 0 {
        return Array2::zeros((0, 0));
    }
    if d == 1 {
        let mut out = Array2::zeros((1, 1));
        out[[0, 0]] = a[[0, 0]].exp();
        return out;
    }

    let theta13 = 5.371920351148152;
    let norm = norm_1(a);
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a.mapv(|z| z / c((1u64 << s) as f64));

    let id = eye(d);
    let a2 = scaled.dot(&scaled);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let w1 = &a6 * c(PADE13[13]) + &a4 * c(PADE13[11]) + &a2 * c(PADE13[9]);
    let w2 = w1.dot(&a6)
        + &a6 * c(PADE13[7])
        + &a4 * c(PADE13[5])
        + &a2 * c(PADE13[3])
        + &id * c(PADE13[1]);
    let u = scaled.dot(&w2);

    let v1 = &a6 * c(PADE13[12]) + &a4 * c(PADE13[10]) + &a2 * c(PADE13[8]);
    let v = v1.dot(&a6)
        + &a6 * c(PADE13[6])
        + &a4 * c(PADE13[4])
        + &a2 * c(PADE13[2])
        + &id * c(PADE13[0]);

    let num = &v + &u;
    let den = &v - &u;
    let mut out = solve(&den, &num).expect("Padé denominator is singular");
    for _ in 0..s {
        out = out.dot(&out);
    }
    out
}

/// Solve A·X = B by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot falls below 1e-14 of the working scale.
pub fn solve(a: &CMat, b: &CMat) -> Option<CMat> {
    let d = a.nrows();
    assert_eq!(d, a.ncols());
    assert_eq!(d, b.nrows());
    let m = b.ncols();
    let scale = max_abs(a).max(1e-300);

    let mut aug: CMat = Array2::zeros((d, d + m));
    for i in 0..d {
        for j in 0..d {
            aug[[i, j]] = a[[i, j]];
        }
        for j in 0..m {
            aug[[i, d + j]] = b[[i, j]];
        }
    }

    for col in 0..d {
        let mut piv_row = col;
        let mut piv_val = aug[[col, col]].norm();
        for r in (col + 1)..d {
            let v = aug[[r, col]].norm();
            if v > piv_val {
                piv_val = v;
                piv_row = r;
            }
        }
        if piv_val < 1e-14 * scale {
            return None;
        }
        if piv_row != col {
            for j in 0..(d + m) {
                let tmp = aug[[col, j]];
                aug[[col, j]] = aug[[piv_row, j]];
                aug[[piv_row, j]] = tmp;
            }
        }
        let piv = aug[[col, col]];
        for r in (col + 1)..d {
            let f = aug[[r, col]] / piv;
            if f.norm() == 0.0 {
                continue;
            }
            for j in col..(d + m) {
                let v = aug[[col, j]];
                aug[[r, j]] -= f * v;
            }
        }
    }

    let mut x: CMat = Array2::zeros((d, m));
    for col in (0..d).rev() {
        let piv = aug[[col, col]];
        for j in 0..m {
            let mut s = aug[[col, d + j]];
            for k in (col + 1)..d {
                s -= aug[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = s / piv;
        }
    }
    Some(x)
}

/// Eigenvalues of a Hermitian matrix by cyclic complex Jacobi sweeps.
///
/// Returned sorted ascending. Off-Hermitian input error is the caller's
/// responsibility; the routine symmetrizes internally.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    hermitian_eigen(a).0
}

/// Full Hermitian eigendecomposition A = U·diag(λ)·U† by cyclic complex
/// Jacobi sweeps. Eigenvalues ascend; column k of U is the eigenvector for
/// λ_k.
pub fn hermitian_eigen(a: &CMat) -> (Vec<f64>, CMat) {
    let d = a.nrows();
    assert_eq!(d, a.ncols());
    if d == 0 {
        return (Vec::new(), Array2::zeros((0, 0)));
    }
    // Work on (A + A†)/2 so tiny asymmetries cannot destabilize rotations.
    let mut m = (a + &dagger(a)).mapv(|z| z * c(0.5));
    let mut u = eye(d);
    let scale = max_abs(&m).max(1e-300);
    let tol = 1e-14 * scale;

    for _sweep in 0..60 {
        let mut off = 0.0_f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off = off.max(m[[p, q]].norm());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[[p, q]];
                if apq.norm() <= tol * 1e-2 {
                    continue;
                }
                let app = m[[p, p]].re;
                let aqq = m[[q, q]].re;
                // Phase that makes the pivot real, then a real Jacobi rotation.
                let phase = apq / c(apq.norm());
                let g = apq.norm();
                let tau = (aqq - app) / (2.0 * g);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = t * cos;
                // Columns/rows update with unitary [[c, s·e^{iφ}], [−s·e^{−iφ}, c]].
                for k in 0..d {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = mkp * c(cos) - mkq * phase.conj() * c(sin);
                    m[[k, q]] = mkp * phase * c(sin) + mkq * c(cos);
                }
                for k in 0..d {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = mpk * c(cos) - mqk * phase * c(sin);
                    m[[q, k]] = mpk * phase.conj() * c(sin) + mqk * c(cos);
                }
                // Accumulate the same column rotation into U.
                for k in 0..d {
                    let ukp = u[[k, p]];
                    let ukq = u[[k, q]];
                    u[[k, p]] = ukp * c(cos) - ukq * phase.conj() * c(sin);
                    u[[k, q]] = ukp * phase * c(sin) + ukq * c(cos);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    let diag: Vec<f64> = m.diag().iter().map(|z| z.re).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let eigs: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut sorted_u: CMat = Array2::zeros((d, d));
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..d {
            sorted_u[[k, new_col]] = u[[k, old_col]];
        }
    }
    (eigs, sorted_u)
}

/// Spectral norm ‖A‖₂ = sqrt(λ_max(A†A)).
pub fn spectral_norm(a: &CMat) -> f64 {
    let ata = dagger(a).dot(a);
    let eigs = hermitian_eigenvalues(&ata);
    eigs.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Orthonormal-ish basis of the null space of `a`, via row reduction.
///
/// Entries with magnitude below `tol`·scale are treated as zero. Used as the
/// fixed-point oracle for vectorized generators.
pub fn null_space(a: &CMat, tol: f64) -> Vec<CVec> {
    let (rows, cols) = a.dim();
    let scale = max_abs(a).max(1e-300);
    let eps = tol * scale;
    let mut m = a.clone();
    let mut pivot_cols = Vec::new();
    let mut r = 0usize;

    for col in 0..cols {
        // Pick pivot in column `col` at or below row r.
        let mut best = r;
        let mut best_val = 0.0;
        for i in r..rows {
            let v = m[[i, col]].norm();
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        if best_val <= eps {
            continue;
        }
        if best != r {
            for j in 0..cols {
                let tmp = m[[r, j]];
                m[[r, j]] = m[[best, j]];
                m[[best, j]] = tmp;
            }
        }
        let piv = m[[r, col]];
        for j in 0..cols {
            m[[r, j]] /= piv;
        }
        for i in 0..rows {
            if i == r {
                continue;
            }
            let f = m[[i, col]];
            if f.norm() == 0.0 {
                continue;
            }
            for j in 0..cols {
                let v = m[[r, j]];
                m[[i, j]] -= f * v;
            }
        }
        pivot_cols.push(col);
        r += 1;
        if r == rows {
            break;
        }
    }

    let free_cols: Vec<usize> = (0..cols).filter(|cc| !pivot_cols.contains(cc)).collect();
    let mut basis = Vec::new();
    for &fc in &free_cols {
        let mut v: CVec = Array1::zeros(cols);
        v[fc] = c(1.0);
        for (row, &pc) in pivot_cols.iter().enumerate() {
            v[pc] = -m[[row, fc]];
        }
        let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            basis.push(v.mapv(|z| z / c(norm)));
        }
    }
    basis
}

/// Random density matrix ρ = AA†/Tr(AA†) with A ~ complex standard normal.
pub fn random_density<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMat {
    use rand_distr::StandardNormal;
    let mut a: CMat = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            a[[i, j]] = Complex64::new(re, im);
        }
    }
    let rho = a.dot(&dagger(&a));
    let t = trace(&rho).re;
    rho.mapv(|z| z / c(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &CMat, b: &CMat, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        let diff = max_abs(&(a - b));
        assert!(diff < tol, "matrices differ by {diff:.3e} > {tol:.1e}");
    }

    #[test]
    fn expm_zero_is_identity() {
        let z: CMat = Array2::zeros((4, 4));
        assert_close(&matrix_exp(&z), &eye(4), 1e-14);
    }

    #[test]
    fn expm_diagonal() {
        let mut a: CMat = Array2::zeros((2, 2));
        a[[0, 0]] = c(1.0);
        a[[1, 1]] = c(-2.0);
        let e = matrix_exp(&a);
        assert!((e[[0, 0]].re - 1.0_f64.exp()).abs() < 1e-12);
        assert!((e[[1, 1]].re - (-2.0_f64).exp()).abs() < 1e-12);
        assert!(e[[0, 1]].norm() < 1e-14);
    }

    #[test]
    fn expm_antihermitian_is_unitary() {
        let mut h: CMat = Array2::zeros((3, 3));
        h[[0, 1]] = c(0.7);
        h[[1, 0]] = c(0.7);
        h[[1, 2]] = Complex64::new(0.0, 0.3);
        h[[2, 1]] = Complex64::new(0.0, -0.3);
        let a = h.mapv(|z| z * Complex64::new(0.0, -1.0));
        let u = matrix_exp(&a);
        assert_close(&u.dot(&dagger(&u)), &eye(3), 1e-12);
    }

    #[test]
    fn expm_large_norm_scales() {
        let mut a: CMat = Array2::zeros((2, 2));
        a[[0, 0]] = c(50.0);
        a[[1, 1]] = c(-50.0);
        let e = matrix_exp(&a);
        assert!((e[[0, 0]].re - 50.0_f64.exp()).abs() / 50.0_f64.exp() < 1e-10);
    }

    #[test]
    fn vec_col_convention_on_2x2() {
        // vec([[a, c], [b, d]]) = [a, b, c, d] and vec(AXB) = (Bᵀ ⊗ A) vec(X).
        let x = ndarray::array![[c(1.0), c(3.0)], [c(2.0), c(4.0)]];
        let v = vec_col(&x);
        assert_eq!(v[0], c(1.0));
        assert_eq!(v[1], c(2.0));
        assert_eq!(v[2], c(3.0));
        assert_eq!(v[3], c(4.0));

        let a = ndarray::array![[c(0.0), c(1.0)], [c(1.0), c(0.0)]];
        let b = ndarray::array![[c(2.0), c(0.0)], [c(1.0), c(1.0)]];
        let lhs = vec_col(&a.dot(&x).dot(&b));
        let sup = kron(&b.t().to_owned(), &a);
        let rhs = sup.dot(&vec_col(&x));
        for i in 0..4 {
            assert!((lhs[i] - rhs[i]).norm() < 1e-13);
        }
        let back = unvec_col(&vec_col(&x), 2);
        assert_eq!(back, x);
    }

    #[test]
    fn jacobi_eigenvalues_match_known_spectrum() {
        // [[2, 1+i], [1-i, 3]] has eigenvalues (5 ± √13)/2... check via trace/det.
        let a = ndarray::array![
            [c(2.0), Complex64::new(1.0, 1.0)],
            [Complex64::new(1.0, -1.0), c(3.0)]
        ];
        let e = hermitian_eigenvalues(&a);
        let disc = (1.0_f64 + 4.0 * 2.0).sqrt(); // (tr² - 4 det) = 25 - 4·(6-2) = 9
        let _ = disc;
        let lo = (5.0 - 3.0) / 2.0;
        let hi = (5.0 + 3.0) / 2.0;
        assert!((e[0] - lo).abs() < 1e-12);
        assert!((e[1] - hi).abs() < 1e-12);
    }

    #[test]
    fn jacobi_on_diagonal_is_exact() {
        let mut a: CMat = Array2::zeros((4, 4));
        for (i, v) in [0.5, -0.25, 3.0, 0.0].iter().enumerate() {
            a[[i, i]] = c(*v);
        }
        let e = hermitian_eigenvalues(&a);
        assert_eq!(e, vec![-0.25, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn spectral_norm_of_all_ones_block() {
        let ones = Array2::from_elem((3, 3), c(1.0));
        assert!((spectral_norm(&ones) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn null_space_of_rank_deficient() {
        // Rows sum to zero ⟹ (1,1,1)/√3 spans the kernel of the transpose form.
        let a = ndarray::array![
            [c(1.0), c(-1.0), c(0.0)],
            [c(0.0), c(1.0), c(-1.0)],
            [c(-1.0), c(0.0), c(1.0)]
        ];
        let basis = null_space(&a, 1e-12);
        assert_eq!(basis.len(), 1);
        let v = &basis[0];
        // Kernel vector must satisfy Av = 0.
        for i in 0..3 {
            let s: Complex64 = (0..3).map(|j| a[[i, j]] * v[j]).sum();
            assert!(s.norm() < 1e-12);
        }
    }

    #[test]
    fn random_density_is_valid() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rho = random_density(4, &mut rng);
        assert!((trace(&rho).re - 1.0).abs() < 1e-12);
        let herm_err = max_abs(&(&rho - &dagger(&rho)));
        assert!(herm_err < 1e-12);
        let eigs = hermitian_eigenvalues(&rho);
        assert!(eigs[0] > -1e-12);
    }
}
