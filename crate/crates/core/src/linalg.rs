//! Thin safe wrappers over the LAPACK routines the pipeline needs, plus a
//! couple of small dense/sparse helpers.
//!
//! All dense matrices handed to LAPACK are symmetric or explicitly transposed,
//! so ndarray's row-major layout can be passed straight through.

use std::os::raw::{c_char, c_int};

use ndarray::{Array1, Array2, ArrayView2};
use sprs::CsMat;

use crate::error::{Error, Result};

fn ch(c: u8) -> *const c_char {
    // LAPACK reads a single byte; a static keeps the pointer valid.
    static CHARS: [u8; 128] = {
        let mut t = [0u8; 128];
        let mut i = 0;
        while i < 128 {
            t[i] = i as u8;
            i += 1;
        }
        t
    };
    &CHARS[c as usize] as *const u8 as *const c_char
}

fn int(n: usize) -> c_int {
    c_int::try_from(n).expect("dimension exceeds LAPACK integer range")
}

/// Neumaier-compensated sum in the given order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn weighted_dot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| x * y * w).sum()
}

pub fn weighted_norm(a: &[f64], w: &[f64]) -> f64 {
    weighted_dot(a, a, w).max(0.0).sqrt()
}

/// y = A x for a CSR matrix.
pub fn spmv(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    assert!(a.is_csr());
    let mut y = vec![0.0; a.rows()];
    for (i, row) in a.outer_iterator().enumerate() {
        let mut s = 0.0;
        for (j, v) in row.iter() {
            s += v * x[j];
        }
        y[i] = s;
    }
    y
}

/// y += A x for a CSR matrix.
pub fn spmv_acc(a: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    for (i, row) in a.outer_iterator().enumerate() {
        let mut s = 0.0;
        for (j, v) in row.iter() {
            s += v * x[j];
        }
        y[i] += s;
    }
}

/// Half-bandwidth of a square sparse matrix.
pub fn bandwidth(a: &CsMat<f64>) -> usize {
    let mut kd = 0;
    for (i, row) in a.outer_iterator().enumerate() {
        for (j, _) in row.iter() {
            kd = kd.max(i.abs_diff(j));
        }
    }
    kd
}

/// Dense symmetric copy of a sparse matrix plus a diagonal shift `shift * d`.
pub fn dense_from_sparse(a: &CsMat<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.rows(), a.cols()));
    for (i, row) in a.outer_iterator().enumerate() {
        for (j, v) in row.iter() {
            m[[i, j]] += *v;
        }
    }
    m
}

enum Factor {
    Cholesky { ab: Vec<f64>, kd: usize },
    Lu { ab: Vec<f64>, ipiv: Vec<c_int>, kl: usize },
}

/// Factorization of `A + shift * diag(d)` for a sparse symmetric banded `A`.
///
/// Cholesky is tried first; if the shifted matrix is indefinite the
/// pivoted band LU is used instead.
pub struct BandedSolver {
    n: usize,
    factor: Factor,
}

impl BandedSolver {
    pub fn new(a: &CsMat<f64>, diag: &[f64], shift: f64) -> Result<Self> {
        let n = a.rows();
        if n == 0 {
            return Ok(Self {
                n,
                factor: Factor::Cholesky { ab: vec![], kd: 0 },
            });
        }
        let kd = bandwidth(a);
        let ldab = kd + 1;
        let mut ab = vec![0.0; ldab * n];
        for (i, row) in a.outer_iterator().enumerate() {
            for (j, v) in row.iter() {
                if i <= j {
                    ab[(kd + i - j) + j * ldab] += *v;
                }
            }
        }
        for i in 0..n {
            ab[kd + i * ldab] += shift * diag[i];
        }
        let mut info: c_int = 0;
        unsafe {
            lapack_sys::dpbtrf_(ch(b'U'), &int(n), &int(kd), ab.as_mut_ptr(), &int(ldab), &mut info);
        }
        if info == 0 {
            return Ok(Self {
                n,
                factor: Factor::Cholesky { ab, kd },
            });
        }
        if info < 0 {
            return Err(Error::Lapack { routine: "dpbtrf", info });
        }
        // Indefinite: general band LU, storage with kl extra rows for fill-in.
        let kl = kd;
        let ku = kd;
        let ldab = 2 * kl + ku + 1;
        let mut ab = vec![0.0; ldab * n];
        for (i, row) in a.outer_iterator().enumerate() {
            for (j, v) in row.iter() {
                ab[(kl + ku + i - j) + j * ldab] += *v;
            }
        }
        for i in 0..n {
            ab[(kl + ku) + i * ldab] += shift * diag[i];
        }
        let mut ipiv = vec![0 as c_int; n];
        let mut info: c_int = 0;
        unsafe {
            lapack_sys::dgbtrf_(
                &int(n),
                &int(n),
                &int(kl),
                &int(ku),
                ab.as_mut_ptr(),
                &int(ldab),
                ipiv.as_mut_ptr(),
                &mut info,
            );
        }
        if info != 0 {
            return Err(Error::Lapack { routine: "dgbtrf", info });
        }
        Ok(Self {
            n,
            factor: Factor::Lu { ab, ipiv, kl },
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_definite(&self) -> bool {
        matches!(self.factor, Factor::Cholesky { .. })
    }

    /// Solves in place for `nrhs` right-hand sides stored one after another.
    pub fn solve_many(&self, b: &mut [f64], nrhs: usize) -> Result<()> {
        if self.n == 0 || nrhs == 0 {
            return Ok(());
        }
        assert_eq!(b.len(), self.n * nrhs);
        let mut info: c_int = 0;
        match &self.factor {
            Factor::Cholesky { ab, kd } => unsafe {
                lapack_sys::dpbtrs_(
                    ch(b'U'),
                    &int(self.n),
                    &int(*kd),
                    &int(nrhs),
                    ab.as_ptr(),
                    &int(kd + 1),
                    b.as_mut_ptr(),
                    &int(self.n),
                    &mut info,
                );
                if info != 0 {
                    return Err(Error::Lapack { routine: "dpbtrs", info });
                }
            },
            Factor::Lu { ab, ipiv, kl } => unsafe {
                lapack_sys::dgbtrs_(
                    ch(b'N'),
                    &int(self.n),
                    &int(*kl),
                    &int(*kl),
                    &int(nrhs),
                    ab.as_ptr(),
                    &int(3 * kl + 1),
                    ipiv.as_ptr(),
                    b.as_mut_ptr(),
                    &int(self.n),
                    &mut info,
                );
                if info != 0 {
                    return Err(Error::Lapack { routine: "dgbtrs", info });
                }
            },
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_many(&mut x, 1)?;
        Ok(x)
    }
}

/// Lowest `k` eigenpairs of a dense symmetric matrix (destroyed on exit).
///
/// Returns eigenvalues ascending and an `n x k` matrix of orthonormal
/// eigenvectors stored column by column.
pub fn sym_eig_lowest(mut a: Array2<f64>, k: usize) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    if k == 0 || n == 0 {
        return Ok((vec![], Array2::zeros((n, 0))));
    }
    let k = k.min(n);
    let a_ptr = a.as_slice_mut().expect("contiguous matrix").as_mut_ptr();
    let mut w = vec![0.0; n];
    // z is column-major n x k
    let mut z = vec![0.0; n * k];
    let mut isuppz = vec![0 as c_int; 2 * k];
    let mut m_found: c_int = 0;
    let mut info: c_int = 0;
    let il: c_int = 1;
    let iu: c_int = int(k);
    let abstol = 0.0f64;
    let (vl, vu) = (0.0f64, 0.0f64);
    let mut wq = [0.0f64];
    let mut iwq = [0 as c_int];
    unsafe {
        lapack_sys::dsyevr_(
            ch(b'V'),
            ch(b'I'),
            ch(b'U'),
            &int(n),
            a_ptr,
            &int(n),
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m_found,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &int(n),
            isuppz.as_mut_ptr(),
            wq.as_mut_ptr(),
            &-1,
            iwq.as_mut_ptr(),
            &-1,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyevr", info });
    }
    let lwork = wq[0] as usize;
    let liwork = iwq[0] as usize;
    let mut work = vec![0.0; lwork.max(1)];
    let mut iwork = vec![0 as c_int; liwork.max(1)];
    unsafe {
        lapack_sys::dsyevr_(
            ch(b'V'),
            ch(b'I'),
            ch(b'U'),
            &int(n),
            a_ptr,
            &int(n),
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m_found,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &int(n),
            isuppz.as_mut_ptr(),
            work.as_mut_ptr(),
            &int(lwork),
            iwork.as_mut_ptr(),
            &int(liwork),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyevr", info });
    }
    if m_found as usize != k {
        return Err(Error::Lapack { routine: "dsyevr", info: -1000 - m_found });
    }
    w.truncate(k);
    // column-major n x k -> row-major (n, k)
    let zv = Array2::from_shape_vec((k, n), z).expect("shape").reversed_axes();
    Ok((w, zv.as_standard_layout().to_owned()))
}

/// All eigenvalues of a small dense symmetric matrix, ascending.
pub fn sym_eigvals(a: ArrayView2<f64>) -> Result<Vec<f64>> {
    let n = a.nrows();
    let (w, _) = sym_eig_lowest(a.to_owned().as_standard_layout().to_owned(), n)?;
    Ok(w)
}

/// Full symmetric eigendecomposition of a small matrix.
pub fn sym_eig(a: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    sym_eig_lowest(a.to_owned().as_standard_layout().to_owned(), n)
}

/// Singular values of a dense matrix, descending.
pub fn singular_values(a: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (m, n) = a.dim();
    if m == 0 || n == 0 {
        return Ok(vec![]);
    }
    // Row-major (m, n) is column-major (n, m), i.e. the transpose; same singular values.
    let mut buf: Vec<f64> = a.as_standard_layout().iter().copied().collect();
    let (rows, cols) = (n, m);
    let mut s = vec![0.0; rows.min(cols)];
    let mut dummy = [0.0f64];
    let mut info: c_int = 0;
    let mut wq = [0.0f64];
    unsafe {
        lapack_sys::dgesvd_(
            ch(b'N'),
            ch(b'N'),
            &int(rows),
            &int(cols),
            buf.as_mut_ptr(),
            &int(rows),
            s.as_mut_ptr(),
            dummy.as_mut_ptr(),
            &1,
            dummy.as_mut_ptr(),
            &1,
            wq.as_mut_ptr(),
            &-1,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dgesvd", info });
    }
    let lwork = (wq[0] as usize).max(1);
    let mut work = vec![0.0; lwork];
    unsafe {
        lapack_sys::dgesvd_(
            ch(b'N'),
            ch(b'N'),
            &int(rows),
            &int(cols),
            buf.as_mut_ptr(),
            &int(rows),
            s.as_mut_ptr(),
            dummy.as_mut_ptr(),
            &1,
            dummy.as_mut_ptr(),
            &1,
            work.as_mut_ptr(),
            &int(lwork),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dgesvd", info });
    }
    Ok(s)
}

pub fn spectral_norm(a: ArrayView2<f64>) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Orthogonal polar factor of a small square matrix (nearest rotation in
/// Frobenius norm), via the eigendecomposition of `AᵀA`.
pub fn polar_orthogonal(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let ata = a.t().dot(&a);
    let (w, v) = sym_eig(ata.view())?;
    let n = w.len();
    let mut inv_sqrt = Array2::zeros((n, n));
    for i in 0..n {
        if w[i] <= 1e-300 {
            return Err(Error::Invalid("rank-deficient block in polar factor".into()));
        }
        inv_sqrt[[i, i]] = 1.0 / w[i].sqrt();
    }
    let s_inv = v.dot(&inv_sqrt).dot(&v.t());
    Ok(a.dot(&s_inv))
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn to_array1(v: Vec<f64>) -> Array1<f64> {
    Array1::from(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use sprs::TriMat;

    fn lap1d(n: usize) -> CsMat<f64> {
        let mut t = TriMat::new((n, n));
        for i in 0..n {
            t.add_triplet(i, i, 2.0);
            if i + 1 < n {
                t.add_triplet(i, i + 1, -1.0);
                t.add_triplet(i + 1, i, -1.0);
            }
        }
        t.to_csr()
    }

    #[test]
    fn banded_cholesky_solves() {
        let a = lap1d(10);
        let d = vec![1.0; 10];
        let s = BandedSolver::new(&a, &d, 0.5).unwrap();
        assert!(s.is_definite());
        let b: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let x = s.solve(&b).unwrap();
        let mut r = spmv(&a, &x);
        for i in 0..10 {
            r[i] += 0.5 * x[i] - b[i];
        }
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn indefinite_shift_falls_back_to_lu() {
        let a = lap1d(10);
        let d = vec![1.0; 10];
        // Between the first two eigenvalues of the 1D Laplacian.
        let s = BandedSolver::new(&a, &d, -0.2).unwrap();
        assert!(!s.is_definite());
        let b = vec![1.0; 10];
        let x = s.solve(&b).unwrap();
        let mut r = spmv(&a, &x);
        for i in 0..10 {
            r[i] += -0.2 * x[i] - b[i];
        }
        assert!(r.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn lowest_eigenpairs_of_path_laplacian() {
        let n = 20;
        let a = dense_from_sparse(&lap1d(n));
        let (w, z) = sym_eig_lowest(a.clone(), 3).unwrap();
        for (k, wk) in w.iter().enumerate() {
            let exact = 2.0 - 2.0 * (((k + 1) as f64) * std::f64::consts::PI / (n as f64 + 1.0)).cos();
            assert!((wk - exact).abs() < 1e-12);
            let col = z.column(k);
            let r = a.dot(&col) - &col * *wk;
            assert!(r.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn singular_values_of_rectangular() {
        let a = array![[3.0, 0.0], [0.0, -4.0], [0.0, 0.0]];
        let s = singular_values(a.view()).unwrap();
        assert!((s[0] - 4.0).abs() < 1e-14 && (s[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn polar_factor_of_scaled_rotation() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let a = array![[2.0 * c, -s], [2.0 * s, c]];
        let q = polar_orthogonal(a.view()).unwrap();
        let qtq = q.t().dot(&q);
        assert!((qtq[[0, 0]] - 1.0).abs() < 1e-12 && qtq[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let xs = [1e16, 1.0, -1e16];
        assert_eq!(compensated_sum(xs), 1.0);
    }
}
