//! Dense complex linear algebra helpers shared by every construction.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn frob(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn vnorm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn op_norm(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let g = if m.nrows() <= m.ncols() {
        m * m.adjoint()
    } else {
        m.adjoint() * m
    };
    eigh(&g).0.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), CMat::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    eigh(m).0.first().copied().unwrap_or(0.0)
}

/// Applies a real function to the spectrum of a Hermitian matrix.
pub fn hermitian_fn(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = eigh(m);
    let d = CMat::from_diagonal(&CVec::from_iterator(vals.len(), vals.iter().map(|&v| c(f(v), 0.0))));
    &vecs * d * vecs.adjoint()
}

/// Orthonormal basis (as columns) of the range of a positive semidefinite matrix,
/// keeping eigenvalues above `rel_cut` times the largest one.
pub fn psd_range(m: &CMat, rel_cut: f64) -> CMat {
    let (vals, vecs) = eigh(m);
    let max = vals.last().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return CMat::zeros(m.nrows(), 0);
    }
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > rel_cut * max).collect();
    let mut out = CMat::zeros(m.nrows(), keep.len());
    for (j, &i) in keep.iter().enumerate() {
        out.set_column(j, &vecs.column(i));
    }
    out
}

/// Orthonormal basis of the column space of an arbitrary matrix.
pub fn column_space(m: &CMat, rel_cut: f64) -> CMat {
    if m.is_empty() {
        return CMat::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("svd u");
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return CMat::zeros(m.nrows(), 0);
    }
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > rel_cut * max).collect();
    let mut out = CMat::zeros(m.nrows(), keep.len());
    for (j, &i) in keep.iter().enumerate() {
        out.set_column(j, &u.column(i));
    }
    out
}

pub fn singular_values(m: &CMat) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank with a relative singular value cutoff.
pub fn rank(m: &CMat, rel_cut: f64) -> usize {
    let s = singular_values(m);
    let max = s.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_cut * max).count()
}

/// Moore–Penrose pseudo-inverse with a relative singular value cutoff.
pub fn pinv(m: &CMat, rel_cut: f64) -> CMat {
    let (r, cdim) = m.shape();
    if r == 0 || cdim == 0 {
        return CMat::zeros(cdim, r);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v");
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let mut out = CMat::zeros(cdim, r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_cut * max && s > 0.0 {
            let vcol = vt.row(i).adjoint();
            let ucol = u.column(i).adjoint();
            out += (vcol * ucol).scale(1.0 / s);
        }
    }
    out
}

/// Nearest unitary in the polar sense.
pub fn polar_unitary(m: &CMat) -> CMat {
    let svd = m.clone().svd(true, true);
    svd.u.expect("svd u") * svd.v_t.expect("svd v")
}

/// Kernel of a linear map as orthonormal columns. `tol` bounds the squared
/// singular values relative to the largest one (or to 1 for small maps).
pub fn null_space(m: &CMat, tol: f64) -> CMat {
    let n = m.ncols();
    let g = m.adjoint() * m;
    let (vals, vecs) = eigh(&g);
    let scale = vals.last().copied().unwrap_or(0.0).max(1.0);
    let keep: Vec<usize> = (0..n).filter(|&i| vals[i] <= tol * scale).collect();
    let mut out = CMat::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        out.set_column(j, &vecs.column(i));
    }
    out
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn unit_vector(n: usize, i: usize) -> CVec {
    let mut v = CVec::zeros(n);
    v[i] = ONE;
    v
}

pub fn kron_vec(a: &CVec, b: &CVec) -> CVec {
    let mut out = CVec::zeros(a.len() * b.len());
    for (i, &x) in a.iter().enumerate() {
        if x == ZERO {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i * b.len() + j] = x * y;
        }
    }
    out
}

pub fn block_diag(blocks: &[CMat]) -> CMat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let (mut r, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r, c0), b.shape()).copy_from(b);
        r += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// Columns of `m` as a list of vectors.
pub fn columns(m: &CMat) -> Vec<CVec> {
    (0..m.ncols()).map(|j| m.column(j).into_owned()).collect()
}

pub fn from_columns(rows: usize, cols: &[CVec]) -> CMat {
    let mut out = CMat::zeros(rows, cols.len());
    for (j, v) in cols.iter().enumerate() {
        out.set_column(j, v);
    }
    out
}

pub fn random_complex(rng: &mut impl Rng) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c(re, im).scale(std::f64::consts::FRAC_1_SQRT_2)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> CMat {
    CMat::from_fn(rows, cols, |_, _| random_complex(rng))
}

pub fn random_vector(n: usize, rng: &mut impl Rng) -> CVec {
    CVec::from_fn(n, |_, _| random_complex(rng))
}

pub fn random_hermitian(n: usize, rng: &mut impl Rng) -> CMat {
    hermitian_part(&random_matrix(n, n, rng))
}

pub fn random_unitary(n: usize, rng: &mut impl Rng) -> CMat {
    polar_unitary(&random_matrix(n, n, rng))
}

/// Solves `A * s = t` for `A` in the least squares sense over the sample
/// columns and reports the relative residual.
pub fn fit_linear(s: &CMat, t: &CMat) -> (CMat, f64) {
    let a = t * pinv(s, 1e-12);
    let resid = frob(&(&a * s - t)) / frob(t).max(1.0);
    (a, resid)
}

/// Stable FNV-1a hash used to derive per-construction seeds.
pub fn seed_from(label: &str, base: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
