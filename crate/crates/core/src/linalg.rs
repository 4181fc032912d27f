//! Dense double-precision matrices, the symmetric eigensolver and spectral
//! matrix functions that the SPD layers are built from.
//!
//! The eigensolver is cyclic Jacobi. Every matrix it sees in this crate is at
//! most 64×64, where Jacobi is accurate to working precision, deterministic
//! and needs no workspace beyond two copies of the input.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Error, Result};

/// Row-major dense `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Dimension, "{}×{} matrix from {} values", rows, cols, data.len());
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul: inner dimensions differ");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.cols, "matmul_t: inner dimensions differ");
        Mat::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &Mat) -> Mat {
        self.transpose().matmul(rhs)
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Mat) -> Mat {
        self.zip_with(rhs, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, rhs: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "elementwise shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `⟨self, rhs⟩`.
    pub fn inner(&self, rhs: &Mat) -> f64 {
        dot(&self.data, &rhs.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// `(M + Mᵀ)/2`
    pub fn symmetrized(&self) -> Mat {
        assert!(self.is_square(), "symmetrize needs a square matrix");
        Mat::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Mat);

impl SymMatrix {
    /// Accepts `m` if it is symmetric to within `1e-12` of its magnitude.
    pub fn new(m: Mat) -> Result<Self> {
        if !m.is_square() {
            bail!(Dimension, "symmetric matrix must be square, got {}×{}", m.rows(), m.cols());
        }
        if !m.is_finite() {
            bail!(InvalidInput, "matrix has non-finite entries");
        }
        let scale = m.as_slice().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if m.max_asymmetry() > 1e-12 * scale {
            bail!(InvalidInput, "matrix is not symmetric (asymmetry {:e})", m.max_asymmetry());
        }
        Ok(SymMatrix(m))
    }

    /// Symmetrizes `m` as `(m + mᵀ)/2`.
    pub fn from_symmetrized(m: &Mat) -> Self {
        SymMatrix(m.symmetrized())
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}

/// Eigenvectors (columns of `vectors`) and eigenvalues sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    pub vectors: Mat,
    pub values: Vec<f64>,
}

impl EigPair {
    /// `U diag(f(λ)) Uᵀ`
    pub fn compose(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.values.len();
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let u = &self.vectors;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += u[(i, k)] * fl[k] * u[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Mat {
        self.compose(|l| l)
    }
}

/// Symmetric positive-definite matrix with an optional cached
/// eigendecomposition.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    base: SymMatrix,
    eig: Option<EigPair>,
}

impl SpdMatrix {
    /// Verifies positive definiteness by decomposing; the decomposition is
    /// kept.
    pub fn new(base: SymMatrix) -> Result<Self> {
        let eig = sym_eig(base.as_mat())?;
        if let Some(&min) = eig.values.last() {
            if min <= 0.0 {
                bail!(Domain, "matrix is not positive definite (min eigenvalue {:e})", min);
            }
        }
        Ok(SpdMatrix { base, eig: Some(eig) })
    }

    /// Wraps a value whose decomposition is already known.
    pub fn with_eig(base: SymMatrix, eig: EigPair) -> Self {
        SpdMatrix { base, eig: Some(eig) }
    }

    pub fn from_mat(m: Mat) -> Result<Self> {
        SpdMatrix::new(SymMatrix::new(m)?)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn as_mat(&self) -> &Mat {
        self.base.as_mat()
    }

    pub fn sym(&self) -> &SymMatrix {
        &self.base
    }

    pub fn eig(&mut self) -> Result<&EigPair> {
        if self.eig.is_none() {
            self.eig = Some(sym_eig(self.base.as_mat())?);
        }
        Ok(self.eig.as_ref().expect("filled above"))
    }

    pub fn cached_eig(&self) -> Option<&EigPair> {
        self.eig.as_ref()
    }
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of the symmetric part of `m`.
///
/// Sweeps visit `(p, q)` pairs in row order. The iteration stops once the
/// off-diagonal Frobenius norm falls below `1e-12·‖M‖_F`.
pub fn sym_eig(m: &Mat) -> Result<EigPair> {
    if !m.is_square() {
        bail!(Dimension, "eigendecomposition needs a square matrix, got {}×{}", m.rows(), m.cols());
    }
    if !m.is_finite() {
        bail!(InvalidInput, "matrix has non-finite entries");
    }
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut v = Mat::identity(n);
    let target = 1e-12 * a.frobenius();

    let off = |a: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let residual = off(&a);
        if residual <= target {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(EigPair { vectors, values })
}

/// Scalar functions applied to a spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralFn {
    Identity,
    Log,
    Exp,
    Sqrt,
    /// `max(ε, λ)`
    Rectify(f64),
}

impl SpectralFn {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            SpectralFn::Identity => x,
            SpectralFn::Log => x.ln(),
            SpectralFn::Exp => x.exp(),
            SpectralFn::Sqrt => x.sqrt(),
            SpectralFn::Rectify(eps) => x.max(eps),
        }
    }

    /// Derivative; the rectifier takes the pass-through branch at `λ = ε`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            SpectralFn::Identity => 1.0,
            SpectralFn::Log => 1.0 / x,
            SpectralFn::Exp => x.exp(),
            SpectralFn::Sqrt => 0.5 / x.sqrt(),
            SpectralFn::Rectify(eps) => {
                if x >= eps {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn check_domain(self, values: &[f64]) -> Result<()> {
        match self {
            SpectralFn::Log => {
                if let Some(v) = values.iter().find(|&&v| v <= 0.0) {
                    bail!(Domain, "matrix logarithm of eigenvalue {:e}", v);
                }
            }
            SpectralFn::Sqrt => {
                if let Some(v) = values.iter().find(|&&v| v < 0.0) {
                    bail!(Domain, "matrix square root of eigenvalue {:e}", v);
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// `U f(Λ) Uᵀ` for the cached (or freshly computed) decomposition of `m`.
pub fn spd_fn(m: &mut SpdMatrix, f: SpectralFn) -> Result<SymMatrix> {
    let eig = m.eig()?;
    f.check_domain(&eig.values)?;
    Ok(SymMatrix(eig.compose(|l| f.apply(l))))
}

/// Same as [`spd_fn`] for any symmetric input.
pub fn sym_fn(m: &SymMatrix, f: SpectralFn) -> Result<(SymMatrix, EigPair)> {
    let eig = sym_eig(m.as_mat())?;
    f.check_domain(&eig.values)?;
    Ok((SymMatrix(eig.compose(|l| f.apply(l))), eig))
}

/// Threshold below which two eigenvalues are treated as equal.
pub fn tie_tolerance(values: &[f64]) -> f64 {
    1e-10 * values.first().map_or(1.0, |l| l.abs().max(1.0))
}

/// Divided differences of `f` over the spectrum, with the derivative at the
/// midpoint for (near-)ties.
pub fn loewner_matrix(values: &[f64], f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Mat {
    let n = values.len();
    let tau = tie_tolerance(values);
    let fv: Vec<f64> = values.iter().map(|&l| f(l)).collect();
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (li, lj) = (values[i], values[j]);
            let v = if (li - lj).abs() > tau {
                (fv[i] - fv[j]) / (li - lj)
            } else {
                df(0.5 * (li + lj))
            };
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Gradient of `L(U f(Λ) Uᵀ)` with respect to the symmetric input, given the
/// upstream gradient `grad_out` (symmetrized first):
/// `U (K ∘ (Uᵀ sym(Ḡ) U)) Uᵀ`.
pub fn spectral_backward(eig: &EigPair, f: SpectralFn, grad_out: &Mat) -> Mat {
    let k = loewner_matrix(&eig.values, |l| f.apply(l), |l| f.derivative(l));
    let u = &eig.vectors;
    let inner = u.t_matmul(&grad_out.symmetrized()).matmul(u);
    let out = u.matmul(&k.hadamard(&inner)).matmul_t(u);
    out.symmetrized()
}

/// Orthonormalize the rows of `w` with modified Gram–Schmidt (two passes).
///
/// This is the QR retraction with a positive-diagonal `R`. A row that
/// collapses into the span of its predecessors is replaced by the first
/// canonical basis vector that is not; the returned count says how many rows
/// were re-seeded.
pub fn orthonormalize_rows(w: &Mat) -> (Mat, usize) {
    let (r, c) = (w.rows(), w.cols());
    assert!(r <= c, "cannot orthonormalize {r} rows in dimension {c}");
    let mut out = w.clone();
    let mut reseeded = 0;
    let mut next_basis = 0;
    for i in 0..r {
        let original = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut norm = project_out(&mut out, i);
        if !(norm > 1e-10 * original.max(f64::MIN_POSITIVE)) || !norm.is_finite() {
            loop {
                assert!(next_basis < c, "no basis vector left to re-seed row {i}");
                for j in 0..c {
                    out[(i, j)] = if j == next_basis { 1.0 } else { 0.0 };
                }
                next_basis += 1;
                norm = project_out(&mut out, i);
                if norm > 1e-6 {
                    break;
                }
            }
            reseeded += 1;
        }
        for j in 0..c {
            out[(i, j)] /= norm;
        }
    }
    (out, reseeded)
}

fn project_out(m: &mut Mat, i: usize) -> f64 {
    let c = m.cols();
    for _ in 0..2 {
        for p in 0..i {
            let d = (0..c).map(|j| m[(i, j)] * m[(p, j)]).sum::<f64>();
            for j in 0..c {
                m[(i, j)] -= d * m[(p, j)];
            }
        }
    }
    (0..c).map(|j| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt()
}

/// `‖W Wᵀ − I‖_F`
pub fn row_orthonormality_error(w: &Mat) -> f64 {
    w.matmul_t(w).sub(&Mat::identity(w.rows())).frobenius()
}

/// Largest singular value by power iteration on `WᵀW`, run to convergence.
pub fn largest_singular_value(w: &Mat) -> f64 {
    let n = w.cols();
    if n == 0 || w.rows() == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 1e-3).collect();
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        let wv: Vec<f64> = (0..w.rows()).map(|i| dot(w.row(i), &v)).collect();
        let mut wtwv = vec![0.0; n];
        for (i, &s) in wv.iter().enumerate() {
            for (o, &x) in wtwv.iter_mut().zip(w.row(i)) {
                *o += s * x;
            }
        }
        let norm = dot(&wtwv, &wtwv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for (vi, x) in v.iter_mut().zip(&wtwv) {
            *vi = x / norm;
        }
        let next = norm.sqrt();
        if (next - sigma).abs() <= 1e-15 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}
