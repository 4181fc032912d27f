//! Layers on the manifold of symmetric positive-definite matrices.
//!
//! * BiMap `X ↦ W X Wᵀ` with a row-orthonormal `W` (`d_out < d_in`) shrinks
//!   the matrix while keeping it positive definite.
//! * ReEig `X ↦ U max(εI, Λ) Uᵀ` lifts small eigenvalues to `ε`.
//! * LogEig `X ↦ U log(Λ) Uᵀ` maps onto the flat space of symmetric
//!   matrices.
//!
//! Gradients through ReEig/LogEig use the divided-difference (Loewner) form
//! of the eigendecomposition chain rule; BiMap weights are updated on the
//! Stiefel manifold and retracted back by QR.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{self, orthonormalize_rows, spectral_backward, EigPair, Mat, SpdMatrix, SpectralFn, SymMatrix};
use crate::params::{Param, ParamId, ParamStore, Update};
use crate::rng::{self, Stream};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Default ReEig rectification threshold.
pub const REEIG_EPS: f64 = 1e-4;

/// `W X Wᵀ` for a single matrix.
pub fn bimap_forward(x: &SpdMatrix, w: &Mat) -> Result<SpdMatrix> {
    if w.cols() != x.dim() {
        bail!(Dimension, "BiMap weight is {}×{}, input is {}×{}", w.rows(), w.cols(), x.dim(), x.dim());
    }
    SpdMatrix::new(SymMatrix::from_symmetrized(&w.matmul(x.as_mat()).matmul_t(w)))
}

/// `U max(εI, Λ) Uᵀ`; returns the decomposition of the input as well.
pub fn reeig_forward(x: &SymMatrix, eps: f64) -> Result<(SpdMatrix, EigPair)> {
    let (y, eig) = linalg::sym_fn(x, SpectralFn::Rectify(eps))?;
    let rectified: Vec<f64> = eig.values.iter().map(|&l| l.max(eps)).collect();
    let out = SpdMatrix::with_eig(y, EigPair { vectors: eig.vectors.clone(), values: rectified });
    Ok((out, eig))
}

/// `U log(Λ) Uᵀ`; domain error if any eigenvalue is not positive.
pub fn logeig_forward(x: &SymMatrix) -> Result<(SymMatrix, EigPair)> {
    linalg::sym_fn(x, SpectralFn::Log)
}

/// Gradients of `L(W X Wᵀ)` given `Ḡ = ∂L/∂Y`:
/// `∂L/∂X = Wᵀ Ḡ W`, `∂L/∂W = Ḡ W Xᵀ + Ḡᵀ W X` (`= 2 sym(Ḡ) W X` for
/// symmetric `X`).
pub fn bimap_backward(x: &Mat, w: &Mat, grad_out: &Mat) -> (Mat, Mat) {
    let dx = w.t_matmul(grad_out).matmul(w);
    let wx = w.matmul(x);
    let dw = grad_out.matmul(&w.matmul_t(x)).add(&grad_out.t_matmul(&wx));
    (dx, dw)
}

/// Which SPD layer a backward call is for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpdLayerKind {
    BiMap,
    ReEig(f64),
    LogEig,
}

/// Values cached by a forward pass and needed by [`spd_backward`].
#[derive(Debug, Clone)]
pub struct SpdCache {
    pub x_in: Mat,
    pub eig: Option<EigPair>,
    pub weight: Option<Mat>,
}

/// Gradient with respect to the layer input (and the BiMap weight).
pub fn spd_backward(kind: SpdLayerKind, cache: &SpdCache, grad_out: &Mat) -> Result<(Mat, Option<Mat>)> {
    match kind {
        SpdLayerKind::BiMap => {
            let Some(w) = &cache.weight else {
                bail!(Internal, "BiMap backward without a cached weight");
            };
            let (dx, dw) = bimap_backward(&cache.x_in, w, grad_out);
            Ok((dx, Some(dw)))
        }
        SpdLayerKind::ReEig(eps) => {
            let Some(eig) = &cache.eig else {
                bail!(Internal, "ReEig backward without a cached decomposition");
            };
            Ok((spectral_backward(eig, SpectralFn::Rectify(eps), grad_out), None))
        }
        SpdLayerKind::LogEig => {
            let Some(eig) = &cache.eig else {
                bail!(Internal, "LogEig backward without a cached decomposition");
            };
            Ok((spectral_backward(eig, SpectralFn::Log, grad_out), None))
        }
    }
}

/// Removes the component of `G` that would leave the row-orthonormal set to
/// first order: `G − (G Wᵀ) W`.
pub fn stiefel_project(w: &Mat, euclid_grad: &Mat) -> Mat {
    euclid_grad.sub(&euclid_grad.matmul_t(w).matmul(w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiefelReport {
    /// Rows that collapsed during retraction and were re-seeded.
    pub reseeded: usize,
    /// `‖W Wᵀ − I‖_F` after the update.
    pub orthonormality_error: f64,
}

/// Riemannian gradient step followed by QR retraction onto the set of
/// row-orthonormal matrices.
pub fn stiefel_step(w: &Mat, euclid_grad: &Mat, lr: f64) -> Result<(Mat, StiefelReport)> {
    if (w.rows(), w.cols()) != (euclid_grad.rows(), euclid_grad.cols()) {
        bail!(Dimension, "gradient {}×{} for weight {}×{}", euclid_grad.rows(), euclid_grad.cols(), w.rows(), w.cols());
    }
    if !euclid_grad.is_finite() {
        bail!(InvalidInput, "non-finite Stiefel gradient");
    }
    let tangent = stiefel_project(w, euclid_grad);
    let moved = w.sub(&tangent.scale(lr));
    let (next, reseeded) = orthonormalize_rows(&moved);
    let orthonormality_error = linalg::row_orthonormality_error(&next);
    Ok((next, StiefelReport { reseeded, orthonormality_error }))
}

/// Random Gaussian rows made orthonormal.
pub fn random_semi_orthogonal(rows: usize, cols: usize, rng: &mut Stream) -> Mat {
    let g = Mat::from_vec(rows, cols, rng::normals(rng, rows * cols)).expect("sized");
    orthonormalize_rows(&g).0
}

#[derive(Debug, Clone)]
pub struct BiMapLayer {
    pub w: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl BiMapLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut Stream) -> Result<Self> {
        if d_out == 0 || d_out >= d_in {
            bail!(Config, "BiMap must reduce dimension: {d_in} → {d_out}");
        }
        let w = random_semi_orthogonal(d_out, d_in, rng);
        let t = Tensor::new(&[d_out, d_in], w.as_slice().iter().map(|&v| T::of(v)).collect())?;
        let w = store.push(Param::new(format!("{name}.weight"), t, Update::Stiefel).with_master(w.into_vec()));
        Ok(BiMapLayer { w, d_in, d_out })
    }

    /// The weight in double precision (the master copy when present).
    pub fn weight<T: Real>(&self, store: &ParamStore<T>) -> Mat {
        let p = store.get(self.w);
        let data = match &p.master {
            Some(m) => m.clone(),
            None => p.value.data().iter().map(|v| v.f64()).collect(),
        };
        Mat::from_vec(self.d_out, self.d_in, data).expect("sized")
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        g.bimap_with_weight(x, w, self.weight(store))
    }

    /// Applies the accumulated gradient as a Stiefel step and clears it.
    pub fn stiefel_update<T: Real>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<StiefelReport> {
        let w = self.weight(store);
        let grad = {
            let p = store.get(self.w);
            Mat::from_vec(self.d_out, self.d_in, p.grad.iter().map(|v| v.f64()).collect())?
        };
        let (next, report) = stiefel_step(&w, &grad, lr)?;
        let p = store.get_mut(self.w);
        for (d, &s) in p.value.data_mut().iter_mut().zip(next.as_slice()) {
            *d = T::of(s);
        }
        p.master = Some(next.into_vec());
        p.zero_grad();
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReEigLayer {
    pub eps: f64,
}

impl ReEigLayer {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            bail!(Config, "ReEig threshold must be positive, got {eps}");
        }
        Ok(ReEigLayer { eps })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.spectral(x, SpectralFn::Rectify(self.eps))
    }
}

/// `(BiMap, ReEig)` blocs followed by LogEig.
#[derive(Debug, Clone)]
pub struct SpdNetStack {
    pub blocs: Vec<(BiMapLayer, ReEigLayer)>,
}

/// Intermediate values of one stack evaluation, for invariant checks.
#[derive(Debug, Clone)]
pub struct StackTrace {
    pub after_bimap: Vec<Var>,
    pub after_reeig: Vec<Var>,
    pub logeig: Var,
}

impl SpdNetStack {
    /// `dims` lists the matrix size entering each bloc and the final size,
    /// e.g. `[32, 16, 8, 4]` for three blocs.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: &[usize], eps: f64, rng: &mut Stream) -> Result<Self> {
        if dims.len() < 2 || dims.len() > 4 {
            bail!(Config, "SPD stack needs 1 to 3 blocs, got dimension list {:?}", dims);
        }
        let mut blocs = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let bimap = BiMapLayer::new(store, &format!("{name}.bloc{i}.bimap"), pair[0], pair[1], rng)?;
            blocs.push((bimap, ReEigLayer::new(eps)?));
        }
        Ok(SpdNetStack { blocs })
    }

    pub fn input_dim(&self) -> usize {
        self.blocs[0].0.d_in
    }

    pub fn output_dim(&self) -> usize {
        self.blocs.last().expect("non-empty").0.d_out
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<StackTrace> {
        let (_, d) = g.value(x).dims_mats()?;
        if d != self.input_dim() {
            bail!(Dimension, "SPD stack expects {}×{} inputs, got {}×{}", self.input_dim(), self.input_dim(), d, d);
        }
        let mut cur = x;
        let mut after_bimap = Vec::new();
        let mut after_reeig = Vec::new();
        for (bimap, reeig) in &self.blocs {
            cur = bimap.forward(g, store, cur)?;
            after_bimap.push(cur);
            cur = reeig.forward(g, cur)?;
            after_reeig.push(cur);
        }
        let logeig = g.spectral(cur, SpectralFn::Log)?;
        Ok(StackTrace { after_bimap, after_reeig, logeig })
    }

    pub fn stiefel_update<T: Real>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<Vec<StiefelReport>> {
        self.blocs.iter().map(|(b, _)| b.stiefel_update(store, lr)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{row_orthonormality_error, sym_eig};

    fn random_spd(n: usize, seed: u64) -> SpdMatrix {
        let mut r = rng::stream(seed);
        let a = Mat::from_vec(n, n, rng::normals(&mut r, n * n)).unwrap();
        SpdMatrix::from_mat(a.matmul_t(&a).add(&Mat::identity(n).scale(0.05)).symmetrized()).unwrap()
    }

    #[test]
    fn bimap_identity_weight() {
        let x = random_spd(4, 1);
        let y = bimap_forward(&x, &Mat::identity(4)).unwrap();
        assert!(y.as_mat().sub(x.as_mat()).frobenius() < 1e-12);
    }

    #[test]
    fn bimap_of_identity_is_identity() {
        let w = random_semi_orthogonal(3, 6, &mut rng::stream(4));
        let y = bimap_forward(&SpdMatrix::from_mat(Mat::identity(6)).unwrap(), &w).unwrap();
        assert!(y.as_mat().sub(&Mat::identity(3)).frobenius() < 1e-12);
    }

    #[test]
    fn bimap_matches_triple_product_seed_17() {
        let mut r = rng::stream(17);
        let x = random_spd(8, 170);
        let w = random_semi_orthogonal(4, 8, &mut r);
        let y = bimap_forward(&x, &w).unwrap();
        let mut direct = Mat::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for a in 0..8 {
                    for b in 0..8 {
                        s += w[(i, a)] * x.as_mat()[(a, b)] * w[(j, b)];
                    }
                }
                direct[(i, j)] = s;
            }
        }
        assert!(y.as_mat().sub(&direct).frobenius() < 1e-12);
        assert!(*sym_eig(y.as_mat()).unwrap().values.last().unwrap() > 0.0);
    }

    #[test]
    fn bimap_dimension_mismatch() {
        let x = random_spd(4, 2);
        assert!(bimap_forward(&x, &Mat::zeros(2, 5)).is_err());
    }

    #[test]
    fn reeig_clamps_diagonal() {
        let x = SymMatrix::new(Mat::from_diag(&[2.0, 1e-8])).unwrap();
        let (y, _) = reeig_forward(&x, 1e-4).unwrap();
        assert!(y.as_mat().sub(&Mat::from_diag(&[2.0, 1e-4])).frobenius() < 1e-15);
    }

    #[test]
    fn reeig_inactive_is_identity() {
        let x = random_spd(5, 9);
        let (y, _) = reeig_forward(x.sym(), 1e-4).unwrap();
        let rel = y.as_mat().sub(x.as_mat()).frobenius() / x.as_mat().frobenius();
        assert!(rel < 1e-8);
    }

    #[test]
    fn reeig_eigenvalues_seed_21() {
        let mut r = rng::stream(21);
        let q = random_semi_orthogonal(6, 6, &mut r);
        let lambdas = [3.0, 0.5, 2e-4, 5e-5, -0.3, -2.0];
        let x = SymMatrix::from_symmetrized(&q.t_matmul(&Mat::from_diag(&lambdas)).matmul(&q));
        let (y, _) = reeig_forward(&x, 1e-4).unwrap();
        let got = sym_eig(y.as_mat()).unwrap().values;
        let mut want: Vec<f64> = lambdas.iter().map(|&l: &f64| l.max(1e-4)).collect();
        want.sort_by(|a, b| b.total_cmp(a));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn reeig_rejects_bad_eps() {
        assert!(ReEigLayer::new(0.0).is_err());
    }

    #[test]
    fn logeig_cases() {
        let (z, _) = logeig_forward(&SymMatrix::new(Mat::identity(3)).unwrap()).unwrap();
        assert!(z.as_mat().frobenius() < 1e-15);
        let e = core::f64::consts::E;
        let (z, _) = logeig_forward(&SymMatrix::new(Mat::from_diag(&[e * e, e])).unwrap()).unwrap();
        assert!(z.as_mat().sub(&Mat::from_diag(&[2.0, 1.0])).frobenius() < 1e-14);
        assert!(logeig_forward(&SymMatrix::new(Mat::from_diag(&[1.0, 0.0])).unwrap()).is_err());
    }

    #[test]
    fn logeig_after_reeig_is_finite() {
        for seed in 0..20 {
            let mut r = rng::stream(seed);
            let a = Mat::from_vec(6, 6, rng::normals(&mut r, 36)).unwrap();
            let (y, _) = reeig_forward(&SymMatrix::from_symmetrized(&a), REEIG_EPS).unwrap();
            let (z, _) = logeig_forward(y.sym()).unwrap();
            assert!(z.as_mat().is_finite());
        }
    }

    #[test]
    fn logeig_gradient_of_trace_at_identity() {
        let x = Mat::identity(4);
        let eig = sym_eig(&x).unwrap();
        let cache = SpdCache { x_in: x, eig: Some(eig), weight: None };
        let (dx, _) = spd_backward(SpdLayerKind::LogEig, &cache, &Mat::identity(4)).unwrap();
        assert!(dx.sub(&Mat::identity(4)).frobenius() < 1e-14);
    }

    #[test]
    fn reeig_inactive_gradient_passes_through() {
        let x = random_spd(5, 31);
        let g = Mat::from_vec(5, 5, rng::normals(&mut rng::stream(32), 25)).unwrap();
        let cache = SpdCache { x_in: x.as_mat().clone(), eig: Some(sym_eig(x.as_mat()).unwrap()), weight: None };
        let (dx, _) = spd_backward(SpdLayerKind::ReEig(1e-4), &cache, &g).unwrap();
        assert!(dx.sub(&g.symmetrized()).frobenius() < 1e-8);
    }

    #[test]
    fn missing_cache_is_internal_error() {
        let cache = SpdCache { x_in: Mat::identity(2), eig: None, weight: None };
        assert!(spd_backward(SpdLayerKind::LogEig, &cache, &Mat::identity(2)).is_err());
        assert!(spd_backward(SpdLayerKind::BiMap, &cache, &Mat::identity(2)).is_err());
    }

    #[test]
    fn stiefel_zero_gradient_keeps_weight() {
        let w = random_semi_orthogonal(3, 7, &mut rng::stream(5));
        let (next, rep) = stiefel_step(&w, &Mat::zeros(3, 7), 0.5).unwrap();
        assert!(next.sub(&w).frobenius() < 1e-12);
        assert_eq!(rep.reseeded, 0);
    }

    #[test]
    fn stiefel_keeps_rows_orthonormal() {
        let mut r = rng::stream(6);
        let mut w = random_semi_orthogonal(4, 9, &mut r);
        for step in 0..50 {
            let g = Mat::from_vec(4, 9, rng::normals(&mut r, 36)).unwrap().scale(10.0);
            let lr = [1.0, 0.3, 1e-3][step % 3];
            w = stiefel_step(&w, &g, lr).unwrap().0;
            assert!(row_orthonormality_error(&w) < 1e-6);
        }
    }

    #[test]
    fn stiefel_descends_trace_seed_23() {
        let mut r = rng::stream(23);
        let x = random_spd(8, 230);
        let w = random_semi_orthogonal(3, 8, &mut r);
        let loss = |w: &Mat| w.matmul(x.as_mat()).matmul_t(w).trace();
        let grad = w.matmul(x.as_mat()).scale(2.0);
        let (next, _) = stiefel_step(&w, &grad, 1e-3).unwrap();
        assert!(loss(&next) < loss(&w));
    }

    #[test]
    fn stack_dimensions_chain() {
        let mut store = ParamStore::<f64>::new(0);
        let stack = SpdNetStack::new(&mut store, "spd", &[32, 16, 8, 4], REEIG_EPS, &mut rng::stream(3)).unwrap();
        assert_eq!(stack.blocs.len(), 3);
        assert_eq!(stack.output_dim(), 4);
        assert!(SpdNetStack::new(&mut store, "bad", &[8, 8], REEIG_EPS, &mut rng::stream(3)).is_err());
        assert!(SpdNetStack::new(&mut store, "bad", &[32, 16, 8, 4, 2], REEIG_EPS, &mut rng::stream(3)).is_err());
    }
}
