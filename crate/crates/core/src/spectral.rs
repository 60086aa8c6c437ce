//! Top-k SVD diagnostics for layer pairs and a perturbation-bound checker.
//!
//! All arithmetic is f64. Two SVD routes exist:
//!
//! - [`SvdRoute::Direct`]: a dense thin SVD of the whole matrix.
//! - [`SvdRoute::Gram`]: the eigendecomposition of the smaller Gram matrix
//!   (`W Wᵀ` or `Wᵀ W`), assembled block by block straight from the stored
//!   payload so no dense f64 copy of the layer is ever held. The Gram matrix
//!   is tridiagonalized in place; all eigenvalues come from the tridiagonal
//!   solver and only the top-k eigenvectors are formed, by inverse iteration.
//!   The other side's singular vectors are recovered as `Wᵀ u / σ`.
//!
//! Every summary carries a residual certificate
//! `max_i ‖W v_i − σ_i u_i‖ / σ_1` over the top-k triplets; a Gram result
//! whose certificate or orthonormality check fails is recomputed directly.
//! The Gram route squares the condition number, so tail singular values far
//! below `σ_1` lose relative accuracy roughly like `ε (σ_1/σ_i)²`.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};
use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor_io::WeightMatrix;

/// Layers with more entries than this go through the Gram route under
/// [`SvdRoute::Auto`].
pub const DIRECT_LIMIT: usize = 1 << 22;

/// Certificate threshold for the Gram route (relative to `σ_1`).
const GRAM_RESIDUAL_TOL: f64 = 1e-9;
const ORTHO_TOL: f64 = 1e-9;
const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdRoute {
    #[default]
    Auto,
    Direct,
    Gram,
}

fn par() -> Par {
    faer::get_global_parallelism()
}

/// Read-only access to a matrix by element; lets the Gram route stream
/// from stored payloads or from differences of two payloads.
pub trait MatrixSource: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn at(&self, i: usize, j: usize) -> f64;
}

impl MatrixSource for WeightMatrix {
    fn nrows(&self) -> usize {
        self.rows()
    }
    fn ncols(&self) -> usize {
        self.cols()
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }
}

impl MatrixSource for MatRef<'_, f64> {
    fn nrows(&self) -> usize {
        faer::MatRef::nrows(self)
    }
    fn ncols(&self) -> usize {
        faer::MatRef::ncols(self)
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self[(i, j)]
    }
}

/// `W1 − W0`, evaluated lazily.
pub struct Difference<'a> {
    pub base: &'a WeightMatrix,
    pub tuned: &'a WeightMatrix,
}

impl MatrixSource for Difference<'_> {
    fn nrows(&self) -> usize {
        self.base.rows()
    }
    fn ncols(&self) -> usize {
        self.base.cols()
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.tuned.get(i, j) - self.base.get(i, j)
    }
}

/// Column block `[c0, c1)` as a dense matrix.
fn col_block(src: &dyn MatrixSource, c0: usize, c1: usize) -> Mat<f64> {
    Mat::from_fn(src.nrows(), c1 - c0, |i, j| src.at(i, c0 + j))
}

fn row_block(src: &dyn MatrixSource, r0: usize, r1: usize) -> Mat<f64> {
    Mat::from_fn(r1 - r0, src.ncols(), |i, j| src.at(r0 + i, j))
}

fn dense(src: &dyn MatrixSource) -> Mat<f64> {
    Mat::from_fn(src.nrows(), src.ncols(), |i, j| src.at(i, j))
}

fn blocks(len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len.div_ceil(BLOCK)).map(move |b| (b * BLOCK, ((b + 1) * BLOCK).min(len)))
}

/// The smaller of `W Wᵀ` and `Wᵀ W`, accumulated block by block. Returns the
/// Gram matrix and whether it is the row-side (`W Wᵀ`) product.
fn gram(src: &dyn MatrixSource) -> (Mat<f64>, bool) {
    let (m, n) = (src.nrows(), src.ncols());
    if m <= n {
        let mut g = Mat::<f64>::zeros(m, m);
        for (c0, c1) in blocks(n) {
            let b = col_block(src, c0, c1);
            matmul(
                g.as_mut(),
                Accum::Add,
                b.as_ref(),
                b.transpose(),
                1.0,
                par(),
            );
        }
        (g, true)
    } else {
        let mut g = Mat::<f64>::zeros(n, n);
        for (r0, r1) in blocks(m) {
            let b = row_block(src, r0, r1);
            matmul(
                g.as_mut(),
                Accum::Add,
                b.transpose(),
                b.as_ref(),
                1.0,
                par(),
            );
        }
        (g, false)
    }
}

/// `Wᵀ X` (n×k) for an m×k `X`, streaming over column blocks of W.
fn apply_transpose(src: &dyn MatrixSource, x: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(src.ncols(), x.ncols());
    for (c0, c1) in blocks(src.ncols()) {
        let b = col_block(src, c0, c1);
        matmul(
            out.as_mut().subrows_mut(c0, c1 - c0),
            Accum::Replace,
            b.transpose(),
            x,
            1.0,
            par(),
        );
    }
    out
}

/// `W X` (m×k) for an n×k `X`, streaming over row blocks of W.
fn apply(src: &dyn MatrixSource, x: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(src.nrows(), x.ncols());
    for (r0, r1) in blocks(src.nrows()) {
        let b = row_block(src, r0, r1);
        matmul(
            out.as_mut().subrows_mut(r0, r1 - r0),
            Accum::Replace,
            b.as_ref(),
            x,
            1.0,
            par(),
        );
    }
    out
}

/// Top-k singular triplets and the full spectrum of one layer.
#[derive(Debug, Clone)]
pub struct SpectralSummary {
    pub layer_name: String,
    pub k: usize,
    /// All `min(m, n)` singular values, non-increasing.
    pub sigma: Vec<f64>,
    /// m×k, orthonormal columns.
    pub u: Mat<f64>,
    /// n×k, orthonormal columns.
    pub v: Mat<f64>,
    /// `σ_k − σ_{k+1}` (1-based).
    pub gap: f64,
    /// Route actually used (never `Auto`).
    pub route: SvdRoute,
    /// `max_i ‖W v_i − σ_i u_i‖ / σ_1` over the top k.
    pub residual: f64,
}

impl SpectralSummary {
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    /// Largest deviation of `UᵀU` or `VᵀV` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        ortho_error(self.u.as_ref()).max(ortho_error(self.v.as_ref()))
    }

    /// The leading `k` triplets of a larger summary.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        check_k(self.rows(), self.cols(), k)?;
        if k > self.k {
            return Err(Error::Config(format!(
                "cannot extend a rank-{} summary to k = {k}",
                self.k
            )));
        }
        Ok(SpectralSummary {
            layer_name: self.layer_name.clone(),
            k,
            sigma: self.sigma.clone(),
            u: self.u.subcols(0, k).to_owned(),
            v: self.v.subcols(0, k).to_owned(),
            gap: self.sigma[k - 1] - self.sigma[k],
            route: self.route,
            residual: self.residual,
        })
    }

    /// `U_k diag(σ_1..σ_k) V_kᵀ`.
    pub fn reconstruct(&self) -> Mat<f64> {
        let us = Mat::from_fn(self.u.nrows(), self.k, |i, j| {
            self.u[(i, j)] * self.sigma[j]
        });
        &us * self.v.transpose()
    }
}

fn ortho_error(q: MatRef<'_, f64>) -> f64 {
    let g = q.transpose() * q;
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Flips each pair `(u_i, v_i)` so that the first non-negligible entry of
/// `u_i` is positive.
fn fix_signs(u: &mut Mat<f64>, v: &mut Mat<f64>) {
    for j in 0..u.ncols() {
        let lead = (0..u.nrows()).map(|i| u[(i, j)]).find(|x| x.abs() > 1e-12);
        if lead.is_some_and(|x| x < 0.0) {
            for i in 0..u.nrows() {
                u[(i, j)] = -u[(i, j)];
            }
            for i in 0..v.nrows() {
                v[(i, j)] = -v[(i, j)];
            }
        }
    }
}

fn residual_of(
    src: &dyn MatrixSource,
    u: MatRef<'_, f64>,
    sigma: &[f64],
    v: MatRef<'_, f64>,
) -> f64 {
    let wv = apply(src, v);
    let top = sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0.0;
    }
    (0..u.ncols())
        .map(|j| {
            (0..u.nrows())
                .map(|i| (wv[(i, j)] - sigma[j] * u[(i, j)]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
        / top
}

fn check_k(m: usize, n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= m.min(n) {
        return Err(Error::Config(format!(
            "k must satisfy 1 <= k < min(m, n) = {}, got {k}",
            m.min(n)
        )));
    }
    Ok(())
}

/// Thin SVD of a dense matrix: `(U, σ, V)` with σ non-increasing.
pub fn thin_svd(a: MatRef<'_, f64>) -> Result<(Mat<f64>, Vec<f64>, Mat<f64>)> {
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Numerics(format!("SVD did not converge: {e:?}")))?;
    let sigma = svd.S().column_vector().iter().copied().collect();
    Ok((svd.U().to_owned(), sigma, svd.V().to_owned()))
}

/// Singular values only, non-increasing.
pub fn singular_values(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    a.singular_values()
        .map_err(|e| Error::Numerics(format!("SVD did not converge: {e:?}")))
}

fn direct(name: &str, src: &dyn MatrixSource, k: usize) -> Result<SpectralSummary> {
    let a = dense(src);
    let (u, sigma, v) = thin_svd(a.as_ref())?;
    let mut u = u.subcols(0, k).to_owned();
    let mut v = v.subcols(0, k).to_owned();
    fix_signs(&mut u, &mut v);
    let residual = residual_of(&a.as_ref(), u.as_ref(), &sigma, v.as_ref());
    Ok(SpectralSummary {
        layer_name: name.to_string(),
        k,
        gap: sigma[k - 1] - sigma[k],
        sigma,
        u,
        v,
        route: SvdRoute::Direct,
        residual,
    })
}

/// Inverse-iteration sweeps per eigenvector.
const INVERSE_ITERS: usize = 3;

/// LU factorization with partial pivoting of `T − λI` for a symmetric
/// tridiagonal `T` (diagonal `d`, off-diagonal `e`). Zero pivots are nudged
/// to `tiny`, which is what makes a near-singular shift usable.
struct TridiagLu {
    diag: Vec<f64>,
    sup: Vec<f64>,
    sup2: Vec<f64>,
    mult: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagLu {
    fn new(d: &[f64], e: &[f64], lambda: f64, tiny: f64) -> Self {
        let n = d.len();
        let mut diag: Vec<f64> = d.iter().map(|&x| x - lambda).collect();
        let mut sup = e.to_vec();
        let mut sup2 = vec![0.0; n.saturating_sub(2)];
        let mut mult = e.to_vec();
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            let sub = mult[i];
            if diag[i].abs() >= sub.abs() {
                if diag[i] == 0.0 {
                    diag[i] = tiny;
                }
                let f = sub / diag[i];
                mult[i] = f;
                diag[i + 1] -= f * sup[i];
            } else {
                let f = diag[i] / sub;
                diag[i] = sub;
                mult[i] = f;
                let t = sup[i];
                sup[i] = diag[i + 1];
                diag[i + 1] = t - f * diag[i + 1];
                if i + 2 < n {
                    sup2[i] = sup[i + 1];
                    sup[i + 1] *= -f;
                }
                swapped[i] = true;
            }
        }
        for x in diag.iter_mut() {
            if x.abs() < tiny {
                *x = tiny.copysign(*x);
            }
        }
        Self {
            diag,
            sup,
            sup2,
            mult,
            swapped,
        }
    }

    fn solve(&self, x: &mut [f64]) {
        let n = x.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                x.swap(i, i + 1);
            }
            x[i + 1] -= self.mult[i] * x[i];
        }
        for i in (0..n).rev() {
            let mut t = x[i];
            if i + 1 < n {
                t -= self.sup[i] * x[i + 1];
            }
            if i + 2 < n {
                t -= self.sup2[i] * x[i + 2];
            }
            x[i] = t / self.diag[i];
        }
    }
}

/// Eigenvectors of the symmetric tridiagonal `(d, e)` for the given
/// eigenvalues, by inverse iteration with full reorthogonalization against
/// the vectors already found (which keeps clustered eigenvalues apart).
fn tridiag_eigvecs(d: &[f64], e: &[f64], lambdas: &[f64], seed_label: &str) -> Mat<f64> {
    let n = d.len();
    let scale = d
        .iter()
        .chain(e)
        .fold(0.0f64, |a, &x| a.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let tiny = f64::EPSILON * scale;
    let mut rng = rng_for(0, seed_label);
    let mut x = Mat::<f64>::zeros(n, lambdas.len());
    for (j, &lambda) in lambdas.iter().enumerate() {
        let lu = TridiagLu::new(d, e, lambda, tiny);
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..INVERSE_ITERS {
            lu.solve(&mut v);
            for _ in 0..2 {
                for c in 0..j {
                    let dot: f64 = (0..n).map(|i| x[(i, c)] * v[i]).sum();
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi -= dot * x[(i, c)];
                    }
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            v.iter_mut().for_each(|a| *a /= norm);
        }
        for (i, &vi) in v.iter().enumerate() {
            x[(i, j)] = vi;
        }
    }
    x
}

/// Every eigenvalue (non-increasing) and the top-`k` eigenvectors of the
/// symmetric matrix `g`, whose lower triangle is overwritten.
///
/// Tridiagonalizes in place, finds the eigenvalues of the tridiagonal form,
/// computes only `k` of its eigenvectors and maps them back through the
/// Householder reflectors, so the extra memory is `O(p·k)` rather than the
/// `O(p²)` of a full eigendecomposition.
fn top_eigen_in_place(mut g: Mat<f64>, k: usize) -> Result<(Vec<f64>, Mat<f64>)> {
    use faer::dyn_stack::{MemBuffer, MemStack, StackReq};
    use faer::linalg::evd::{self, tridiag};
    use faer::linalg::{
        householder, qr::no_pivoting::factor::recommended_block_size, temp_mat_scratch,
    };

    let p = g.nrows();
    let par = par();
    let bs = recommended_block_size::<f64>(p, p);
    let mut hh = Mat::<f64>::zeros(bs, p.saturating_sub(1));
    let mut buf = MemBuffer::new(StackReq::any_of(&[
        tridiag::tridiag_in_place_scratch::<f64>(p, par, Default::default()),
        temp_mat_scratch::<f64>(p, 1).array(2),
        householder::apply_block_householder_sequence_on_the_left_in_place_scratch::<f64>(
            p.saturating_sub(1),
            bs,
            k,
        ),
    ]));
    let stack = MemStack::new(&mut buf);
    tridiag::tridiag_in_place(g.as_mut(), hh.as_mut(), par, stack, Default::default());

    let d: Vec<f64> = (0..p).map(|i| g[(i, i)]).collect();
    let e: Vec<f64> = (0..p.saturating_sub(1)).map(|i| g[(i + 1, i)]).collect();
    let dm = faer::ColRef::from_slice(&d);
    let mut em = vec![0.0; p];
    em[..e.len()].copy_from_slice(&e);
    let mut s = faer::Col::<f64>::zeros(p);
    evd::tridiagonal_self_adjoint_evd(
        dm.as_diagonal(),
        faer::ColRef::from_slice(&em).as_diagonal(),
        s.as_diagonal_mut(),
        None,
        par,
        stack,
        Default::default(),
    )
    .map_err(|e| Error::Numerics(format!("eigensolver did not converge: {e:?}")))?;
    let mut lambda: Vec<f64> = s.iter().copied().collect();
    lambda.sort_by(|a, b| b.total_cmp(a));

    let mut x = tridiag_eigvecs(&d, &e, &lambda[..k], "spectral/inverse-iteration");
    if p > 1 {
        householder::apply_block_householder_sequence_on_the_left_in_place_with_conj(
            g.as_ref().submatrix(1, 0, p - 1, p - 1),
            hh.as_ref(),
            faer::Conj::No,
            x.as_mut().subrows_mut(1, p - 1),
            par,
            stack,
        );
    }
    Ok((lambda, x))
}

fn via_gram(name: &str, src: &dyn MatrixSource, k: usize) -> Result<Option<SpectralSummary>> {
    let (g, row_side) = gram(src);
    let (lambda, x) = top_eigen_in_place(g, k)?;
    let sigma: Vec<f64> = lambda.iter().map(|&l| l.max(0.0).sqrt()).collect();
    if sigma[k - 1] <= sigma[0] * 1e-7 {
        return Ok(None);
    }
    // other side: Wᵀ u / σ (row side) or W v / σ (column side)
    let mut y = if row_side {
        apply_transpose(src, x.as_ref())
    } else {
        apply(src, x.as_ref())
    };
    for j in 0..k {
        for i in 0..y.nrows() {
            y[(i, j)] /= sigma[j];
        }
    }
    let (mut u, mut v) = if row_side { (x, y) } else { (y, x) };
    fix_signs(&mut u, &mut v);
    let residual = residual_of(src, u.as_ref(), &sigma, v.as_ref());
    let summary = SpectralSummary {
        layer_name: name.to_string(),
        k,
        gap: sigma[k - 1] - sigma[k],
        sigma,
        u,
        v,
        route: SvdRoute::Gram,
        residual,
    };
    if residual > GRAM_RESIDUAL_TOL || summary.orthonormality_error() > ORTHO_TOL {
        return Ok(None);
    }
    Ok(Some(summary))
}

/// Top-k singular subspaces and the full spectrum of `src`.
pub fn svd_topk_source(
    name: &str,
    src: &dyn MatrixSource,
    k: usize,
    route: SvdRoute,
) -> Result<SpectralSummary> {
    let (m, n) = (src.nrows(), src.ncols());
    check_k(m, n, k)?;
    let finite = (0..m).all(|i| (0..n).all(|j| src.at(i, j).is_finite()));
    if !finite {
        return Err(Error::Numerics(format!("`{name}` has non-finite entries")));
    }
    let use_gram = match route {
        SvdRoute::Auto => m * n > DIRECT_LIMIT,
        SvdRoute::Gram => true,
        SvdRoute::Direct => false,
    };
    if use_gram {
        if let Some(s) = via_gram(name, src, k)? {
            return Ok(s);
        }
        log::warn!("`{name}`: Gram route failed its certificate, falling back to a direct SVD");
    }
    direct(name, src, k)
}

/// Top-k SVD of a layer with the default route choice.
pub fn svd_topk(w: &WeightMatrix, k: usize) -> Result<SpectralSummary> {
    svd_topk_source(&w.name, w, k, SvdRoute::Auto)
}

/// Principal angles (radians, non-decreasing) between the column spans of
/// two matrices with orthonormal columns.
///
/// Cosines come from the singular values of `AᵀB`, sines from those of
/// `B − A(AᵀB)`; each angle is taken from whichever is better conditioned
/// (sine below 45°, cosine above).
pub fn subspace_angles(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::Config(format!(
            "bases are {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let k = a.ncols();
    let c = a.transpose() * b;
    let cos = singular_values(c.as_ref())?;
    let resid = b - a * &c;
    let mut sin = singular_values(resid.as_ref())?;
    sin.reverse();
    sin.resize(k, 0.0);
    Ok((0..k)
        .map(|i| {
            let ci = cos[i].clamp(0.0, 1.0);
            if ci * ci >= 0.5 {
                sin[i].clamp(0.0, 1.0).asin()
            } else {
                ci.acos()
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAngles {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl PrincipalAngles {
    pub fn max_left(&self) -> f64 {
        self.left.last().copied().unwrap_or(0.0)
    }

    pub fn max_right(&self) -> f64 {
        self.right.last().copied().unwrap_or(0.0)
    }
}

pub fn principal_angles(s0: &SpectralSummary, s1: &SpectralSummary) -> Result<PrincipalAngles> {
    if s0.k != s1.k {
        return Err(Error::Config(format!("k differs: {} vs {}", s0.k, s1.k)));
    }
    Ok(PrincipalAngles {
        left: subspace_angles(s0.u.as_ref(), s1.u.as_ref())?,
        right: subspace_angles(s0.v.as_ref(), s1.v.as_ref())?,
    })
}

/// Normalized spectral shift `‖σ1 − σ0‖₂ / ‖σ0‖₂`.
pub fn nss(sigma0: &[f64], sigma1: &[f64]) -> Result<f64> {
    if sigma0.len() != sigma1.len() {
        return Err(Error::Shape(format!(
            "spectra have {} and {} values",
            sigma0.len(),
            sigma1.len()
        )));
    }
    let base = sigma0.iter().map(|s| s * s).sum::<f64>().sqrt();
    if base == 0.0 {
        return Err(Error::Domain("base spectrum is zero".into()));
    }
    let diff = sigma0
        .iter()
        .zip(sigma1)
        .map(|(a, b)| (b - a).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(diff / base)
}

/// `|Σ_{i≤k} σ1_i − Σ_{i≤k} σ0_i|`.
pub fn kyfan_drift(sigma0: &[f64], sigma1: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > sigma0.len() || k > sigma1.len() {
        return Err(Error::Config(format!(
            "Ky Fan k = {k} outside 1..={}",
            sigma0.len().min(sigma1.len())
        )));
    }
    let s0: f64 = sigma0[..k].iter().sum();
    let s1: f64 = sigma1[..k].iter().sum();
    Ok((s1 - s0).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KyFanEntry {
    pub k: usize,
    pub drift: f64,
}

/// Spectral drift of one layer between two checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer_name: String,
    pub k: usize,
    pub max_angle_left: f64,
    pub max_angle_right: f64,
    /// NSS over the full spectrum.
    pub nss_full: f64,
    /// NSS over the top k values only.
    pub nss_topk: f64,
    pub kyfan: Vec<KyFanEntry>,
    /// `max_i |Δσ_i|`.
    pub weyl_max_dsigma: f64,
    /// `Σ_i (Δσ_i)²`.
    pub hoffman_wielandt: f64,
    pub gap_k: f64,
    pub route: SvdRoute,
    pub residual: f64,
}

/// Compares two summaries of the same layer. Ky Fan drifts are reported for
/// every k in `kyfan_ks` that fits the spectrum.
pub fn layer_drift(
    s0: &SpectralSummary,
    s1: &SpectralSummary,
    kyfan_ks: &[usize],
) -> Result<LayerDrift> {
    let angles = principal_angles(s0, s1)?;
    let k = s0.k;
    let kyfan = kyfan_ks
        .iter()
        .filter(|&&kk| kk >= 1 && kk <= s0.sigma.len())
        .map(|&kk| {
            Ok(KyFanEntry {
                k: kk,
                drift: kyfan_drift(&s0.sigma, &s1.sigma, kk)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d: Vec<f64> = s0.sigma.iter().zip(&s1.sigma).map(|(a, b)| b - a).collect();
    Ok(LayerDrift {
        layer_name: s0.layer_name.clone(),
        k,
        max_angle_left: angles.max_left(),
        max_angle_right: angles.max_right(),
        nss_full: nss(&s0.sigma, &s1.sigma)?,
        nss_topk: nss(&s0.sigma[..k], &s1.sigma[..k])?,
        kyfan,
        weyl_max_dsigma: d.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        hoffman_wielandt: d.iter().map(|x| x * x).sum(),
        gap_k: s0.gap,
        route: s0.route,
        residual: s0.residual.max(s1.residual),
    })
}

/// Per-layer drift rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub layers: Vec<LayerDrift>,
}

impl DriftReport {
    /// One line per layer. Ky Fan drifts appear as `kyfan_<k>` columns for
    /// the k values of the first layer.
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let ks: Vec<usize> = self
            .layers
            .first()
            .map(|l| l.kyfan.iter().map(|e| e.k).collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "layer",
            "k",
            "max_angle_left",
            "max_angle_right",
            "nss_full",
            "nss_topk",
            "weyl_max_dsigma",
            "hoffman_wielandt",
            "gap_k",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(ks.iter().map(|k| format!("kyfan_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for l in &self.layers {
            let mut row = vec![
                l.layer_name.clone(),
                l.k.to_string(),
                l.max_angle_left.to_string(),
                l.max_angle_right.to_string(),
                l.nss_full.to_string(),
                l.nss_topk.to_string(),
                l.weyl_max_dsigma.to_string(),
                l.hoffman_wielandt.to_string(),
                l.gap_k.to_string(),
            ];
            for k in &ks {
                row.push(
                    l.kyfan
                        .iter()
                        .find(|e| e.k == *k)
                        .map(|e| e.drift.to_string())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("<csv>", e.into())
}

/// Relative slack granted to every inequality.
pub const BOUND_REL_SLACK: f64 = 1e-6;
/// Absolute floor (times the natural scale of the quantity) so that exact
/// zeros on the right-hand side survive rounding on the left.
const BOUND_ABS_FLOOR: f64 = 1e-12;

/// One inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub formula: String,
    pub lhs: f64,
    pub rhs: f64,
    /// Largest `lhs` that still counts as holding.
    pub allowed: f64,
    pub holds: bool,
}

impl BoundCheck {
    fn new(name: &str, formula: &str, lhs: f64, rhs: f64, scale: f64) -> Self {
        let allowed = rhs * (1.0 + BOUND_REL_SLACK) + BOUND_ABS_FLOOR * scale;
        BoundCheck {
            name: name.into(),
            formula: formula.into(),
            lhs,
            rhs,
            allowed,
            holds: lhs <= allowed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCheck {
    pub name: String,
    pub reason: String,
}

/// Both sides of every perturbation inequality for one `(W0, ΔW, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub k: usize,
    pub gap_k: f64,
    pub delta_op: f64,
    pub delta_fro: f64,
    pub checks: Vec<BoundCheck>,
    pub skipped: Vec<SkippedCheck>,
}

impl BoundReport {
    pub fn violations(&self) -> impl Iterator<Item = &BoundCheck> {
        self.checks.iter().filter(|c| !c.holds)
    }

    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn check(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Assembles the bound report from spectral summaries of `W0` and
/// `W1 = W0 + ΔW` plus the two norms of `ΔW`.
///
/// The sin-Θ inequality with the unperturbed gap, `‖sinΘ‖₂ ≤ ‖ΔW‖₂/γ_k`, is
/// checked as stated. It is not a theorem in general (it can fail when
/// `‖ΔW‖₂` is a sizeable fraction of `γ_k`), so the report also carries the
/// form that Wedin's theorem does guarantee once Weyl's inequality bounds the
/// perturbed gap: `‖sinΘ‖₂ ≤ ‖ΔW‖₂/(γ_k − ‖ΔW‖₂)` for `‖ΔW‖₂ < γ_k`.
pub fn bounds_from_summaries(
    s0: &SpectralSummary,
    s1: &SpectralSummary,
    delta_op: f64,
    delta_fro: f64,
) -> Result<BoundReport> {
    let k = s0.k;
    let scale = s0.sigma[0]
        .max(s1.sigma[0])
        .max(delta_op)
        .max(f64::MIN_POSITIVE);
    let d: Vec<f64> = s0.sigma.iter().zip(&s1.sigma).map(|(a, b)| b - a).collect();
    let mut checks = Vec::new();
    let mut skipped = Vec::new();

    let weyl = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    checks.push(BoundCheck::new(
        "weyl",
        "max_i |σ_i(W1) − σ_i(W0)| ≤ ‖ΔW‖₂",
        weyl,
        delta_op,
        scale,
    ));
    let hw: f64 = d.iter().map(|x| x * x).sum();
    checks.push(BoundCheck::new(
        "hoffman_wielandt",
        "Σ_i (σ_i(W1) − σ_i(W0))² ≤ ‖ΔW‖_F²",
        hw,
        delta_fro * delta_fro,
        scale * scale,
    ));
    let drift = kyfan_drift(&s0.sigma, &s1.sigma, k)?;
    let abs_sum: f64 = d[..k].iter().map(|x| x.abs()).sum();
    checks.push(BoundCheck::new(
        "kyfan_triangle",
        "|‖W1‖_(k) − ‖W0‖_(k)| ≤ Σ_{i≤k} |Δσ_i|",
        drift,
        abs_sum,
        scale,
    ));
    checks.push(BoundCheck::new(
        "kyfan",
        "|‖W1‖_(k) − ‖W0‖_(k)| ≤ k ‖ΔW‖₂",
        drift,
        k as f64 * delta_op,
        k as f64 * scale,
    ));
    checks.push(BoundCheck::new(
        "op_le_fro",
        "‖ΔW‖₂ ≤ ‖ΔW‖_F",
        delta_op,
        delta_fro,
        scale,
    ));

    let gap = s0.gap;
    if gap > 0.0 {
        let angles = principal_angles(s0, s1)?;
        let sin_l = angles.max_left().sin();
        let sin_r = angles.max_right().sin();
        checks.push(BoundCheck::new(
            "wedin_left",
            "‖sinΘ(U_k(W0), U_k(W1))‖₂ ≤ ‖ΔW‖₂ / γ_k",
            sin_l,
            delta_op / gap,
            1.0,
        ));
        checks.push(BoundCheck::new(
            "wedin_right",
            "‖sinΘ(V_k(W0), V_k(W1))‖₂ ≤ ‖ΔW‖₂ / γ_k",
            sin_r,
            delta_op / gap,
            1.0,
        ));
        if delta_op < gap {
            let rhs = delta_op / (gap - delta_op);
            checks.push(BoundCheck::new(
                "wedin_perturbed_gap",
                "max(‖sinΘ_U‖₂, ‖sinΘ_V‖₂) ≤ ‖ΔW‖₂ / (γ_k − ‖ΔW‖₂)",
                sin_l.max(sin_r),
                rhs,
                1.0,
            ));
        } else {
            skipped.push(SkippedCheck {
                name: "wedin_perturbed_gap".into(),
                reason: format!("‖ΔW‖₂ = {delta_op} ≥ γ_k = {gap}; the bound is vacuous"),
            });
        }
    } else {
        let err = Error::Gap { k };
        for name in ["wedin_left", "wedin_right", "wedin_perturbed_gap"] {
            skipped.push(SkippedCheck {
                name: name.into(),
                reason: err.to_string(),
            });
        }
    }
    Ok(BoundReport {
        k,
        gap_k: gap,
        delta_op,
        delta_fro,
        checks,
        skipped,
    })
}

/// `‖ΔW‖₂` of a streamed matrix: the largest singular value, from the Gram
/// eigenvalues when the matrix is large.
pub fn spectral_norm(src: &dyn MatrixSource) -> Result<f64> {
    if src.nrows() * src.ncols() > DIRECT_LIMIT {
        let (g, _) = gram(src);
        let ev = g
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Numerics(format!("eigensolver did not converge: {e:?}")))?;
        Ok(ev.last().copied().unwrap_or(0.0).max(0.0).sqrt())
    } else {
        Ok(singular_values(dense(src).as_ref())?
            .first()
            .copied()
            .unwrap_or(0.0))
    }
}

pub fn frobenius_norm(src: &dyn MatrixSource) -> f64 {
    // scaled accumulation guards against overflow on huge entries
    let mut scale = 0.0f64;
    let mut ssq = 1.0f64;
    for i in 0..src.nrows() {
        for j in 0..src.ncols() {
            let x = src.at(i, j).abs();
            if x == 0.0 {
                continue;
            }
            if scale < x {
                ssq = 1.0 + ssq * (scale / x).powi(2);
                scale = x;
            } else {
                ssq += (x / scale).powi(2);
            }
        }
    }
    scale * ssq.sqrt()
}

fn projector_distance(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<f64> {
    let p = a * a.transpose() - b * b.transpose();
    Ok(singular_values(p.as_ref())?.first().copied().unwrap_or(0.0))
}

/// Largest dimension for which the explicit projector difference is formed.
const PROJECTOR_LIMIT: usize = 1024;

/// Checks every perturbation inequality for `W1 = W0 + ΔW` at rank `k`.
///
/// Up to moderate sizes the report also checks projection stability
/// directly: `‖U0U0ᵀ − U1U1ᵀ‖₂` is formed explicitly, compared with the
/// largest principal-angle sine, and bounded by `‖ΔW‖₂/γ_k`.
pub fn verify_perturbation_bounds(
    w0: &WeightMatrix,
    delta: &WeightMatrix,
    k: usize,
) -> Result<BoundReport> {
    if w0.shape() != delta.shape() {
        return Err(Error::Shape(format!(
            "W0 is {:?} but ΔW is {:?}",
            w0.shape(),
            delta.shape()
        )));
    }
    let a0 = w0.to_mat();
    let d = delta.to_mat();
    verify_bounds_dense(&w0.name, a0.as_ref(), d.as_ref(), k)
}

/// Dense-matrix form of [`verify_perturbation_bounds`].
pub fn verify_bounds_dense(
    name: &str,
    w0: MatRef<'_, f64>,
    delta: MatRef<'_, f64>,
    k: usize,
) -> Result<BoundReport> {
    let w1 = w0 + delta;
    let route = SvdRoute::Auto;
    let s0 = svd_topk_source(name, &w0, k, route)?;
    let s1 = svd_topk_source(name, &w1.as_ref(), k, route)?;
    let delta_op = spectral_norm(&delta)?;
    let delta_fro = delta.norm_l2();
    let mut report = bounds_from_summaries(&s0, &s1, delta_op, delta_fro)?;
    if report.gap_k > 0.0 && w0.nrows().max(w0.ncols()) <= PROJECTOR_LIMIT {
        let angles = principal_angles(&s0, &s1)?;
        for (side, a, b, theta) in [
            ("left", s0.u.as_ref(), s1.u.as_ref(), angles.max_left()),
            ("right", s0.v.as_ref(), s1.v.as_ref(), angles.max_right()),
        ] {
            let dist = projector_distance(a, b)?;
            report.checks.push(BoundCheck::new(
                &format!("projection_identity_{side}"),
                "|‖P0 − P1‖₂ − ‖sinΘ‖₂| ≤ 1e-8",
                (dist - theta.sin()).abs(),
                1e-8,
                0.0,
            ));
            report.checks.push(BoundCheck::new(
                &format!("projection_stability_{side}"),
                "‖P_k(W0) − P_k(W1)‖₂ ≤ ‖ΔW‖₂ / γ_k",
                dist,
                delta_op / report.gap_k,
                1.0,
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mat(rows: usize, cols: usize, v: &[f64]) -> WeightMatrix {
        WeightMatrix::from_f64("w", rows, cols, v.to_vec()).unwrap()
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn diagonal_svd() {
        let s = svd_topk(&mat(2, 2, &[3.0, 0.0, 0.0, 1.0]), 1).unwrap();
        assert!((s.sigma[0] - 3.0).abs() < 1e-14 && (s.sigma[1] - 1.0).abs() < 1e-14);
        assert!((s.gap - 2.0).abs() < 1e-14);
        assert!((s.u[(0, 0)] - 1.0).abs() < 1e-14 && s.u[(1, 0)].abs() < 1e-14);
    }

    #[test]
    fn orthogonal_matrix_has_unit_spectrum() {
        let c = 0.6;
        let s = 0.8;
        let q = mat(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        for k in 1..3 {
            let sum = svd_topk(&q, k).unwrap();
            assert!(sum.sigma.iter().all(|x| (x - 1.0).abs() < 1e-12));
            assert!(sum.gap.abs() < 1e-12);
        }
    }

    #[test]
    fn k_out_of_range_and_non_finite() {
        let w = mat(2, 3, &[1.0; 6]);
        assert!(matches!(svd_topk(&w, 0), Err(Error::Config(_))));
        assert!(matches!(svd_topk(&w, 2), Err(Error::Config(_))));
        let bad = mat(2, 2, &[1.0, f64::NAN, 0.0, 1.0]);
        assert!(matches!(svd_topk(&bad, 1), Err(Error::Numerics(_))));
    }

    #[test]
    fn full_rank_reconstruction() {
        let a = gaussian(64, 48, 1);
        let (u, s, v) = thin_svd(a.as_ref()).unwrap();
        let us = Mat::from_fn(64, 48, |i, j| u[(i, j)] * s[j]);
        let r = &us * v.transpose() - &a;
        assert!(r.norm_l2() / a.norm_l2() <= 1e-5);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn gram_route_agrees_with_direct() {
        for (m, n, seed) in [(40, 90, 2), (90, 40, 3)] {
            let a = gaussian(m, n, seed);
            let d = svd_topk_source("w", &a.as_ref(), 5, SvdRoute::Direct).unwrap();
            let g = svd_topk_source("w", &a.as_ref(), 5, SvdRoute::Gram).unwrap();
            assert_eq!(g.route, SvdRoute::Gram);
            for (x, y) in d.sigma.iter().zip(&g.sigma) {
                assert!((x - y).abs() < 1e-9 * d.sigma[0]);
            }
            let ang = principal_angles(&d, &g).unwrap();
            assert!(ang.max_left() < 1e-7 && ang.max_right() < 1e-7);
            assert!(g.residual < 1e-10);
            assert!(g.orthonormality_error() < 1e-9);
            // same sign convention on both routes
            for j in 0..5 {
                let dot: f64 = (0..m).map(|i| d.u[(i, j)] * g.u[(i, j)]).sum();
                assert!(dot > 0.99);
            }
        }
    }

    #[test]
    fn gram_route_handles_repeated_singular_values() {
        let (m, n) = (30, 70);
        let (q1, _, _) = thin_svd(gaussian(m, m, 5).as_ref()).unwrap();
        let (q2, _, _) = thin_svd(gaussian(n, m, 6).as_ref()).unwrap();
        let s: Vec<f64> = (0..m)
            .map(|i| [5.0, 5.0, 5.0, 2.0, 2.0][i.min(4)] / (1.0 + (i.saturating_sub(4)) as f64))
            .collect();
        let a = Mat::from_fn(m, n, |i, j| {
            (0..m).map(|l| q1[(i, l)] * s[l] * q2[(j, l)]).sum::<f64>()
        });
        for k in [3, 5] {
            let g = svd_topk_source("w", &a.as_ref(), k, SvdRoute::Gram).unwrap();
            assert_eq!(g.route, SvdRoute::Gram);
            assert!(g.residual < 1e-10 && g.orthonormality_error() < 1e-9);
            let exact = Mat::from_fn(m, k, |i, j| q1[(i, j)]);
            assert!(
                subspace_angles(exact.as_ref(), g.u.as_ref())
                    .unwrap()
                    .last()
                    .unwrap()
                    < &1e-7
            );
        }
    }

    #[test]
    fn angle_examples() {
        let e0 = Mat::from_fn(2, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let diag = Mat::from_fn(2, 1, |_, _| h);
        let e1 = Mat::from_fn(2, 1, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let a = subspace_angles(e0.as_ref(), diag.as_ref()).unwrap();
        assert!((a[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        let b = subspace_angles(e0.as_ref(), e1.as_ref()).unwrap();
        assert!((b[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(
            subspace_angles(e0.as_ref(), e0.as_ref()).unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn angles_ignore_rebasing() {
        let s0 = svd_topk_source("w", &gaussian(30, 20, 4).as_ref(), 6, SvdRoute::Direct).unwrap();
        let s1 = svd_topk_source("w", &gaussian(30, 20, 5).as_ref(), 6, SvdRoute::Direct).unwrap();
        let base = subspace_angles(s0.u.as_ref(), s1.u.as_ref()).unwrap();
        let q = gaussian(6, 6, 6).qr().compute_thin_Q();
        let rotated = &s1.u * &q;
        let again = subspace_angles(s0.u.as_ref(), rotated.as_ref()).unwrap();
        for (x, y) in base.iter().zip(&again) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!(base.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn nss_and_kyfan_examples() {
        assert_eq!(nss(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!((nss(&[3.0, 4.0], &[6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((nss(&[5.0, 0.0], &[5.0, 1.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(nss(&[0.0], &[1.0]), Err(Error::Domain(_))));
        assert!((kyfan_drift(&[5.0, 1.0], &[4.5, 1.0], 1).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            kyfan_drift(&[1.0], &[1.0], 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_perturbation_is_tight() {
        let w0 = gaussian(12, 9, 7);
        let r = verify_bounds_dense("w", w0.as_ref(), Mat::zeros(12, 9).as_ref(), 3).unwrap();
        assert!(r.all_hold(), "{:?}", r.violations().collect::<Vec<_>>());
        for c in &r.checks {
            if !c.name.starts_with("projection_identity") {
                assert!(c.lhs <= 1e-12, "{} = {}", c.name, c.lhs);
            }
        }
    }

    #[test]
    fn two_by_two_wedin_example() {
        let w0 = mat(2, 2, &[5.0, 0.0, 0.0, 1.0]);
        let d = mat(2, 2, &[0.0, 0.1, 0.1, 0.0]);
        let r = verify_perturbation_bounds(&w0, &d, 1).unwrap();
        let wl = r.check("wedin_left").unwrap();
        assert!((wl.rhs - 0.025).abs() < 1e-15);
        // W1 = [[5, .1], [.1, 1]] is symmetric: tan 2θ = 0.2 / 4
        let theta = 0.5 * (0.2f64 / 4.0).atan();
        assert!((wl.lhs - theta.sin()).abs() < 1e-12);
        assert!(r.all_hold());
    }

    #[test]
    fn literal_gap_form_can_fail() {
        // W0 = diag(1, 0), ΔW moves the top singular vector by 45°
        // while ‖ΔW‖₂/γ₁ ≈ 0.5.
        let w0 = Mat::from_fn(2, 2, |i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 });
        let b = 0.01;
        let d = Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) => -0.5,
            (1, 1) => 0.5,
            _ => b,
        });
        let r = verify_bounds_dense("w", w0.as_ref(), d.as_ref(), 1).unwrap();
        assert!(!r.check("wedin_left").unwrap().holds);
        assert!(r.check("wedin_perturbed_gap").unwrap().holds);
        assert!(r.check("weyl").unwrap().holds);
    }

    #[test]
    fn zero_gap_skips_wedin() {
        let w0 = Mat::<f64>::identity(3, 3);
        let r = verify_bounds_dense("w", w0.as_ref(), gaussian(3, 3, 8).as_ref(), 1).unwrap();
        assert!(r.check("wedin_left").is_none());
        assert!(r.skipped.iter().any(|s| s.name == "wedin_left"));
    }

    #[test]
    fn frobenius_matches_faer() {
        let a = gaussian(7, 5, 9);
        assert!((frobenius_norm(&a.as_ref()) - a.norm_l2()).abs() < 1e-12);
    }
}
