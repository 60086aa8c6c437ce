//! Function-preserving edits of attention blocks.
//!
//! Two scrambles change where a layer's value/output computation lives in
//! weight space without changing what the layer computes:
//!
//! - **V/O rotation.** For an orthogonal `R` (D x D), right-multiply every
//!   value head by `R` and every output-projection head by the same `R`. The
//!   context of each query head turns into `Ctx_h R`, and the output
//!   projection undoes it because `R Rᵀ = I`.
//! - **Head permutation.** Relabel the key/value heads and move each group of
//!   query heads (and the matching output columns) along with its KV head.
//!
//! Query/key heads are never rotated: with rotary position embeddings a
//! rotation of Q/K would not commute with the position-dependent rotation.
//!
//! Weights here use the *right-multiplication* convention: every matrix is
//! `d_model x width` and `Q = X W_q`, `out = Ctx W_oᵀ`. Checkpoints usually
//! store q/k/v projections transposed; [`LayerTensors`] detects and undoes
//! that on load.
//!
//! [`toy_attention_forward`] is the reference oracle: a plain causal GQA
//! attention evaluated with deterministic loop orders and an exactly rounded
//! final reduction, so a head permutation reproduces outputs bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use faer::{Mat, MatRef};
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor_io::{
    open_checkpoint, ArchiveWriter, CheckpointHandle, Dtype, TensorSpec, WeightMatrix,
};

/// Attention head geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    /// Head dimension `D`.
    pub head_dim: usize,
    /// Query heads `H_q`.
    pub n_q_heads: usize,
    /// Key/value heads `H_kv`.
    pub n_kv_heads: usize,
}

impl HeadLayout {
    pub fn new(head_dim: usize, n_q_heads: usize, n_kv_heads: usize) -> Result<Self> {
        let layout = HeadLayout {
            head_dim,
            n_q_heads,
            n_kv_heads,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return Err(Error::Config(format!(
                "head layout must be positive, got D={} H_q={} H_kv={}",
                self.head_dim, self.n_q_heads, self.n_kv_heads
            )));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "H_q={} is not a multiple of H_kv={}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn n_rep(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// `H_q * D`.
    pub fn q_width(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    /// `H_kv * D`.
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// KV head serving query head `h`.
    pub fn kv_group(&self, h: usize) -> usize {
        h / self.n_rep()
    }
}

/// One attention block in the right-multiplication convention.
///
/// `w_q`, `w_o` are `d_model x (H_q D)`; `w_k`, `w_v` are `d_model x (H_kv D)`.
/// Biases are row vectors over the head axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Mat<f64>,
    pub w_k: Mat<f64>,
    pub w_v: Mat<f64>,
    pub w_o: Mat<f64>,
    pub b_q: Option<Vec<f64>>,
    pub b_k: Option<Vec<f64>>,
    pub b_v: Option<Vec<f64>>,
}

impl AttentionWeights {
    /// Bias-free block; checks widths against `layout`.
    pub fn new(
        w_q: Mat<f64>,
        w_k: Mat<f64>,
        w_v: Mat<f64>,
        w_o: Mat<f64>,
        layout: &HeadLayout,
    ) -> Result<Self> {
        let w = AttentionWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: None,
            b_k: None,
            b_v: None,
        };
        w.check(layout)?;
        Ok(w)
    }

    pub fn with_biases(
        mut self,
        b_q: Option<Vec<f64>>,
        b_k: Option<Vec<f64>>,
        b_v: Option<Vec<f64>>,
        layout: &HeadLayout,
    ) -> Result<Self> {
        self.b_q = b_q;
        self.b_k = b_k;
        self.b_v = b_v;
        self.check(layout)?;
        Ok(self)
    }

    /// Gaussian block scaled like a typical initialisation; for tests and demos.
    pub fn random(
        layout: &HeadLayout,
        d_model: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = 1.0 / (d_model as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize| {
            let vals: Vec<f64> = (0..rows * cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Mat::from_fn(rows, cols, |i, j| vals[i * cols + j])
        };
        let w_q = gauss(d_model, layout.q_width());
        let w_k = gauss(d_model, layout.kv_width());
        let w_v = gauss(d_model, layout.kv_width());
        let w_o = gauss(d_model, layout.q_width());
        let mut bias = |n: usize| {
            with_bias.then(|| {
                (0..n)
                    .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
        };
        let b_q = bias(layout.q_width());
        let b_k = bias(layout.kv_width());
        let b_v = bias(layout.kv_width());
        AttentionWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q,
            b_k,
            b_v,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    /// Validates widths and the shared model dimension.
    pub fn check(&self, layout: &HeadLayout) -> Result<()> {
        layout.validate()?;
        let d = self.w_q.nrows();
        let expect = [
            ("W_q", &self.w_q, layout.q_width()),
            ("W_k", &self.w_k, layout.kv_width()),
            ("W_v", &self.w_v, layout.kv_width()),
            ("W_o", &self.w_o, layout.q_width()),
        ];
        for (name, m, width) in expect {
            if m.ncols() != width {
                return Err(Error::Shape(format!(
                    "{name} has head-axis width {}, layout needs {width}",
                    m.ncols()
                )));
            }
            if m.nrows() != d {
                return Err(Error::Shape(format!(
                    "{name} has d_model {}, W_q has {d}",
                    m.nrows()
                )));
            }
        }
        let biases = [
            ("b_q", &self.b_q, layout.q_width()),
            ("b_k", &self.b_k, layout.kv_width()),
            ("b_v", &self.b_v, layout.kv_width()),
        ];
        for (name, b, width) in biases {
            if let Some(b) = b {
                if b.len() != width {
                    return Err(Error::Shape(format!(
                        "{name} has length {}, layout needs {width}",
                        b.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        let mats = [&self.w_q, &self.w_k, &self.w_v, &self.w_o];
        let mats_ok = mats
            .iter()
            .all(|m| (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].is_finite())));
        let bias_ok = [&self.b_q, &self.b_k, &self.b_v]
            .iter()
            .all(|b| b.as_ref().is_none_or(|b| b.iter().all(|x| x.is_finite())));
        mats_ok && bias_ok
    }
}

/// Haar-random orthogonal `d x d` matrix for `seed`.
pub fn haar_orthogonal(d: usize, seed: u64) -> Mat<f64> {
    haar_orthogonal_with(d, &mut rng_for(seed, "haar"))
}

/// Haar-random orthogonal matrix: QR of a Gaussian matrix, with the columns
/// of `Q` flipped so that `R` has a positive diagonal.
pub fn haar_orthogonal_with(d: usize, rng: &mut impl Rng) -> Mat<f64> {
    let vals: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let g = Mat::from_fn(d, d, |i, j| vals[i * d + j]);
    let mut q = g.qr().compute_thin_Q();
    for j in 0..d {
        // R_jj = q_jᵀ g_j
        let r_jj: f64 = (0..d).map(|i| q[(i, j)] * g[(i, j)]).sum();
        if r_jj < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Per-head rotations: one `D x D` block per KV head and one per query head.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRotations {
    pub kv: Vec<Mat<f64>>,
    pub q: Vec<Mat<f64>>,
}

impl BlockRotations {
    /// The same `R` on every head.
    pub fn shared(r: MatRef<'_, f64>, layout: &HeadLayout) -> Result<Self> {
        Self::per_kv_head(vec![r.to_owned(); layout.n_kv_heads], layout)
    }

    /// Independent rotations per KV head; each query head inherits the
    /// rotation of the KV head it attends with.
    pub fn per_kv_head(kv: Vec<Mat<f64>>, layout: &HeadLayout) -> Result<Self> {
        layout.validate()?;
        if kv.len() != layout.n_kv_heads {
            return Err(Error::Shape(format!(
                "{} rotations for {} KV heads",
                kv.len(),
                layout.n_kv_heads
            )));
        }
        for r in &kv {
            if r.nrows() != layout.head_dim || r.ncols() != layout.head_dim {
                return Err(Error::Shape(format!(
                    "rotation is {}x{}, head dim is {}",
                    r.nrows(),
                    r.ncols(),
                    layout.head_dim
                )));
            }
        }
        let q = (0..layout.n_q_heads)
            .map(|h| kv[layout.kv_group(h)].clone())
            .collect();
        Ok(BlockRotations { kv, q })
    }

    /// Negative control: distinct per-KV-head rotations with the query side
    /// deliberately assigned to the wrong group (`g -> g + 1 mod H_kv`). With
    /// a single KV head the query side gets an independent draw instead.
    pub fn misgrouped(layout: &HeadLayout, seed: u64) -> Result<Self> {
        layout.validate()?;
        let mut rng = rng_for(seed, "misgrouped");
        let d = layout.head_dim;
        let kv: Vec<Mat<f64>> = (0..layout.n_kv_heads)
            .map(|_| haar_orthogonal_with(d, &mut rng))
            .collect();
        let q = if layout.n_kv_heads == 1 {
            let other = haar_orthogonal_with(d, &mut rng);
            vec![other; layout.n_q_heads]
        } else {
            (0..layout.n_q_heads)
                .map(|h| kv[(layout.kv_group(h) + 1) % layout.n_kv_heads].clone())
                .collect()
        };
        Ok(BlockRotations { kv, q })
    }

    /// Dense block-diagonal `(R_kv, R_q)`.
    pub fn to_dense(&self) -> (Mat<f64>, Mat<f64>) {
        (block_diag(&self.kv), block_diag(&self.q))
    }

    /// Blockwise inverse (transpose of every block).
    pub fn transpose(&self) -> Self {
        let t = |v: &[Mat<f64>]| v.iter().map(|r| r.transpose().to_owned()).collect();
        BlockRotations {
            kv: t(&self.kv),
            q: t(&self.q),
        }
    }
}

fn block_diag(blocks: &[Mat<f64>]) -> Mat<f64> {
    let d = blocks.first().map_or(0, |b| b.nrows());
    let n = d * blocks.len();
    Mat::from_fn(n, n, |i, j| {
        if i / d == j / d {
            blocks[i / d][(i % d, j % d)]
        } else {
            0.0
        }
    })
}

/// `R_kv = diag(R, ..., R)` over `H_kv` heads and `R_q` grouped `n_rep`-fold
/// over `H_q` heads.
pub fn build_block_rotations(
    r: MatRef<'_, f64>,
    layout: &HeadLayout,
) -> Result<(Mat<f64>, Mat<f64>)> {
    Ok(BlockRotations::shared(r, layout)?.to_dense())
}

/// `W_v' = W_v R_kv`, `W_o' = W_o R_q`, `b_v' = b_v R_kv`; Q and K untouched.
pub fn apply_vo_rotation(
    w: &AttentionWeights,
    layout: &HeadLayout,
    r: MatRef<'_, f64>,
) -> Result<AttentionWeights> {
    apply_block_rotations(w, layout, &BlockRotations::shared(r, layout)?)
}

/// V/O rotation with arbitrary per-head blocks.
pub fn apply_block_rotations(
    w: &AttentionWeights,
    layout: &HeadLayout,
    rot: &BlockRotations,
) -> Result<AttentionWeights> {
    w.check(layout)?;
    if rot.kv.len() != layout.n_kv_heads || rot.q.len() != layout.n_q_heads {
        return Err(Error::Shape(
            "rotation blocks do not match the head layout".into(),
        ));
    }
    let d = layout.head_dim;
    if rot
        .kv
        .iter()
        .chain(&rot.q)
        .any(|r| r.nrows() != d || r.ncols() != d)
    {
        return Err(Error::Shape(format!("rotation blocks must be {d}x{d}")));
    }
    let mut out = w.clone();
    out.w_v = rotate_columns(w.w_v.as_ref(), &rot.kv, d);
    out.w_o = rotate_columns(w.w_o.as_ref(), &rot.q, d);
    out.b_v = w.b_v.as_ref().map(|b| rotate_row(b, &rot.kv, d));
    Ok(out)
}

fn rotate_columns(m: MatRef<'_, f64>, blocks: &[Mat<f64>], d: usize) -> Mat<f64> {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for (h, r) in blocks.iter().enumerate() {
        let src = m.subcols(h * d, d);
        let dst = out.as_mut().subcols_mut(h * d, d);
        faer::linalg::matmul::matmul(
            dst,
            faer::Accum::Replace,
            src,
            r.as_ref(),
            1.0,
            faer::Par::Seq,
        );
    }
    out
}

fn rotate_row(b: &[f64], blocks: &[Mat<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; b.len()];
    for (h, r) in blocks.iter().enumerate() {
        for j in 0..d {
            out[h * d + j] = (0..d).map(|i| b[h * d + i] * r[(i, j)]).sum();
        }
    }
    out
}

/// Checks that `perm` is a bijection on `0..n`.
pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Config(format!(
            "permutation has {} entries, expected {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Config(format!(
                "{perm:?} is not a permutation of 0..{n}"
            )));
        }
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Expands a KV-head permutation to query heads: query head `h` of group `g`
/// follows its KV head, keeping its offset inside the group.
pub fn grouped_permutation(perm: &[usize], n_rep: usize) -> Vec<usize> {
    (0..perm.len() * n_rep)
        .map(|h| perm[h / n_rep] * n_rep + h % n_rep)
        .collect()
}

/// Relabels heads: KV head `g` of the result carries what KV head `perm[g]`
/// carried, and its query heads and output columns move with it.
///
/// In matrix form the column blocks of `W_k`, `W_v` are gathered by `P_kv`,
/// those of `W_q` by the grouped `P_q`; the output projection acts as
/// `W_oᵀ`, whose row blocks are reordered by `P_q⁻¹`, i.e. the columns of
/// `W_o` are gathered by `P_q` as well.
pub fn apply_head_permutation(
    w: &AttentionWeights,
    layout: &HeadLayout,
    perm: &[usize],
) -> Result<AttentionWeights> {
    w.check(layout)?;
    validate_permutation(perm, layout.n_kv_heads)?;
    let perm_q = grouped_permutation(perm, layout.n_rep());
    let d = layout.head_dim;
    let gather = |m: &Mat<f64>, p: &[usize]| {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, p[j / d] * d + j % d)])
    };
    let gather_vec =
        |b: &Vec<f64>, p: &[usize]| (0..b.len()).map(|j| b[p[j / d] * d + j % d]).collect();
    Ok(AttentionWeights {
        w_q: gather(&w.w_q, &perm_q),
        w_k: gather(&w.w_k, perm),
        w_v: gather(&w.w_v, perm),
        w_o: gather(&w.w_o, &perm_q),
        b_q: w.b_q.as_ref().map(|b| gather_vec(b, &perm_q)),
        b_k: w.b_k.as_ref().map(|b| gather_vec(b, perm)),
        b_v: w.b_v.as_ref().map(|b| gather_vec(b, perm)),
    })
}

/// Exactly rounded sum (Shewchuk's algorithm with a half-even final
/// correction). The result depends only on the multiset of inputs.
pub fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Row-major copy of a block in working precision `T`.
struct Packed<T> {
    d_model: usize,
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
    bq: Option<Vec<T>>,
    bk: Option<Vec<T>>,
    bv: Option<Vec<T>>,
}

impl<T: Float> Packed<T> {
    fn new(w: &AttentionWeights) -> Self {
        let cast = |x: f64| T::from(x).expect("finite f64 casts");
        let pack = |m: &Mat<f64>| {
            let mut v = Vec::with_capacity(m.nrows() * m.ncols());
            for i in 0..m.nrows() {
                v.extend((0..m.ncols()).map(|j| cast(m[(i, j)])));
            }
            v
        };
        let pack_b =
            |b: &Option<Vec<f64>>| b.as_ref().map(|b| b.iter().map(|&x| cast(x)).collect());
        Packed {
            d_model: w.d_model(),
            wq: pack(&w.w_q),
            wk: pack(&w.w_k),
            wv: pack(&w.w_v),
            wo: pack(&w.w_o),
            bq: pack_b(&w.b_q),
            bk: pack_b(&w.b_k),
            bv: pack_b(&w.b_v),
        }
    }
}

/// `X W + b` with a fixed accumulation order per output element.
fn project<T: Float>(
    x: &[T],
    t_len: usize,
    d_model: usize,
    w: &[T],
    width: usize,
    b: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); t_len * width];
    for t in 0..t_len {
        for c in 0..width {
            let mut acc = T::zero();
            for i in 0..d_model {
                acc = acc + x[t * d_model + i] * w[i * width + c];
            }
            if let Some(b) = b {
                acc = acc + b[c];
            }
            out[t * width + c] = acc;
        }
    }
    out
}

fn forward_packed<T: Float>(p: &Packed<T>, layout: &HeadLayout, x: &[T], t_len: usize) -> Vec<T> {
    let (d, dm) = (layout.head_dim, p.d_model);
    let (qw, kw) = (layout.q_width(), layout.kv_width());
    let q = project(x, t_len, dm, &p.wq, qw, p.bq.as_deref());
    let k = project(x, t_len, dm, &p.wk, kw, p.bk.as_deref());
    let v = project(x, t_len, dm, &p.wv, kw, p.bv.as_deref());
    let scale = T::from(1.0 / (d as f64).sqrt()).unwrap();
    let mut ctx = vec![T::zero(); t_len * qw];
    let mut scores = vec![T::zero(); t_len];
    for h in 0..layout.n_q_heads {
        let g = layout.kv_group(h);
        for t in 0..t_len {
            // causal: positions 0..=t
            let mut max = T::neg_infinity();
            for j in 0..=t {
                let mut s = T::zero();
                for e in 0..d {
                    s = s + q[t * qw + h * d + e] * k[j * kw + g * d + e];
                }
                scores[j] = s * scale;
                max = max.max(scores[j]);
            }
            let mut denom = T::zero();
            for s in scores.iter_mut().take(t + 1) {
                *s = (*s - max).exp();
                denom = denom + *s;
            }
            for e in 0..d {
                let mut acc = T::zero();
                for j in 0..=t {
                    acc = acc + scores[j] * v[j * kw + g * d + e];
                }
                ctx[t * qw + h * d + e] = acc / denom;
            }
        }
    }
    // out = Ctx W_oᵀ, reduced exactly so head order cannot matter
    let mut out = vec![T::zero(); t_len * dm];
    for t in 0..t_len {
        for i in 0..dm {
            let terms = (0..qw).map(|c| (ctx[t * qw + c] * p.wo[i * qw + c]).to_f64().unwrap());
            out[t * dm + i] = T::from(exact_sum(terms)).unwrap();
        }
    }
    out
}

fn check_forward_inputs(
    w: &AttentionWeights,
    layout: &HeadLayout,
    x: MatRef<'_, f64>,
) -> Result<()> {
    w.check(layout)?;
    if x.ncols() != w.d_model() {
        return Err(Error::Shape(format!(
            "inputs have width {}, model dimension is {}",
            x.ncols(),
            w.d_model()
        )));
    }
    let x_ok = (0..x.nrows()).all(|i| (0..x.ncols()).all(|j| x[(i, j)].is_finite()));
    if !x_ok || !w.is_finite() {
        return Err(Error::Numerics(
            "non-finite value in attention inputs or weights".into(),
        ));
    }
    Ok(())
}

fn run_forward<T: Float>(
    w: &AttentionWeights,
    layout: &HeadLayout,
    x: MatRef<'_, f64>,
) -> Result<Vec<T>> {
    check_forward_inputs(w, layout, x)?;
    let p = Packed::<T>::new(w);
    let mut xs = Vec::with_capacity(x.nrows() * x.ncols());
    for i in 0..x.nrows() {
        xs.extend((0..x.ncols()).map(|j| T::from(x[(i, j)]).unwrap()));
    }
    let out = forward_packed(&p, layout, &xs, x.nrows());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("attention output overflowed".into()));
    }
    Ok(out)
}

/// Causal GQA attention `out = Attn(X W_q, X W_k, X W_v) W_oᵀ` in f64.
/// `x` is `T x d_model`; the result has the same shape.
pub fn toy_attention_forward(
    w: &AttentionWeights,
    layout: &HeadLayout,
    x: MatRef<'_, f64>,
) -> Result<Mat<f64>> {
    let out = run_forward::<f64>(w, layout, x)?;
    let dm = w.d_model();
    Ok(Mat::from_fn(x.nrows(), dm, |i, j| out[i * dm + j]))
}

/// The same oracle with weights, inputs and arithmetic in f32.
pub fn toy_attention_forward_f32(
    w: &AttentionWeights,
    layout: &HeadLayout,
    x: MatRef<'_, f64>,
) -> Result<Mat<f32>> {
    let out = run_forward::<f32>(w, layout, x)?;
    let dm = w.d_model();
    Ok(Mat::from_fn(x.nrows(), dm, |i, j| out[i * dm + j]))
}

/// Arithmetic used by the invariance oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

/// Settings for [`verify_invariance_with`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceOptions {
    pub trials: usize,
    pub tol: f64,
    pub precision: Precision,
    pub seed: u64,
    /// Each trial draws a sequence length in `1..=max_seq_len`.
    pub max_seq_len: usize,
}

impl InvarianceOptions {
    pub fn new(trials: usize, tol: f64) -> Self {
        InvarianceOptions {
            trials,
            tol,
            precision: Precision::F64,
            seed: 0,
            max_seq_len: 6,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_seq_len(mut self, max_seq_len: usize) -> Self {
        self.max_seq_len = max_seq_len;
        self
    }
}

/// Relative Frobenius change `‖W' - W‖_F / ‖W‖_F` per projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDeviation {
    pub q: f64,
    pub k: f64,
    pub v: f64,
    pub o: f64,
    pub b_v: Option<f64>,
}

impl WeightDeviation {
    pub fn between(a: &AttentionWeights, b: &AttentionWeights) -> Self {
        let rel = |x: &Mat<f64>, y: &Mat<f64>| relative_change(x.as_ref(), y.as_ref());
        WeightDeviation {
            q: rel(&a.w_q, &b.w_q),
            k: rel(&a.w_k, &b.w_k),
            v: rel(&a.w_v, &b.w_v),
            o: rel(&a.w_o, &b.w_o),
            b_v: match (&a.b_v, &b.b_v) {
                (Some(x), Some(y)) => {
                    let n = x.len();
                    Some(relative_change(
                        MatRef::from_row_major_slice(x, 1, n),
                        MatRef::from_row_major_slice(y, 1, n),
                    ))
                }
                _ => None,
            },
        }
    }

    pub fn max(&self) -> f64 {
        [self.q, self.k, self.v, self.o, self.b_v.unwrap_or(0.0)]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn relative_change(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let diff = (a - b).norm_l2();
    let base = a.norm_l2();
    if base == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / base
    }
}

/// Outcome of an invariance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub trials: usize,
    pub precision: Precision,
    pub tol: f64,
    /// Largest elementwise output difference over all trials.
    pub max_deviation: f64,
    pub passed: bool,
    pub weight_deviation: WeightDeviation,
    /// The edit did not change any weight, so the check proves nothing.
    pub trivial_edit: bool,
}

/// Runs both blocks on `trials` random input sequences in f64 and compares.
pub fn verify_invariance(
    original: &AttentionWeights,
    edited: &AttentionWeights,
    layout: &HeadLayout,
    trials: usize,
    tol: f64,
) -> Result<InvarianceReport> {
    verify_invariance_with(
        original,
        edited,
        layout,
        &InvarianceOptions::new(trials, tol),
    )
}

pub fn verify_invariance_with(
    original: &AttentionWeights,
    edited: &AttentionWeights,
    layout: &HeadLayout,
    opts: &InvarianceOptions,
) -> Result<InvarianceReport> {
    if opts.trials == 0 || opts.max_seq_len == 0 {
        return Err(Error::Config(
            "invariance check needs at least one trial and one position".into(),
        ));
    }
    original.check(layout)?;
    edited.check(layout)?;
    if original.d_model() != edited.d_model() {
        return Err(Error::Shape(
            "original and edited blocks differ in d_model".into(),
        ));
    }
    let dm = original.d_model();
    let mut rng = rng_for(opts.seed, "invariance");
    let mut max_dev = 0.0f64;
    for _ in 0..opts.trials {
        let t_len = rng.random_range(1..=opts.max_seq_len);
        let vals: Vec<f64> = (0..t_len * dm)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let x = MatRef::from_row_major_slice(&vals, t_len, dm);
        let dev = match opts.precision {
            Precision::F64 => {
                let a = toy_attention_forward(original, layout, x)?;
                let b = toy_attention_forward(edited, layout, x)?;
                max_abs_diff(a.as_ref(), b.as_ref(), |v| v)
            }
            Precision::F32 => {
                let a = toy_attention_forward_f32(original, layout, x)?;
                let b = toy_attention_forward_f32(edited, layout, x)?;
                max_abs_diff(a.as_ref(), b.as_ref(), |v| v as f64)
            }
        };
        max_dev = max_dev.max(dev);
    }
    let weight_deviation = WeightDeviation::between(original, edited);
    let trivial_edit = original == edited;
    Ok(InvarianceReport {
        trials: opts.trials,
        precision: opts.precision,
        tol: opts.tol,
        max_deviation: max_dev,
        passed: max_dev <= opts.tol,
        weight_deviation,
        trivial_edit,
    })
}

fn max_abs_diff<T: Copy>(a: MatRef<'_, T>, b: MatRef<'_, T>, f: impl Fn(T) -> f64) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((f(a[(i, j)]) - f(b[(i, j)])).abs());
        }
    }
    m
}

/// Storage orientation of a projection in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `d_model x (H D)`: already in the right-multiplication convention.
    HeadsOnColumns,
    /// `(H D) x d_model`: the usual `out_features x in_features` layout.
    HeadsOnRows,
}

/// Which edit to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    Rotate,
    Permute,
    RotatePermute,
}

impl EditKind {
    pub fn rotates(self) -> bool {
        matches!(self, EditKind::Rotate | EditKind::RotatePermute)
    }

    pub fn permutes(self) -> bool {
        matches!(self, EditKind::Permute | EditKind::RotatePermute)
    }
}

impl std::str::FromStr for EditKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotate" => Ok(EditKind::Rotate),
            "permute" => Ok(EditKind::Permute),
            "rotate-permute" | "rotate+permute" => Ok(EditKind::RotatePermute),
            other => Err(Error::Config(format!(
                "unknown edit `{other}` (expected rotate, permute or rotate-permute)"
            ))),
        }
    }
}

/// Default tensor naming: `{layer}` and `{proj}` are substituted.
pub const DEFAULT_NAME_TEMPLATE: &str = "model.layers.{layer}.self_attn.{proj}";

const PROJS: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];

/// What to edit in a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layers: Vec<usize>,
    pub kind: EditKind,
    pub layout: HeadLayout,
    pub seed: u64,
    #[serde(default = "default_template")]
    pub name_template: String,
    /// Random-input trials of the function-preservation self-check.
    #[serde(default = "default_check_trials")]
    pub check_trials: usize,
}

fn default_template() -> String {
    DEFAULT_NAME_TEMPLATE.to_string()
}

fn default_check_trials() -> usize {
    2
}

impl InterventionSpec {
    pub fn new(layers: Vec<usize>, kind: EditKind, layout: HeadLayout, seed: u64) -> Self {
        InterventionSpec {
            layers,
            kind,
            layout,
            seed,
            name_template: default_template(),
            check_trials: default_check_trials(),
        }
    }

    fn base_name(&self, layer: usize, proj: &str) -> String {
        self.name_template
            .replace("{layer}", &layer.to_string())
            .replace("{proj}", proj)
    }

    /// Rotation block for `layer`.
    pub fn rotation(&self, layer: usize) -> Mat<f64> {
        haar_orthogonal(
            self.layout.head_dim,
            derive_seed(self.seed, &format!("rotate/{layer}")),
        )
    }

    /// KV-head permutation for `layer`; never the identity when `H_kv >= 2`.
    pub fn permutation(&self, layer: usize) -> Vec<usize> {
        let n = self.layout.n_kv_heads;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_for(self.seed, &format!("permute/{layer}")));
        if n >= 2 && perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.swap(0, 1);
        }
        perm
    }
}

/// The attention tensors of one layer as stored in a checkpoint.
#[derive(Debug, Clone)]
pub struct LayerTensors {
    /// `q, k, v, o` weights as stored.
    pub stored: [WeightMatrix; 4],
    pub orientation: [Orientation; 4],
    /// Stored `q, k, v` biases, if present.
    pub biases: [Option<WeightMatrix>; 3],
    pub weights: AttentionWeights,
}

fn detect_orientation(m: &WeightMatrix, width: usize, role: usize) -> Result<Orientation> {
    let (r, c) = m.shape();
    match (c == width, r == width) {
        (true, false) => Ok(Orientation::HeadsOnColumns),
        (false, true) => Ok(Orientation::HeadsOnRows),
        // square: fall back to the conventional storage of each projection
        (true, true) if role < 3 => Ok(Orientation::HeadsOnRows),
        (true, true) => Ok(Orientation::HeadsOnColumns),
        (false, false) => Err(Error::Shape(format!(
            "`{}` is {r}x{c}; neither axis matches head width {width}",
            m.name
        ))),
    }
}

fn to_convention(m: &WeightMatrix, o: Orientation) -> Mat<f64> {
    match o {
        Orientation::HeadsOnColumns => m.to_mat(),
        Orientation::HeadsOnRows => Mat::from_fn(m.cols(), m.rows(), |i, j| m.get(j, i)),
    }
}

fn from_convention(m: &Mat<f64>, o: Orientation) -> Vec<f64> {
    let (r, c) = match o {
        Orientation::HeadsOnColumns => (m.nrows(), m.ncols()),
        Orientation::HeadsOnRows => (m.ncols(), m.nrows()),
    };
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(match o {
                Orientation::HeadsOnColumns => m[(i, j)],
                Orientation::HeadsOnRows => m[(j, i)],
            });
        }
    }
    v
}

impl LayerTensors {
    /// Loads the attention block of `layer`.
    pub fn load(h: &CheckpointHandle, spec: &InterventionSpec, layer: usize) -> Result<Self> {
        let layout = &spec.layout;
        let widths = [
            layout.q_width(),
            layout.kv_width(),
            layout.kv_width(),
            layout.q_width(),
        ];
        let mut stored = Vec::with_capacity(4);
        let mut orientation = [Orientation::HeadsOnColumns; 4];
        let mut mats = Vec::with_capacity(4);
        for (role, proj) in PROJS.iter().enumerate() {
            let m = h.load_matrix(&format!("{}.weight", spec.base_name(layer, proj)))?;
            orientation[role] = detect_orientation(&m, widths[role], role)?;
            mats.push(to_convention(&m, orientation[role]));
            stored.push(m);
        }
        let mut biases: [Option<WeightMatrix>; 3] = Default::default();
        for (role, proj) in PROJS[..3].iter().enumerate() {
            let name = format!("{}.bias", spec.base_name(layer, proj));
            if h.info(&name).is_some() {
                biases[role] = Some(h.load_vector(&name)?);
            }
        }
        let mut mats = mats.into_iter();
        let weights = AttentionWeights::new(
            mats.next().unwrap(),
            mats.next().unwrap(),
            mats.next().unwrap(),
            mats.next().unwrap(),
            layout,
        )?
        .with_biases(
            biases[0].as_ref().map(|b| b.to_f64_vec()),
            biases[1].as_ref().map(|b| b.to_f64_vec()),
            biases[2].as_ref().map(|b| b.to_f64_vec()),
            layout,
        )?;
        let stored: [WeightMatrix; 4] = stored.try_into().expect("four projections");
        Ok(LayerTensors {
            stored,
            orientation,
            biases,
            weights,
        })
    }

    /// Re-encodes `edited` in the stored orientation and dtype.
    pub fn encode(&self, edited: &AttentionWeights) -> Result<Vec<WeightMatrix>> {
        let mats = [&edited.w_q, &edited.w_k, &edited.w_v, &edited.w_o];
        let mut out = Vec::with_capacity(7);
        for ((m, stored), o) in mats.iter().zip(&self.stored).zip(self.orientation) {
            out.push(stored.with_values(&from_convention(m, o))?);
        }
        let new_biases = [&edited.b_q, &edited.b_k, &edited.b_v];
        for (stored, new) in self.biases.iter().zip(new_biases) {
            if let (Some(stored), Some(new)) = (stored, new) {
                out.push(stored.with_values(new)?);
            }
        }
        Ok(out)
    }
}

/// Edits one loaded layer according to `spec`.
pub fn edit_layer(
    w: &AttentionWeights,
    spec: &InterventionSpec,
    layer: usize,
) -> Result<AttentionWeights> {
    let mut out = w.clone();
    if spec.kind.rotates() {
        out = apply_vo_rotation(&out, &spec.layout, spec.rotation(layer).as_ref())?;
    }
    if spec.kind.permutes() {
        out = apply_head_permutation(&out, &spec.layout, &spec.permutation(layer))?;
    }
    Ok(out)
}

/// Provenance of one edited layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEdit {
    pub layer: usize,
    pub tensors: Vec<String>,
    /// Stored orientation of q, k, v, o.
    pub orientation: [Orientation; 4],
    pub rotation_seed: Option<u64>,
    pub permutation: Option<Vec<usize>>,
    /// Oracle check of the exact (f64) edit.
    pub exact_check: InvarianceReport,
    /// Largest output deviation after rounding the edit to the stored dtype.
    pub stored_max_deviation: f64,
}

/// Provenance record written next to an edited checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub format: String,
    pub tool_version: String,
    pub source: String,
    pub output: String,
    pub seed: u64,
    pub kind: EditKind,
    pub layout: HeadLayout,
    pub name_template: String,
    /// Weights use `Q = X W_q`, `out = Ctx W_oᵀ`; rows-oriented tensors are
    /// transposed before editing. Query/key projections are never rotated.
    pub convention: String,
    pub layers: Vec<LayerEdit>,
}

pub const PROVENANCE_FORMAT: &str = "weightscope-intervention/1";

/// Writes an edited copy of `src` to `dst`. Untouched tensors are copied
/// byte for byte; one layer's attention block is held in memory at a time.
pub fn intervene_checkpoint(
    src: impl AsRef<Path>,
    dst: impl AsRef<Path>,
    spec: &InterventionSpec,
) -> Result<Provenance> {
    let (src, dst) = (src.as_ref(), dst.as_ref());
    spec.layout.validate()?;
    if spec.layers.is_empty() {
        return Err(Error::Config("no layers selected for intervention".into()));
    }
    if src == dst {
        return Err(Error::Config(
            "refusing to overwrite the source checkpoint".into(),
        ));
    }
    let h = open_checkpoint(src)?;

    // tensor name -> layer, for every tensor an edit may rewrite
    let mut owner: HashMap<String, usize> = HashMap::new();
    for &layer in &spec.layers {
        for proj in PROJS {
            let base = spec.base_name(layer, proj);
            let weight = format!("{base}.weight");
            if h.info(&weight).is_none() {
                return Err(Error::NotFound(weight));
            }
            owner.insert(weight, layer);
            owner.insert(format!("{base}.bias"), layer);
        }
    }

    // rewritten tensors may change storage dtype (f16 is widened to f32)
    let mut specs = Vec::with_capacity(h.len());
    for (name, info) in h.entries() {
        let dtype = if owner.contains_key(name) && info.dtype == Dtype::F16 {
            Dtype::F32
        } else {
            info.dtype
        };
        specs.push(TensorSpec {
            name: name.to_string(),
            dtype,
            shape: info.shape.clone(),
        });
    }
    let mut meta: BTreeMap<String, String> = h.metadata().clone();
    meta.insert(
        "weightscope.intervention".into(),
        format!("{:?} seed={}", spec.kind, spec.seed),
    );
    let mut writer = ArchiveWriter::create(dst, specs, &meta)?;

    let mut pending: HashMap<String, WeightMatrix> = HashMap::new();
    let mut done: Vec<LayerEdit> = Vec::new();
    let names: Vec<String> = h.names().to_vec();
    for name in &names {
        match owner.get(name) {
            Some(&layer) => {
                if !done.iter().any(|e| e.layer == layer) {
                    let (edit, tensors) = edit_checkpoint_layer(&h, spec, layer)?;
                    pending.extend(tensors.into_iter().map(|t| (t.name.clone(), t)));
                    done.push(edit);
                }
                let t = pending.remove(name).ok_or_else(|| {
                    Error::Integrity(format!("`{name}` was not produced by the edit"))
                })?;
                writer.write_tensor(name, &t.to_le_bytes())?;
            }
            None => writer.write_tensor(name, &h.read_raw(name)?)?,
        }
    }
    writer.finish()?;
    done.sort_by_key(|e| e.layer);
    Ok(Provenance {
        format: PROVENANCE_FORMAT.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        source: src.display().to_string(),
        output: dst.display().to_string(),
        seed: spec.seed,
        kind: spec.kind,
        layout: spec.layout,
        name_template: spec.name_template.clone(),
        convention: "right-multiplication (Q = X W_q, out = Ctx W_o^T); rows-oriented tensors transposed; Q/K never rotated".into(),
        layers: done,
    })
}

fn edit_checkpoint_layer(
    h: &CheckpointHandle,
    spec: &InterventionSpec,
    layer: usize,
) -> Result<(LayerEdit, Vec<WeightMatrix>)> {
    let tensors = LayerTensors::load(h, spec, layer)?;
    let edited = edit_layer(&tensors.weights, spec, layer)?;
    let encoded = tensors.encode(&edited)?;
    let opts = InvarianceOptions::new(spec.check_trials.max(1), 1e-8)
        .with_seed(derive_seed(spec.seed, &format!("check/{layer}")))
        .with_max_seq_len(4);
    let exact_check = verify_invariance_with(&tensors.weights, &edited, &spec.layout, &opts)?;

    // what actually lands on disk, after rounding to the stored dtype
    let mut stored_w = AttentionWeights {
        w_q: to_convention(&encoded[0], tensors.orientation[0]),
        w_k: to_convention(&encoded[1], tensors.orientation[1]),
        w_v: to_convention(&encoded[2], tensors.orientation[2]),
        w_o: to_convention(&encoded[3], tensors.orientation[3]),
        b_q: None,
        b_k: None,
        b_v: None,
    };
    let mut extra = encoded[4..].iter();
    let mut next_bias = |present: bool| {
        present
            .then(|| extra.next().map(|b| b.to_f64_vec()))
            .flatten()
    };
    stored_w.b_q = next_bias(tensors.biases[0].is_some());
    stored_w.b_k = next_bias(tensors.biases[1].is_some());
    stored_w.b_v = next_bias(tensors.biases[2].is_some());
    let stored_check = verify_invariance_with(&tensors.weights, &stored_w, &spec.layout, &opts)?;

    if !exact_check.passed {
        log::warn!(
            "layer {layer}: edit changed outputs by {:.3e}; check the head layout",
            exact_check.max_deviation
        );
    }
    let edit = LayerEdit {
        layer,
        tensors: encoded.iter().map(|t| t.name.clone()).collect(),
        orientation: tensors.orientation,
        rotation_seed: spec
            .kind
            .rotates()
            .then(|| derive_seed(derive_seed(spec.seed, &format!("rotate/{layer}")), "haar")),
        permutation: spec.kind.permutes().then(|| spec.permutation(layer)),
        exact_check,
        stored_max_deviation: stored_check.max_deviation,
    };
    Ok((edit, encoded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn block(layout: &HeadLayout, d_model: usize, seed: u64, bias: bool) -> AttentionWeights {
        AttentionWeights::random(layout, d_model, bias, &mut rng_for(seed, "block"))
    }

    fn inputs(t: usize, d_model: usize, seed: u64) -> Mat<f64> {
        let mut rng = rng_for(seed, "x");
        let vals: Vec<f64> = (0..t * d_model)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Mat::from_fn(t, d_model, |i, j| vals[i * d_model + j])
    }

    fn max_orth_err(r: &Mat<f64>) -> f64 {
        let n = r.nrows();
        let rtr = r.transpose() * r;
        let mut m = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let e = if i == j { 1.0 } else { 0.0 };
                m = m.max((rtr[(i, j)] - e).abs());
            }
        }
        m
    }

    #[test]
    fn layout_validation() {
        assert!(HeadLayout::new(4, 6, 4).is_err());
        assert!(HeadLayout::new(0, 2, 1).is_err());
        let l = HeadLayout::new(4, 8, 2).unwrap();
        assert_eq!(
            (l.n_rep(), l.q_width(), l.kv_width(), l.kv_group(5)),
            (4, 32, 8, 1)
        );
    }

    #[test]
    fn haar_is_orthogonal() {
        for d in [1, 2, 4, 8, 33] {
            let r = haar_orthogonal(d, d as u64);
            assert!(max_orth_err(&r) < 1e-10);
            let det = r.as_ref().determinant();
            assert!((det.abs() - 1.0).abs() < 1e-8);
        }
        let r = haar_orthogonal(1, 3);
        assert_eq!(r[(0, 0)].abs(), 1.0);
    }

    #[test]
    fn block_rotation_structure() {
        let layout = HeadLayout::new(3, 2, 1).unwrap();
        let r = haar_orthogonal(3, 1);
        let (rkv, rq) = build_block_rotations(r.as_ref(), &layout).unwrap();
        assert_eq!(rkv, r);
        assert_eq!(rq.nrows(), 6);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i / 3 == j / 3 {
                    r[(i % 3, j % 3)]
                } else {
                    0.0
                };
                assert_eq!(rq[(i, j)], want);
            }
        }
        assert!(max_orth_err(&rq) < 1e-10);
        let id = Mat::<f64>::identity(3, 3);
        let (a, b) =
            build_block_rotations(id.as_ref(), &HeadLayout::new(3, 4, 2).unwrap()).unwrap();
        assert_eq!(a, Mat::<f64>::identity(6, 6));
        assert_eq!(b, Mat::<f64>::identity(12, 12));
    }

    #[test]
    fn rotation_touches_only_v_and_o() {
        let layout = HeadLayout::new(4, 4, 2).unwrap();
        let w = block(&layout, 12, 1, true);
        let r = haar_orthogonal(4, 9);
        let e = apply_vo_rotation(&w, &layout, r.as_ref()).unwrap();
        assert_eq!(
            (&e.w_q, &e.w_k, &e.b_q, &e.b_k),
            (&w.w_q, &w.w_k, &w.b_q, &w.b_k)
        );
        assert_ne!(e.w_v, w.w_v);
        let back = apply_vo_rotation(&e, &layout, r.transpose()).unwrap();
        assert!(WeightDeviation::between(&w, &back).max() < 1e-12);
        let same = apply_vo_rotation(&w, &layout, Mat::<f64>::identity(4, 4).as_ref()).unwrap();
        assert_eq!(same, w);
    }

    #[test]
    fn rotation_matches_dense_form() {
        let layout = HeadLayout::new(2, 4, 2).unwrap();
        let w = block(&layout, 5, 2, true);
        let r = haar_orthogonal(2, 4);
        let (rkv, rq) = build_block_rotations(r.as_ref(), &layout).unwrap();
        let e = apply_vo_rotation(&w, &layout, r.as_ref()).unwrap();
        let v = &w.w_v * &rkv;
        let o = &w.w_o * &rq;
        assert!(relative_change(v.as_ref(), e.w_v.as_ref()) < 1e-14);
        assert!(relative_change(o.as_ref(), e.w_o.as_ref()) < 1e-14);
    }

    #[test]
    fn rotation_width_mismatch_is_shape_error() {
        let layout = HeadLayout::new(4, 4, 2).unwrap();
        let w = block(&layout, 8, 3, false);
        let other = HeadLayout::new(4, 4, 1).unwrap();
        let r = haar_orthogonal(4, 1);
        assert!(matches!(
            apply_vo_rotation(&w, &other, r.as_ref()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn permutation_validation_and_inverse() {
        let layout = HeadLayout::new(2, 6, 3).unwrap();
        let w = block(&layout, 7, 4, true);
        assert!(matches!(
            apply_head_permutation(&w, &layout, &[0, 0, 1]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            apply_head_permutation(&w, &layout, &[0, 1]),
            Err(Error::Config(_))
        ));
        assert_eq!(apply_head_permutation(&w, &layout, &[0, 1, 2]).unwrap(), w);
        let p = [2, 0, 1];
        let e = apply_head_permutation(&w, &layout, &p).unwrap();
        let back = apply_head_permutation(&e, &layout, &invert_permutation(&p)).unwrap();
        assert_eq!(back, w);
        assert_eq!(grouped_permutation(&[1, 0], 2), vec![2, 3, 0, 1]);
    }

    #[test]
    fn swap_is_bit_exact() {
        let layout = HeadLayout::new(4, 4, 2).unwrap();
        let w = block(&layout, 16, 5, true);
        let e = apply_head_permutation(&w, &layout, &[1, 0]).unwrap();
        let x = inputs(7, 16, 1);
        let a = toy_attention_forward(&w, &layout, x.as_ref()).unwrap();
        let b = toy_attention_forward(&e, &layout, x.as_ref()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_token_routes_values_through_output() {
        let layout = HeadLayout::new(2, 2, 1).unwrap();
        let w = block(&layout, 3, 6, true);
        let x = inputs(1, 3, 2);
        let out = toy_attention_forward(&w, &layout, x.as_ref()).unwrap();
        let mut v = &x * &w.w_v;
        for j in 0..2 {
            v[(0, j)] += w.b_v.as_ref().unwrap()[j];
        }
        // both query heads share the single KV head
        let ctx = Mat::from_fn(1, 4, |_, j| v[(0, j % 2)]);
        let want = &ctx * w.w_o.transpose();
        for j in 0..3 {
            assert!((out[(0, j)] - want[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_numerics_error() {
        let layout = HeadLayout::new(2, 2, 1).unwrap();
        let w = block(&layout, 3, 6, false);
        let mut x = inputs(2, 3, 2);
        x[(1, 1)] = f64::NAN;
        assert!(matches!(
            toy_attention_forward(&w, &layout, x.as_ref()),
            Err(Error::Numerics(_))
        ));
    }

    #[test]
    fn trivial_edit_flagged() {
        let layout = HeadLayout::new(2, 2, 1).unwrap();
        let w = block(&layout, 4, 7, false);
        let r = verify_invariance(&w, &w, &layout, 3, 1e-12).unwrap();
        assert!(r.passed && r.trivial_edit);
        assert_eq!(r.max_deviation, 0.0);
    }

    #[test]
    fn misgrouped_rotation_breaks_function() {
        for (hq, hkv) in [(4, 2), (2, 1), (4, 4)] {
            let layout = HeadLayout::new(4, hq, hkv).unwrap();
            let w = block(&layout, 12, 8, true);
            let bad = apply_block_rotations(
                &w,
                &layout,
                &BlockRotations::misgrouped(&layout, 3).unwrap(),
            )
            .unwrap();
            let r = verify_invariance(&w, &bad, &layout, 5, 1e-10).unwrap();
            assert!(r.max_deviation > 1e-3, "{hq}/{hkv}: {}", r.max_deviation);
            assert!(!r.passed);
        }
    }

    #[test]
    fn exact_sum_is_order_free() {
        let xs = [1e16, 1.0, -1e16, 3.0, 1e-3];
        let a = exact_sum(xs);
        let mut ys = xs;
        ys.reverse();
        assert_eq!(a, exact_sum(ys));
        assert_eq!(a, 4.001);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum([]), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn edits_preserve_function(
            d in prop::sample::select(vec![1usize, 2, 4]),
            hkv in 1usize..4,
            rep in 1usize..4,
            seed in any::<u64>(),
        ) {
            let layout = HeadLayout::new(d, hkv * rep, hkv).unwrap();
            let w = block(&layout, 6, seed, true);
            let spec = InterventionSpec::new(vec![0], EditKind::RotatePermute, layout, seed);
            let rot = apply_vo_rotation(&w, &layout, spec.rotation(0).as_ref()).unwrap();
            let both = apply_head_permutation(&rot, &layout, &spec.permutation(0)).unwrap();
            let perm_only = apply_head_permutation(&w, &layout, &spec.permutation(0)).unwrap();
            for e in [&rot, &both] {
                let r = verify_invariance_with(&w, e, &layout, &InvarianceOptions::new(2, 1e-10).with_seed(seed)).unwrap();
                prop_assert!(r.passed, "deviation {}", r.max_deviation);
            }
            let r = verify_invariance_with(&w, &perm_only, &layout, &InvarianceOptions::new(2, 0.0).with_seed(seed)).unwrap();
            prop_assert!(r.passed);
            prop_assert_eq!(r.trivial_edit, hkv == 1);
        }
    }
}
