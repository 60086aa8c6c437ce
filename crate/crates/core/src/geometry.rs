//! Selection masks built from a base layer's geometry, and their export.
//!
//! Every top-α selection takes exactly `⌈α·m·n⌉` coordinates. Ties at the
//! cut-off are broken by row-major position (smaller `(i, j)` first), so the
//! masks are bit-identical across platforms.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::seed::rng_for;
use crate::spectral::{svd_topk, SpectralSummary};
use crate::tensor_io::WeightMatrix;

/// `⌈α·len⌉`, treating values within 1e-9 of an integer as that integer so
/// that e.g. `0.29 * 100` selects 29 entries, not 30.
pub fn selection_count(alpha: f64, len: usize) -> Result<usize> {
    check_alpha(alpha)?;
    let x = alpha * len as f64;
    let nearest = x.round();
    let c = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    Ok((c as usize).min(len))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// Indices of the `count` smallest keys, ties to the smaller index.
///
/// `visit` feeds every key to its callback in row-major order; it is called
/// once per pass, so keys can be regenerated instead of stored. Four 16-bit
/// radix passes locate the exact cut-off key without sorting.
fn select_smallest(
    name: &str,
    rows: usize,
    cols: usize,
    count: usize,
    visit: impl Fn(&mut dyn FnMut(u64)),
) -> Mask {
    let len = rows * cols;
    if count == 0 {
        return Mask::empty(name, rows, cols);
    }
    if count >= len {
        return Mask::full(name, rows, cols);
    }
    // find the count-th smallest key (1-based): `prefix` holds its high bits
    let mut prefix = 0u64;
    let mut need = count;
    let mut hist = vec![0usize; 1 << 16];
    for pass in 0..4 {
        let shift = 48 - 16 * pass;
        let high_mask = if pass == 0 {
            0
        } else {
            u64::MAX << (shift + 16)
        };
        hist.fill(0);
        visit(&mut |key| {
            if key & high_mask == prefix {
                hist[((key >> shift) & 0xFFFF) as usize] += 1;
            }
        });
        let mut digit = 0usize;
        while hist[digit] < need {
            need -= hist[digit];
            digit += 1;
        }
        prefix |= (digit as u64) << shift;
    }
    // `need` keys equal to the cut-off are taken, in index order
    let mut mask = Mask::empty(name, rows, cols);
    let mut k = 0;
    visit(&mut |key| {
        if key < prefix || (key == prefix && need > 0) {
            if key == prefix {
                need -= 1;
            }
            mask.set_flat(k, true);
        }
        k += 1;
    });
    mask
}

/// Visitor over a slice of keys.
fn keys_of(len: usize, key: impl Fn(usize) -> u64) -> impl Fn(&mut dyn FnMut(u64)) {
    move |f| (0..len).for_each(|k| f(key(k)))
}

/// Order-preserving key of a non-negative, non-NaN magnitude.
#[inline]
fn magnitude_key(x: f64) -> u64 {
    // +0.0 and -0.0 both map to 0; abs() already cleared the sign
    x.abs().to_bits()
}

/// Coordinates of the `⌈α·m·n⌉` largest values of `scores` (row-major).
pub fn top_alpha(name: &str, rows: usize, cols: usize, scores: &[f64], alpha: f64) -> Result<Mask> {
    check_scores(scores, rows * cols)?;
    let count = selection_count(alpha, rows * cols)?;
    Ok(select_smallest(
        name,
        rows,
        cols,
        count,
        keys_of(scores.len(), |k| !magnitude_key(scores[k])),
    ))
}

/// Coordinates of the `⌈α·m·n⌉` smallest values of `scores`.
pub fn bottom_alpha(
    name: &str,
    rows: usize,
    cols: usize,
    scores: &[f64],
    alpha: f64,
) -> Result<Mask> {
    check_scores(scores, rows * cols)?;
    let count = selection_count(alpha, rows * cols)?;
    Ok(select_smallest(
        name,
        rows,
        cols,
        count,
        keys_of(scores.len(), |k| magnitude_key(scores[k])),
    ))
}

fn check_scores(scores: &[f64], len: usize) -> Result<()> {
    if scores.len() != len {
        return Err(Error::Shape(format!(
            "{} scores for {len} entries",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan() || *s < 0.0) {
        return Err(Error::Numerics(
            "scores must be non-negative and not NaN".into(),
        ));
    }
    Ok(())
}

/// Best rank-k approximation `U_k diag(σ_1..σ_k) V_kᵀ`, in f64.
pub fn rank_k_reconstruct(w: &WeightMatrix, k: usize) -> Result<WeightMatrix> {
    let s = svd_topk(w, k)?;
    let r = s.reconstruct();
    let values: Vec<f64> = (0..w.rows())
        .flat_map(|i| (0..w.cols()).map(move |j| (i, j)))
        .map(|(i, j)| r[(i, j)])
        .collect();
    WeightMatrix::from_f64(w.name.clone(), w.rows(), w.cols(), values)
}

/// Feeds `|W^(k)_ij|` to `f` in row-major order, rebuilding one row block
/// at a time from the summary.
fn visit_reconstruction(s: &SpectralSummary, us: faer::MatRef<'_, f64>, f: &mut dyn FnMut(f64)) {
    const ROWS: usize = 64;
    let m = s.rows();
    for r0 in (0..m).step_by(ROWS) {
        let r1 = (r0 + ROWS).min(m);
        let block = us.subrows(r0, r1 - r0) * s.v.transpose();
        for i in 0..r1 - r0 {
            for j in 0..s.cols() {
                f(block[(i, j)].abs());
            }
        }
    }
}

fn scaled_u(s: &SpectralSummary) -> faer::Mat<f64> {
    faer::Mat::from_fn(s.rows(), s.k, |i, j| s.u[(i, j)] * s.sigma[j])
}

/// `|W^(k)_ij|` for every coordinate, row-major.
pub fn reconstruction_magnitudes(s: &SpectralSummary) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.rows() * s.cols());
    visit_reconstruction(s, scaled_u(s).as_ref(), &mut |x| out.push(x));
    out
}

/// Top-α of `|W^(k)|`.
pub fn principal_mask(w: &WeightMatrix, k: usize, alpha: f64) -> Result<Mask> {
    check_alpha(alpha)?;
    principal_mask_from_summary(&svd_topk(w, k)?, alpha)
}

/// [`principal_mask`] for an already computed spectral summary.
pub fn principal_mask_from_summary(s: &SpectralSummary, alpha: f64) -> Result<Mask> {
    let count = selection_count(alpha, s.rows() * s.cols())?;
    let us = scaled_u(s);
    // the scores are regenerated on every selection pass rather than stored
    Ok(select_smallest(
        &s.layer_name,
        s.rows(),
        s.cols(),
        count,
        |f| visit_reconstruction(s, us.as_ref(), &mut |x| f(!magnitude_key(x))),
    ))
}

/// Bottom-α of `|W|`.
pub fn low_magnitude_mask(w: &WeightMatrix, alpha: f64) -> Result<Mask> {
    if !w.is_finite() {
        return Err(Error::Numerics(format!(
            "`{}` has non-finite entries",
            w.name
        )));
    }
    let count = selection_count(alpha, w.len())?;
    Ok(select_smallest(
        &w.name,
        w.rows(),
        w.cols(),
        count,
        keys_of(w.len(), |k| magnitude_key(w.value(k))),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Principal,
    PrincipalComplement,
    LowMagnitude,
    /// `low_magnitude(alpha_low) ∪ complement(principal(alpha))`.
    Safe,
    /// Uniformly random, same cardinality as a reference mask.
    RandomMatched,
}

/// How to build one selection mask per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecipe {
    pub kind: MaskKind,
    /// Rank for the principal kinds.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Fraction selected: the principal fraction for `principal`,
    /// `principal_complement` and `safe`, the low-magnitude fraction for
    /// `low_magnitude`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Low-magnitude fraction of the `safe` mask.
    #[serde(default = "default_alpha")]
    pub alpha_low: f64,
    /// Seed for `random_matched`.
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    64
}

fn default_alpha() -> f64 {
    0.5
}

impl MaskRecipe {
    pub fn new(kind: MaskKind) -> Self {
        MaskRecipe {
            kind,
            k: default_k(),
            alpha: default_alpha(),
            alpha_low: default_alpha(),
            seed: 0,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_alpha_low(mut self, alpha_low: f64) -> Self {
        self.alpha_low = alpha_low;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn needs_spectrum(&self) -> bool {
        matches!(
            self.kind,
            MaskKind::Principal | MaskKind::PrincipalComplement | MaskKind::Safe
        )
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |a: f64| a > 0.0 && a < 1.0;
        if !in_range(self.alpha) {
            return Err(Error::Config(format!(
                "recipe alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.kind == MaskKind::Safe && !in_range(self.alpha_low) {
            return Err(Error::Config(format!(
                "recipe alpha_low must lie in (0, 1), got {}",
                self.alpha_low
            )));
        }
        if self.needs_spectrum() && self.k == 0 {
            return Err(Error::Config("principal recipes need k >= 1".into()));
        }
        Ok(())
    }
}

/// Uniform random mask with exactly `reference.count()` coordinates.
pub fn random_matched(reference: &Mask, seed: u64) -> Mask {
    let mut rng = rng_for(seed, reference.name());
    let picks = index::sample(&mut rng, reference.len(), reference.count());
    let mut m = Mask::empty(reference.name(), reference.rows(), reference.cols());
    for k in picks.iter() {
        m.set_flat(k, true);
    }
    m
}

/// Builds the recipe's mask for one layer. `summary` may carry a
/// precomputed top-k SVD of `w` (with the recipe's `k`); `reference` is
/// required for `random_matched`.
pub fn build_recipe_mask_with(
    w: &WeightMatrix,
    recipe: &MaskRecipe,
    summary: Option<&SpectralSummary>,
    reference: Option<&Mask>,
) -> Result<Mask> {
    recipe.validate()?;
    let principal = |alpha: f64| -> Result<Mask> {
        match summary {
            Some(s) if s.k == recipe.k => principal_mask_from_summary(s, alpha),
            _ => principal_mask(w, recipe.k, alpha),
        }
    };
    match recipe.kind {
        MaskKind::Principal => principal(recipe.alpha),
        MaskKind::PrincipalComplement => Ok(principal(recipe.alpha)?.complement()),
        MaskKind::LowMagnitude => low_magnitude_mask(w, recipe.alpha),
        MaskKind::Safe => {
            let low = low_magnitude_mask(w, recipe.alpha_low)?;
            low.union(&principal(recipe.alpha)?.complement())
        }
        MaskKind::RandomMatched => {
            let reference = reference.ok_or_else(|| {
                Error::Config("random_matched needs a reference mask to match".into())
            })?;
            if (reference.rows(), reference.cols()) != w.shape() {
                return Err(Error::Shape(format!(
                    "reference mask is {}x{}, layer `{}` is {:?}",
                    reference.rows(),
                    reference.cols(),
                    w.name,
                    w.shape()
                )));
            }
            Ok(random_matched(reference, recipe.seed))
        }
    }
}

pub fn build_recipe_mask(
    w: &WeightMatrix,
    recipe: &MaskRecipe,
    reference: Option<&Mask>,
) -> Result<Mask> {
    build_recipe_mask_with(w, recipe, None, reference)
}

/// One layer's entry in a mask archive manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
    pub density: f64,
}

/// `manifest.json` of a mask archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub format: String,
    pub label: String,
    pub recipe: MaskRecipe,
    pub seed: u64,
    pub layers: Vec<ManifestEntry>,
    pub total_count: u64,
    pub total_entries: u64,
    pub density: f64,
}

pub const MANIFEST_FORMAT: &str = "weightscope-mask-archive/1";

fn file_name_for(layer: &str, used: &mut Vec<String>) -> String {
    let base: String = layer
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    let mut name = format!("{base}.mask");
    let mut n = 1;
    while used.contains(&name) {
        name = format!("{base}.{n}.mask");
        n += 1;
    }
    used.push(name.clone());
    name
}

/// Writes a mask archive one layer at a time: `<dir>/<layer>.mask` files
/// plus `<dir>/manifest.json` on [`finish`](Self::finish).
pub struct MaskArchiveWriter {
    dir: PathBuf,
    label: String,
    recipe: MaskRecipe,
    used: Vec<String>,
    layers: Vec<ManifestEntry>,
}

impl MaskArchiveWriter {
    pub fn create(dir: impl AsRef<Path>, label: &str, recipe: &MaskRecipe) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(MaskArchiveWriter {
            dir,
            label: label.to_string(),
            recipe: recipe.clone(),
            used: Vec::new(),
            layers: Vec::new(),
        })
    }

    pub fn add(&mut self, m: &Mask) -> Result<()> {
        let file = file_name_for(m.name(), &mut self.used);
        m.save(self.dir.join(&file))?;
        self.layers.push(ManifestEntry {
            layer: m.name().to_string(),
            file,
            rows: m.rows(),
            cols: m.cols(),
            count: m.count(),
            density: m.density(),
        });
        Ok(())
    }

    pub fn finish(self) -> Result<MaskManifest> {
        let total_count: u64 = self.layers.iter().map(|e| e.count as u64).sum();
        let total_entries: u64 = self.layers.iter().map(|e| (e.rows * e.cols) as u64).sum();
        let manifest = MaskManifest {
            format: MANIFEST_FORMAT.into(),
            label: self.label,
            seed: self.recipe.seed,
            recipe: self.recipe,
            layers: self.layers,
            total_count,
            total_entries,
            density: if total_entries == 0 {
                0.0
            } else {
                total_count as f64 / total_entries as f64
            },
        };
        let path = self.dir.join("manifest.json");
        let json =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Writes `masks` as `<dir>/<layer>.mask` files plus `<dir>/manifest.json`.
pub fn export_mask_archive(
    dir: impl AsRef<Path>,
    label: &str,
    recipe: &MaskRecipe,
    masks: &[Mask],
) -> Result<MaskManifest> {
    let mut w = MaskArchiveWriter::create(dir, label, recipe)?;
    for m in masks {
        w.add(m)?;
    }
    w.finish()
}

/// Reads an archive written by [`export_mask_archive`], checking every file
/// against its manifest entry.
pub fn load_mask_archive(dir: impl AsRef<Path>) -> Result<(MaskManifest, Vec<Mask>)> {
    let dir = dir.as_ref();
    let path: PathBuf = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: MaskManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Parse(format!(
            "unknown mask archive format `{}`",
            manifest.format
        )));
    }
    let mut masks = Vec::new();
    for e in &manifest.layers {
        let m = Mask::load(dir.join(&e.file))?;
        if m.name() != e.layer || m.rows() != e.rows || m.cols() != e.cols || m.count() != e.count {
            return Err(Error::Integrity(format!(
                "`{}` does not match its manifest entry",
                e.file
            )));
        }
        masks.push(m);
    }
    Ok((manifest, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{combine_masks, MaskOp};
    use proptest::prelude::*;

    fn w(rows: usize, cols: usize, v: &[f64]) -> WeightMatrix {
        WeightMatrix::from_f64("w", rows, cols, v.to_vec()).unwrap()
    }

    fn coords(m: &Mask) -> Vec<(usize, usize)> {
        m.coords().collect()
    }

    #[test]
    fn counts_round_up_but_respect_exact_products() {
        assert_eq!(selection_count(0.25, 4).unwrap(), 1);
        assert_eq!(selection_count(0.3, 4).unwrap(), 2);
        assert_eq!(selection_count(0.29, 100).unwrap(), 29);
        assert_eq!(selection_count(1.0, 7).unwrap(), 7);
        assert!(selection_count(0.0, 7).is_err());
        assert!(selection_count(1.5, 7).is_err());
    }

    #[test]
    fn streamed_principal_matches_stored_scores() {
        let vals: Vec<f64> = (0..130 * 70)
            .map(|i| ((i * 7919) % 1013) as f64 / 97.0 - 5.0)
            .collect();
        let layer = w(130, 70, &vals);
        let s = svd_topk(&layer, 6).unwrap();
        let scores = reconstruction_magnitudes(&s);
        for alpha in [0.01, 0.3, 0.5, 1.0] {
            let stored = top_alpha("w", 130, 70, &scores, alpha).unwrap();
            assert_eq!(principal_mask_from_summary(&s, alpha).unwrap(), stored);
        }
    }

    #[test]
    fn reconstruction_examples() {
        let r = rank_k_reconstruct(&w(2, 2, &[3.0, 0.0, 0.0, 1.0]), 1).unwrap();
        let v = r.to_f64_vec();
        assert!((v[0] - 3.0).abs() < 1e-14 && v[1..].iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn principal_and_low_examples() {
        let m = principal_mask(&w(2, 2, &[3.0, 0.0, 0.0, 1.0]), 1, 0.25).unwrap();
        assert_eq!(coords(&m), vec![(0, 0)]);
        let low = w(2, 2, &[3.0, 0.1, 2.0, 1.0]);
        assert_eq!(
            coords(&low_magnitude_mask(&low, 0.25).unwrap()),
            vec![(0, 1)]
        );
        assert_eq!(
            coords(&low_magnitude_mask(&low, 0.5).unwrap()),
            vec![(0, 1), (1, 1)]
        );
        assert_eq!(principal_mask(&low, 1, 1.0).unwrap().count(), 4);
    }

    #[test]
    fn ties_go_to_earlier_coordinates() {
        let flat = w(2, 3, &[1.0; 6]);
        assert_eq!(
            coords(&low_magnitude_mask(&flat, 0.5).unwrap()),
            vec![(0, 0), (0, 1), (0, 2)]
        );
        let scores = [2.0, 1.0, 2.0, 2.0];
        assert_eq!(
            coords(&top_alpha("s", 2, 2, &scores, 0.5).unwrap()),
            vec![(0, 0), (1, 0)]
        );
        let signed = w(1, 4, &[-0.0, 0.0, -1.0, 0.5]);
        assert_eq!(
            coords(&low_magnitude_mask(&signed, 0.5).unwrap()),
            vec![(0, 0), (0, 1)]
        );
    }

    #[test]
    fn safe_mask_matches_set_algebra() {
        let vals: Vec<f64> = (0..16).map(|i| ((i * 7 % 16) as f64 - 7.5) * 0.3).collect();
        let layer = w(4, 4, &vals);
        let recipe = MaskRecipe::new(MaskKind::Safe).with_k(2);
        let safe = build_recipe_mask(&layer, &recipe, None).unwrap();
        let low = low_magnitude_mask(&layer, 0.5).unwrap();
        let princ = principal_mask(&layer, 2, 0.5).unwrap();
        let expected = combine_masks(
            MaskOp::Union,
            &low,
            Some(&combine_masks(MaskOp::Complement, &princ, None).unwrap()),
        )
        .unwrap();
        assert_eq!(safe, expected);

        let comp = build_recipe_mask(
            &layer,
            &MaskRecipe::new(MaskKind::PrincipalComplement).with_k(2),
            None,
        )
        .unwrap();
        assert_eq!(princ.union(&comp).unwrap().count(), 16);
    }

    #[test]
    fn random_matched_needs_reference_and_matches_count() {
        let layer = w(3, 5, &[1.0; 15]);
        let recipe = MaskRecipe::new(MaskKind::RandomMatched).with_seed(9);
        assert!(matches!(
            build_recipe_mask(&layer, &recipe, None),
            Err(Error::Config(_))
        ));
        let reference = Mask::from_fn("w", 3, 5, |k| k % 3 == 0);
        let r = build_recipe_mask(&layer, &recipe, Some(&reference)).unwrap();
        assert_eq!(r.count(), reference.count());
        assert_eq!(
            r,
            build_recipe_mask(&layer, &recipe, Some(&reference)).unwrap()
        );
    }

    #[test]
    fn recipe_validation() {
        assert!(MaskRecipe::new(MaskKind::Principal)
            .with_alpha(1.0)
            .validate()
            .is_err());
        assert!(MaskRecipe::new(MaskKind::Safe)
            .with_alpha_low(0.0)
            .validate()
            .is_err());
        assert!(MaskRecipe::new(MaskKind::Principal)
            .with_k(0)
            .validate()
            .is_err());
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Mask::from_fn("model.layers.0.q_proj.weight", 3, 4, |k| k % 2 == 0);
        let b = Mask::from_fn("model/layers/1", 2, 2, |k| k == 3);
        let recipe = MaskRecipe::new(MaskKind::Safe);
        let man =
            export_mask_archive(dir.path(), "safe", &recipe, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(man.total_count, 7);
        let (back, masks) = load_mask_archive(dir.path()).unwrap();
        assert_eq!(back, man);
        assert_eq!(masks, vec![a, b]);
    }

    proptest! {
        #[test]
        fn selection_is_exact_and_ordered(vals in proptest::collection::vec(-100.0f64..100.0, 1..80), alpha in 0.01f64..1.0) {
            let n = vals.len();
            let layer = w(1, n, &vals);
            let m = low_magnitude_mask(&layer, alpha).unwrap();
            prop_assert_eq!(m.count(), selection_count(alpha, n).unwrap());
            // oracle: stable sort by (|w|, index)
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()).then(a.cmp(&b)));
            let expected = Mask::from_coords("w", 1, n, order[..m.count()].iter().map(|&k| (0, k))).unwrap();
            prop_assert_eq!(m, expected);
        }

        #[test]
        fn principal_is_scale_invariant(vals in proptest::collection::vec(-10.0f64..10.0, 20), c in 0.01f64..100.0) {
            let a = w(4, 5, &vals);
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let b = w(4, 5, &scaled);
            // exact ties in |W^(k)| are measure-zero for continuous draws
            prop_assert_eq!(principal_mask(&a, 2, 0.3).unwrap(), principal_mask(&b, 2, 0.3).unwrap());
        }

        #[test]
        fn safe_density_bounds(vals in proptest::collection::vec(-5.0f64..5.0, 30), ap in 0.05f64..0.95, al in 0.05f64..0.95) {
            let layer = w(5, 6, &vals);
            let recipe = MaskRecipe::new(MaskKind::Safe).with_k(2).with_alpha(ap).with_alpha_low(al);
            let d = build_recipe_mask(&layer, &recipe, None).unwrap().density();
            let low = selection_count(al, 30).unwrap() as f64 / 30.0;
            let comp = 1.0 - selection_count(ap, 30).unwrap() as f64 / 30.0;
            prop_assert!(d >= low.max(comp) - 1e-12);
            prop_assert!(d <= low + comp + 1e-12);
        }
    }
}
