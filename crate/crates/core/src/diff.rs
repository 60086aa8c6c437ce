//! Update masks and update sparsity between two checkpoints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bf16::{absolute_rule_unchanged, bf16_unchanged, ProbeConfig};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor_io::{CheckpointHandle, Dtype, LayerFilter, MatrixData, WeightMatrix};

/// A mask whose set bits are the coordinates that changed between two
/// checkpoints.
pub type UpdateMask = Mask;

/// How two stored values are compared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ProbeMode {
    /// The scale-aware bf16 relative test. Both sides must be bf16.
    Bf16(ProbeConfig),
    /// Plain inequality on f32 payloads. Both sides must be f32.
    F32Exact,
}

impl Default for ProbeMode {
    fn default() -> Self {
        ProbeMode::Bf16(ProbeConfig::default())
    }
}

impl ProbeMode {
    pub fn eta(&self) -> Option<f64> {
        match self {
            ProbeMode::Bf16(cfg) => Some(cfg.eta()),
            ProbeMode::F32Exact => None,
        }
    }
}

fn check_pair(w0: &WeightMatrix, w1: &WeightMatrix) -> Result<()> {
    if w0.shape() != w1.shape() {
        return Err(Error::Shape(format!(
            "`{}` is {:?} in the base but {:?} in the fine-tuned checkpoint",
            w0.name,
            w0.shape(),
            w1.shape()
        )));
    }
    if w0.dtype() != w1.dtype() || w0.source_dtype() != w1.source_dtype() {
        return Err(Error::Dtype(format!(
            "`{}` is {} vs {}",
            w0.name,
            w0.source_dtype(),
            w1.source_dtype()
        )));
    }
    Ok(())
}

/// Marks every coordinate whose stored value changed.
///
/// Symmetric in its arguments. The mask takes the name of `w0`.
pub fn update_mask(w0: &WeightMatrix, w1: &WeightMatrix, mode: &ProbeMode) -> Result<UpdateMask> {
    check_pair(w0, w1)?;
    let (m, n) = w0.shape();
    match (mode, w0.data(), w1.data()) {
        (ProbeMode::Bf16(cfg), MatrixData::Bf16(a), MatrixData::Bf16(b)) => {
            Ok(par_mask(&w0.name, m, n, |k| {
                !bf16_unchanged(a[k], b[k], cfg)
            }))
        }
        (ProbeMode::F32Exact, MatrixData::F32(a), MatrixData::F32(b)) => {
            // `!=` also flags NaN against anything, matching the bf16 probe
            Ok(par_mask(&w0.name, m, n, |k| a[k] != b[k]))
        }
        (ProbeMode::Bf16(_), _, _) => Err(Error::Dtype(format!(
            "the bf16 probe needs bf16 payloads but `{}` is {}; use the f32 mode for f32 layers",
            w0.name,
            w0.source_dtype()
        ))),
        (ProbeMode::F32Exact, _, _) => Err(Error::Dtype(format!(
            "f32 mode needs f32 payloads but `{}` is {}",
            w0.name,
            w0.source_dtype()
        ))),
    }
}

/// The fixed absolute-tolerance rule, for side-by-side comparison with the
/// bf16 probe. Values are compared after widening to f64.
pub fn absolute_rule_mask(w0: &WeightMatrix, w1: &WeightMatrix, tol: f64) -> Result<UpdateMask> {
    check_pair(w0, w1)?;
    let (m, n) = w0.shape();
    Ok(par_mask(&w0.name, m, n, |k| {
        !absolute_rule_unchanged(w0.value(k), w1.value(k), tol)
    }))
}

/// Builds a mask in parallel, filling disjoint runs of 64-bit words.
fn par_mask(name: &str, rows: usize, cols: usize, f: impl Fn(usize) -> bool + Sync) -> Mask {
    const WORDS: usize = 1024;
    let len = rows * cols;
    let mut words = vec![0u64; len.div_ceil(64)];
    words
        .par_chunks_mut(WORDS)
        .enumerate()
        .for_each(|(c, chunk)| {
            for (w, word) in chunk.iter_mut().enumerate() {
                let base = (c * WORDS + w) * 64;
                let mut bits = 0u64;
                for k in base..(base + 64).min(len) {
                    if f(k) {
                        bits |= 1 << (k - base);
                    }
                }
                *word = bits;
            }
        });
    Mask::from_words(name, rows, cols, words)
}

/// Changed-entry count for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub changed: u64,
    pub total: u64,
    /// `1 - changed / total`.
    pub sparsity: f64,
}

impl LayerSparsity {
    pub fn from_mask(mask: &UpdateMask) -> Self {
        let total = mask.len() as u64;
        let changed = mask.count() as u64;
        LayerSparsity {
            name: mask.name().to_string(),
            changed,
            total,
            sparsity: ratio_unchanged(changed, total),
        }
    }
}

fn ratio_unchanged(changed: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        1.0 - changed as f64 / total as f64
    }
}

/// Aggregate over a set of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityTotals {
    pub layers: usize,
    pub changed: u64,
    pub total: u64,
    pub sparsity: f64,
}

impl SparsityTotals {
    pub fn of(layers: &[LayerSparsity]) -> Self {
        let changed = layers.iter().map(|l| l.changed).sum();
        let total = layers.iter().map(|l| l.total).sum();
        SparsityTotals {
            layers: layers.len(),
            changed,
            total,
            sparsity: ratio_unchanged(changed, total),
        }
    }
}

/// Update sparsity of a checkpoint pair.
///
/// `layers` and `sparsity_bf16` cover the tensors selected by the filter.
/// Because conventions differ on whether norms, biases and embeddings count,
/// `all_tensors` repeats the tally over every floating-point tensor the probe
/// can compare; tensors it cannot compare are listed in `skipped`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub changed: u64,
    pub total: u64,
    pub sparsity_bf16: f64,
    pub probe: ProbeMode,
    pub filter: LayerFilter,
    pub all_tensors: SparsityTotals,
    pub skipped: Vec<String>,
}

/// Requires both checkpoints to have identical layer sets under `filter`.
pub fn check_same_layers(
    h0: &CheckpointHandle,
    h1: &CheckpointHandle,
    filter: &LayerFilter,
) -> Result<Vec<String>> {
    let a = h0.list_layers(filter);
    let b = h1.list_layers(filter);
    if a != b {
        let only0: Vec<_> = a
            .iter()
            .filter(|x| !b.contains(x))
            .take(5)
            .cloned()
            .collect();
        let only1: Vec<_> = b
            .iter()
            .filter(|x| !a.contains(x))
            .take(5)
            .cloned()
            .collect();
        return Err(Error::Schema(if only0.is_empty() && only1.is_empty() {
            "layers appear in a different order".to_string()
        } else {
            format!("only in base: {only0:?}; only in fine-tuned: {only1:?}")
        }));
    }
    Ok(a)
}

fn layer_sparsity(
    h0: &CheckpointHandle,
    h1: &CheckpointHandle,
    name: &str,
    mode: &ProbeMode,
) -> Result<LayerSparsity> {
    let w0 = h0.load_vector(name)?;
    let w1 = h1.load_vector(name)?;
    Ok(LayerSparsity::from_mask(&update_mask(&w0, &w1, mode)?))
}

/// Streams the pair layer by layer; only one layer pair per worker is
/// resident at a time.
pub fn sparsity_bf16(
    h0: &CheckpointHandle,
    h1: &CheckpointHandle,
    filter: &LayerFilter,
    mode: &ProbeMode,
) -> Result<SparsityReport> {
    filter.validate()?;
    let names = check_same_layers(h0, h1, filter)?;
    let layers = names
        .par_iter()
        .map(|name| layer_sparsity(h0, h1, name, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_sparsity(h0, h1, filter, mode, &names, layers))
}

/// Builds the report from already measured filtered `layers`, tallying
/// every other comparable tensor into `all_tensors`.
pub fn assemble_sparsity(
    h0: &CheckpointHandle,
    h1: &CheckpointHandle,
    filter: &LayerFilter,
    mode: &ProbeMode,
    names: &[String],
    layers: Vec<LayerSparsity>,
) -> SparsityReport {
    let rest: Vec<&str> = h0
        .names()
        .iter()
        .filter(|n| !names.contains(n))
        .map(String::as_str)
        .collect();
    let extra: Vec<(String, Option<LayerSparsity>)> = rest
        .par_iter()
        .map(|&name| {
            let (i0, i1) = (h0.info(name), h1.info(name));
            let comparable = match (i0, i1) {
                (Some(a), Some(b)) => {
                    a.dtype == b.dtype
                        && a.shape == b.shape
                        && matches!(a.shape.len(), 1 | 2)
                        && match mode {
                            ProbeMode::Bf16(_) => a.dtype == Dtype::BF16,
                            ProbeMode::F32Exact => a.dtype == Dtype::F32,
                        }
                }
                _ => false,
            };
            let result = comparable
                .then(|| layer_sparsity(h0, h1, name, mode).ok())
                .flatten();
            (name.to_string(), result)
        })
        .collect();
    let mut all = layers.clone();
    let mut skipped = Vec::new();
    for (name, r) in extra {
        match r {
            Some(l) => all.push(l),
            None => skipped.push(name),
        }
    }

    let totals = SparsityTotals::of(&layers);
    SparsityReport {
        layers,
        changed: totals.changed,
        total: totals.total,
        sparsity_bf16: totals.sparsity,
        probe: *mode,
        filter: filter.clone(),
        all_tensors: SparsityTotals::of(&all),
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bf16::{ulp_bf16, Bf16Word};
    use proptest::prelude::*;

    fn bf16(name: &str, m: usize, n: usize, v: &[f64]) -> WeightMatrix {
        WeightMatrix::from_f64_as_bf16(name, m, n, v).unwrap()
    }

    #[test]
    fn identity_gives_empty_mask() {
        let w = bf16("w", 2, 3, &[1.0, -2.0, 0.5, 0.0, 3e-5, 7.0]);
        let m = update_mask(&w, &w, &ProbeMode::default()).unwrap();
        assert_eq!(m.count(), 0);
        assert_eq!(m.density(), 0.0);
    }

    #[test]
    fn absolute_rule_counterexamples() {
        let mode = ProbeMode::default();
        let a = bf16("a", 1, 1, &[1024.001]);
        let b = bf16("a", 1, 1, &[1024.002]);
        assert_eq!(update_mask(&a, &b, &mode).unwrap().count(), 0);
        let c = bf16("c", 1, 1, &[1e-6]);
        let d = bf16("c", 1, 1, &[2e-6]);
        assert_eq!(update_mask(&c, &d, &mode).unwrap().count(), 1);

        // the absolute rule on the real values gets both wrong
        let exact = |v| WeightMatrix::from_f64("x", 1, 1, vec![v]).unwrap();
        assert_eq!(
            absolute_rule_mask(&exact(1024.001), &exact(1024.002), 1e-5)
                .unwrap()
                .count(),
            1
        );
        assert_eq!(
            absolute_rule_mask(&exact(1e-6), &exact(2e-6), 1e-5)
                .unwrap()
                .count(),
            0
        );
    }

    #[test]
    fn dtype_and_shape_errors() {
        let a = bf16("a", 1, 2, &[1.0, 2.0]);
        let b = bf16("a", 2, 1, &[1.0, 2.0]);
        assert!(matches!(
            update_mask(&a, &b, &ProbeMode::default()),
            Err(Error::Shape(_))
        ));
        let f = WeightMatrix::new("a", 1, 2, MatrixData::F32(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            update_mask(&a, &f, &ProbeMode::default()),
            Err(Error::Dtype(_))
        ));
        assert!(matches!(
            update_mask(&f, &f, &ProbeMode::default()),
            Err(Error::Dtype(_))
        ));
        assert_eq!(
            update_mask(&f, &f, &ProbeMode::F32Exact).unwrap().count(),
            0
        );
    }

    #[test]
    fn f32_mode_uses_plain_inequality() {
        let a = WeightMatrix::new("a", 1, 3, MatrixData::F32(vec![1.0, 2.0, f32::NAN])).unwrap();
        let b =
            WeightMatrix::new("a", 1, 3, MatrixData::F32(vec![1.0, 2.0000002, f32::NAN])).unwrap();
        let m = update_mask(&a, &b, &ProbeMode::F32Exact).unwrap();
        assert_eq!(m.ones().collect::<Vec<_>>(), vec![1, 2]);
    }

    fn normal_value() -> impl Strategy<Value = f64> {
        (any::<bool>(), 1u16..0x7F00).prop_map(|(neg, bits)| {
            let w = Bf16Word(bits | if neg { 0x8000 } else { 0 });
            w.to_f64()
        })
    }

    proptest! {
        #[test]
        fn symmetric(values in proptest::collection::vec((normal_value(), normal_value()), 1..64)) {
            let n = values.len();
            let a = bf16("w", 1, n, &values.iter().map(|v| v.0).collect::<Vec<_>>());
            let b = bf16("w", 1, n, &values.iter().map(|v| v.1).collect::<Vec<_>>());
            let mode = ProbeMode::default();
            prop_assert_eq!(update_mask(&a, &b, &mode).unwrap(), update_mask(&b, &a, &mode).unwrap());
        }

        #[test]
        fn one_ulp_is_realized_quarter_ulp_is_not(x in normal_value()) {
            let w = Bf16Word::from_f64(x);
            let ulp = ulp_bf16(w).unwrap();
            let mode = ProbeMode::default();
            let base = bf16("w", 1, 1, &[x]);
            let up = ulp * x.signum();
            // stepping one ULP away from zero always lands on the next code
            let bumped = bf16("w", 1, 1, &[x + up]);
            prop_assert_eq!(update_mask(&base, &bumped, &mode).unwrap().count(), 1);
            let nudged = bf16("w", 1, 1, &[x + 0.25 * up]);
            prop_assert_eq!(update_mask(&base, &nudged, &mode).unwrap().count(), 0);
        }
    }
}
