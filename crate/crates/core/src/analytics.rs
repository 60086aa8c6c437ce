//! Statistics over update masks: overlap between runs, consensus across runs,
//! row/column profiles within a run, and overlap with selection masks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// `|A ∩ B| / |A ∪ B|`, with two empty masks counted as identical (1.0).
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Expected Jaccard index of two independent Bernoulli masks with densities
/// `p` and `q`: `pq / (p + q - pq)`.
pub fn bernoulli_baseline(p: f64, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!(
            "densities must lie in [0, 1], got {p} and {q}"
        )));
    }
    if p == 0.0 && q == 0.0 {
        return Err(Error::Domain(
            "baseline is undefined when both densities are zero".into(),
        ));
    }
    Ok(p * q / (p + q - p * q))
}

/// Pairwise Jaccard matrix of `R` runs for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardMatrix {
    pub layer_name: String,
    pub values: Vec<Vec<f64>>,
    /// Measured density of each run's mask.
    pub densities: Vec<f64>,
    /// Mean of the off-diagonal entries.
    pub mean_off_diagonal: f64,
    /// Mean of the pairwise Bernoulli baselines at the measured densities;
    /// `None` when every mask is empty.
    pub baseline: Option<f64>,
}

pub fn jaccard_matrix(masks: &[Mask]) -> Result<JaccardMatrix> {
    if masks.len() < 2 {
        return Err(Error::Arity {
            needed: 2,
            got: masks.len(),
        });
    }
    let r = masks.len();
    let mut values = vec![vec![1.0; r]; r];
    let (mut sum, mut base_sum, mut base_ok) = (0.0, 0.0, true);
    for i in 0..r {
        for j in i + 1..r {
            let jv = jaccard(&masks[i], &masks[j])?;
            values[i][j] = jv;
            values[j][i] = jv;
            sum += jv;
            match bernoulli_baseline(masks[i].density(), masks[j].density()) {
                Ok(b) => base_sum += b,
                Err(_) => base_ok = false,
            }
        }
    }
    let pairs = (r * (r - 1) / 2) as f64;
    Ok(JaccardMatrix {
        layer_name: masks[0].name().to_string(),
        values,
        densities: masks.iter().map(Mask::density).collect(),
        mean_off_diagonal: sum / pairs,
        baseline: base_ok.then_some(base_sum / pairs),
    })
}

/// Per-coordinate fraction of runs that changed it.
///
/// Stored as integer counts so every value is exactly `count / runs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusMap {
    pub layer_name: String,
    pub rows: usize,
    pub cols: usize,
    pub runs: usize,
    pub counts: Vec<u32>,
}

impl ConsensusMap {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.counts[i * self.cols + j] as f64 / self.runs as f64
    }

    /// Grid mean; equals the mean of the per-run densities.
    pub fn mean(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        total as f64 / (self.counts.len() as f64 * self.runs as f64)
    }

    /// Rows where every run changed every entry.
    pub fn unanimous_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| {
                self.counts[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .all(|&c| c as usize == self.runs)
            })
            .collect()
    }

    /// Mean consensus of each row.
    pub fn row_means(&self) -> Vec<f64> {
        let denom = (self.cols * self.runs) as f64;
        (0..self.rows)
            .map(|i| {
                let s: u64 = self.counts[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .map(|&c| c as u64)
                    .sum();
                s as f64 / denom
            })
            .collect()
    }

    /// One line per coordinate: `row,col,count,consensus`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "count", "consensus"])
            .map_err(csv_err)?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let c = self.counts[i * self.cols + j];
                w.write_record(&[
                    i.to_string(),
                    j.to_string(),
                    c.to_string(),
                    self.value(i, j).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Block-averaged grid of at most `max_rows x max_cols` cells, one CSV
    /// line per grid row, ready for a heatmap.
    pub fn downsample(&self, max_rows: usize, max_cols: usize) -> Vec<Vec<f64>> {
        let field: Vec<f64> = self
            .counts
            .iter()
            .map(|&c| c as f64 / self.runs as f64)
            .collect();
        downsample_grid(&field, self.rows, self.cols, max_rows, max_cols)
    }

    pub fn write_grid_csv(&self, out: impl Write, max_rows: usize, max_cols: usize) -> Result<()> {
        write_grid(out, &self.downsample(max_rows, max_cols))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("<csv>", e.into())
}

/// Averages `values` (row-major `rows x cols`) over a grid of contiguous
/// blocks. Block edges are `floor(k * rows / out_rows)`.
pub fn downsample_grid(
    values: &[f64],
    rows: usize,
    cols: usize,
    max_rows: usize,
    max_cols: usize,
) -> Vec<Vec<f64>> {
    let out_r = rows.min(max_rows.max(1));
    let out_c = cols.min(max_cols.max(1));
    (0..out_r)
        .map(|bi| {
            let (r0, r1) = (bi * rows / out_r, (bi + 1) * rows / out_r);
            (0..out_c)
                .map(|bj| {
                    let (c0, c1) = (bj * cols / out_c, (bj + 1) * cols / out_c);
                    let mut s = 0.0;
                    for i in r0..r1 {
                        s += values[i * cols + c0..i * cols + c1].iter().sum::<f64>();
                    }
                    s / ((r1 - r0) * (c1 - c0)) as f64
                })
                .collect()
        })
        .collect()
}

fn write_grid(out: impl Write, grid: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    for row in grid {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Averages masks of the same layer across runs.
pub fn consensus(masks: &[Mask]) -> Result<ConsensusMap> {
    if masks.len() < 2 {
        return Err(Error::Arity {
            needed: 2,
            got: masks.len(),
        });
    }
    let first = &masks[0];
    let mut counts = vec![0u32; first.len()];
    for m in masks {
        first.same_shape(m)?;
        for k in m.ones() {
            counts[k] += 1;
        }
    }
    Ok(ConsensusMap {
        layer_name: first.name().to_string(),
        rows: first.rows(),
        cols: first.cols(),
        runs: masks.len(),
        counts,
    })
}

/// Row-wise and column-wise change ratios of one mask, raw and smoothed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioProfiles {
    pub layer_name: String,
    pub window: usize,
    /// `rho[i]`: fraction of row `i` that changed.
    pub rho: Vec<f64>,
    /// `kappa[j]`: fraction of column `j` that changed.
    pub kappa: Vec<f64>,
    pub rho_smoothed: Vec<f64>,
    pub kappa_smoothed: Vec<f64>,
}

impl RatioProfiles {
    /// `axis,index,raw,smoothed`, rows first.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["axis", "index", "raw", "smoothed"])
            .map_err(csv_err)?;
        for (axis, raw, sm) in [
            ("row", &self.rho, &self.rho_smoothed),
            ("col", &self.kappa, &self.kappa_smoothed),
        ] {
            for (i, (r, s)) in raw.iter().zip(sm.iter()).enumerate() {
                w.write_record(&[
                    axis.to_string(),
                    i.to_string(),
                    r.to_string(),
                    s.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Centered moving average; near the edges the window is truncated to the
/// entries that exist.
pub fn smooth(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "smoothing window must be odd and positive, got {window}"
        )));
    }
    let h = window / 2;
    let n = values.len();
    Ok((0..n)
        .map(|i| {
            let span = &values[i.saturating_sub(h)..(i + h + 1).min(n)];
            span.iter().sum::<f64>() / span.len() as f64
        })
        .collect())
}

pub fn ratio_profiles(mask: &Mask, window: usize) -> Result<RatioProfiles> {
    let (m, n) = (mask.rows(), mask.cols());
    let mut row_counts = vec![0usize; m];
    let mut col_counts = vec![0usize; n];
    for (i, j) in mask.coords() {
        row_counts[i] += 1;
        col_counts[j] += 1;
    }
    let rho: Vec<f64> = row_counts.iter().map(|&c| c as f64 / n as f64).collect();
    let kappa: Vec<f64> = col_counts.iter().map(|&c| c as f64 / m as f64).collect();
    Ok(RatioProfiles {
        layer_name: mask.name().to_string(),
        window,
        rho_smoothed: smooth(&rho, window)?,
        kappa_smoothed: smooth(&kappa, window)?,
        rho,
        kappa,
    })
}

/// Share of the updated coordinates that a selection mask covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// `|selection ∩ updates| / |updates|`.
    pub ratio: f64,
    /// What a uniformly random selection of the same density would score.
    pub random_baseline: f64,
}

impl Overlap {
    /// Positive when the selection covers more updates than chance.
    pub fn excess(&self) -> f64 {
        self.ratio - self.random_baseline
    }
}

pub fn overlap_ratio(selection: &Mask, updates: &Mask) -> Result<Overlap> {
    if updates.count() == 0 {
        return Err(Error::Domain(format!(
            "update mask `{}` is empty",
            updates.name()
        )));
    }
    let inter = selection.intersection_count(updates)?;
    Ok(Overlap {
        ratio: inter as f64 / updates.count() as f64,
        random_baseline: selection.density(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOp {
    Union,
    Intersect,
    Complement,
    Difference,
}

/// Set algebra on masks. `Complement` ignores `b`; the other ops require it.
pub fn combine_masks(op: MaskOp, a: &Mask, b: Option<&Mask>) -> Result<Mask> {
    let need_b = || b.ok_or_else(|| Error::Config(format!("{op:?} needs two masks")));
    match op {
        MaskOp::Union => a.union(need_b()?),
        MaskOp::Intersect => a.intersect(need_b()?),
        MaskOp::Difference => a.difference(need_b()?),
        MaskOp::Complement => Ok(a.complement()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: &[&[bool]]) -> Mask {
        Mask::from_rows("w", rows).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let a = Mask::from_coords("a", 2, 2, [(0, 0), (0, 1)]).unwrap();
        let b = Mask::from_coords("b", 2, 2, [(0, 1), (1, 1)]).unwrap();
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = Mask::from_coords("c", 2, 2, [(1, 0)]).unwrap();
        assert_eq!(jaccard(&a, &c).unwrap(), 0.0);
        let e = Mask::empty("e", 2, 2);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert!(jaccard(&a, &Mask::empty("x", 4, 1)).is_err());
    }

    #[test]
    fn baseline_examples() {
        assert!((bernoulli_baseline(0.5, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(bernoulli_baseline(1.0, 1.0).unwrap(), 1.0);
        assert!(matches!(
            bernoulli_baseline(0.0, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(bernoulli_baseline(1.5, 0.2).is_err());
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let ms: Vec<Mask> = (0..4)
            .map(|r| Mask::from_fn("w", 6, 7, |k| (k * (r + 3)) % 5 < 2))
            .collect();
        let jm = jaccard_matrix(&ms).unwrap();
        for i in 0..4 {
            assert_eq!(jm.values[i][i], 1.0);
            for j in 0..4 {
                assert_eq!(jm.values[i][j], jm.values[j][i]);
            }
        }
        assert!(matches!(jaccard_matrix(&ms[..1]), Err(Error::Arity { .. })));
    }

    #[test]
    fn consensus_examples() {
        let runs = [mask(&[&[true]]), mask(&[&[true]]), mask(&[&[false]])];
        let c = consensus(&runs).unwrap();
        assert!((c.value(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(consensus(&runs[..1]), Err(Error::Arity { .. })));

        let stripes: Vec<Mask> = (0..3)
            .map(|r| {
                Mask::from_fn("w", 5, 4, |k| {
                    k / 4 == 1 || k / 4 == 3 || (k == 0 && r == 0)
                })
            })
            .collect();
        let c = consensus(&stripes).unwrap();
        assert_eq!(c.unanimous_rows(), vec![1, 3]);
        let mean_density = stripes.iter().map(Mask::density).sum::<f64>() / 3.0;
        assert!((c.mean() - mean_density).abs() < 1e-15);
    }

    #[test]
    fn profile_examples() {
        let p = ratio_profiles(&mask(&[&[true, false], &[true, true]]), 1).unwrap();
        assert_eq!(p.rho, vec![0.5, 1.0]);
        assert_eq!(p.kappa, vec![1.0, 0.5]);
        assert_eq!(p.rho_smoothed, p.rho);
        assert!(matches!(
            ratio_profiles(&Mask::full("f", 2, 2), 2),
            Err(Error::Config(_))
        ));
        let full = ratio_profiles(&Mask::full("f", 3, 4), 3).unwrap();
        assert!(full.rho.iter().chain(&full.kappa).all(|&v| v == 1.0));
    }

    #[test]
    fn smoothing_truncates_at_edges() {
        let s = smooth(&[1.0, 2.0, 6.0, 3.0], 3).unwrap();
        assert_eq!(s, vec![1.5, 3.0, 11.0 / 3.0, 4.5]);
    }

    #[test]
    fn overlap_examples() {
        let sel = Mask::from_coords("s", 2, 2, [(0, 0), (0, 1)]).unwrap();
        let upd = Mask::from_coords("u", 2, 2, [(0, 1), (1, 1)]).unwrap();
        let o = overlap_ratio(&sel, &upd).unwrap();
        assert_eq!((o.ratio, o.random_baseline), (0.5, 0.5));
        assert_eq!(overlap_ratio(&upd, &upd).unwrap().ratio, 1.0);
        assert!(matches!(
            overlap_ratio(&sel, &Mask::empty("u", 2, 2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn csv_matches_values() {
        let c = consensus(&[
            mask(&[&[true, false]]),
            mask(&[&[true, true]]),
            mask(&[&[false, true]]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        let v: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(v, c.value(0, 0));
        let grid = c.downsample(1, 1);
        assert!((grid[0][0] - c.mean()).abs() < 1e-15);
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
            proptest::collection::vec(any::<bool>(), r * c)
                .prop_map(move |b| Mask::from_fn("p", r, c, |k| b[k]))
        })
    }

    proptest! {
        #[test]
        fn profile_means_equal_density(m in arb_mask(), w in prop_oneof![Just(1usize), Just(3), Just(5)]) {
            let p = ratio_profiles(&m, w).unwrap();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((mean(&p.rho) - m.density()).abs() < 1e-12);
            prop_assert!((mean(&p.kappa) - m.density()).abs() < 1e-12);
            prop_assert!(p.rho.iter().chain(&p.kappa).all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn jaccard_in_unit_interval(a in arb_mask()) {
            let b = a.complement();
            let j = jaccard(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(combine_masks(MaskOp::Union, &a, Some(&b)).unwrap().count(), a.len());
            prop_assert_eq!(combine_masks(MaskOp::Complement, &b, None).unwrap(), a);
        }
    }
}
