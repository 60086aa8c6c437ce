//! Synthetic checkpoints with known answers, for tests, demos and benchmarks.
//!
//! The planted-stripe suite is a base checkpoint plus several fine-tuned
//! runs. In every run each rank-2 layer changes exactly 25% of its stored
//! values: a fixed band of "stripe" rows changes in every run, and the rest
//! of the budget is spent on coordinates drawn independently per run. The
//! expected sparsity is therefore 0.75, the stripe rows have consensus 1, and
//! pairwise Jaccard sits well above the independent-mask baseline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bf16::Bf16Word;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor_io::{write_archive, ArchiveWriter, Dtype, TensorSpec, WeightMatrix};

/// One planted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Rows changed in every run.
    pub stripe_rows: Vec<usize>,
}

/// Paths and ground truth of a planted suite.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSuite {
    pub base: PathBuf,
    pub runs: Vec<PathBuf>,
    pub layers: Vec<PlantedLayer>,
    /// Fraction of entries changed per run and layer.
    pub change_fraction: f64,
}

/// Moves a bf16 value by `steps` codes away from zero (it stays normal for
/// the magnitudes generated here).
fn bump(w: Bf16Word, steps: u16) -> Bf16Word {
    Bf16Word(w.0 + steps)
}

fn gaussian_bf16(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Vec<Bf16Word> {
    (0..rows * cols)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            // keep clear of zero so every value is a normal number
            let x = if x.abs() < 1e-3 {
                1e-3f64.copysign(x)
            } else {
                x
            };
            Bf16Word::from_f64(scale * x)
        })
        .collect()
}

/// Writes `base.wsa` and `run{r}.wsa` (r = 0..runs) into `dir`.
pub fn write_planted_suite(dir: impl AsRef<Path>, runs: usize, seed: u64) -> Result<PlantedSuite> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // 1/8 of the rows are stripes; the other 1/8 of the budget is random
    let shapes = [
        ("model.layers.0.self_attn.q_proj.weight", 64, 64),
        ("model.layers.0.mlp.up_proj.weight", 96, 64),
        ("model.layers.1.self_attn.q_proj.weight", 64, 64),
        ("model.layers.1.mlp.down_proj.weight", 64, 96),
    ];
    let mut layers = Vec::new();
    let mut base_mats = Vec::new();
    for (li, &(name, rows, cols)) in shapes.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("planted/base/{name}"));
        let words = gaussian_bf16(rows, cols, 0.02, &mut rng);
        let band = rows / 8;
        let start = (li * 13) % (rows - band);
        layers.push(PlantedLayer {
            name: name.to_string(),
            rows,
            cols,
            stripe_rows: (start..start + band).collect(),
        });
        base_mats.push(WeightMatrix::new(
            name,
            rows,
            cols,
            crate::tensor_io::MatrixData::Bf16(words),
        )?);
    }
    let norm = WeightMatrix::from_f64_as_bf16(
        "model.layers.0.input_layernorm.weight",
        1,
        64,
        &vec![1.0; 64],
    )?;
    let meta = BTreeMap::from([("fixture".to_string(), "planted-stripes".to_string())]);

    let base = dir.join("base.wsa");
    let mut tensors: Vec<(&WeightMatrix, bool)> = base_mats.iter().map(|m| (m, false)).collect();
    tensors.push((&norm, true));
    write_archive(&base, &tensors, &meta)?;

    let mut run_paths = Vec::new();
    for r in 0..runs {
        let mut tuned = Vec::new();
        for (layer, m) in layers.iter().zip(&base_mats) {
            let mut rng = rng_for(seed, &format!("planted/run{r}/{}", layer.name));
            let mut words = m.as_bf16().expect("bf16 fixture").to_vec();
            let len = layer.rows * layer.cols;
            let budget = len / 4;
            let mut changed = vec![false; len];
            for &i in &layer.stripe_rows {
                for j in 0..layer.cols {
                    changed[i * layer.cols + j] = true;
                }
            }
            let free: Vec<usize> = (0..len).filter(|&k| !changed[k]).collect();
            let extra = budget - layer.stripe_rows.len() * layer.cols;
            for pick in index::sample(&mut rng, free.len(), extra).iter() {
                changed[free[pick]] = true;
            }
            for (k, w) in words.iter_mut().enumerate() {
                if changed[k] {
                    *w = bump(*w, rng.random_range(1..=3));
                }
            }
            tuned.push(WeightMatrix::new(
                layer.name.clone(),
                layer.rows,
                layer.cols,
                crate::tensor_io::MatrixData::Bf16(words),
            )?);
        }
        let path = dir.join(format!("run{r}.wsa"));
        let mut tensors: Vec<(&WeightMatrix, bool)> = tuned.iter().map(|m| (m, false)).collect();
        tensors.push((&norm, true));
        write_archive(&path, &tensors, &meta)?;
        run_paths.push(path);
    }
    Ok(PlantedSuite {
        base,
        runs: run_paths,
        layers,
        change_fraction: 0.25,
    })
}

/// Shape of a synthetic checkpoint pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    /// Probability that a stored value changes.
    pub change_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn params(&self) -> usize {
        self.layers * self.rows * self.cols
    }

    pub fn layer_name(&self, i: usize) -> String {
        format!("model.layers.{i}.mlp.up_proj.weight")
    }

    fn base_layer(&self, i: usize) -> Vec<Bf16Word> {
        let mut rng = rng_for(self.seed, &format!("synthetic/base/{i}"));
        gaussian_bf16(self.rows, self.cols, 0.02, &mut rng)
    }
}

/// Writes a bf16 base/fine-tuned pair layer by layer, so only one layer is
/// ever in memory. Returns `(base, tuned)` paths inside `dir`.
pub fn write_synthetic_pair(
    dir: impl AsRef<Path>,
    spec: &SyntheticSpec,
) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let specs: Vec<TensorSpec> = (0..spec.layers)
        .map(|i| TensorSpec {
            name: spec.layer_name(i),
            dtype: Dtype::BF16,
            shape: vec![spec.rows, spec.cols],
        })
        .collect();
    let meta = BTreeMap::from([("fixture".to_string(), "synthetic-pair".to_string())]);
    let base = dir.join("synthetic_base.wsa");
    let tuned = dir.join("synthetic_tuned.wsa");
    for (path, edit) in [(&base, false), (&tuned, true)] {
        let mut w = ArchiveWriter::create(path, specs.clone(), &meta)?;
        for i in 0..spec.layers {
            let mut words = spec.base_layer(i);
            if edit {
                let mut rng = rng_for(spec.seed, &format!("synthetic/edit/{i}"));
                for word in words.iter_mut() {
                    if rng.random_bool(spec.change_fraction) {
                        *word = bump(*word, 1);
                    }
                }
            }
            let bytes: Vec<u8> = words.iter().flat_map(|b| b.0.to_le_bytes()).collect();
            w.write_tensor(&spec.layer_name(i), &bytes)?;
        }
        w.finish()?;
    }
    Ok((base, tuned))
}
