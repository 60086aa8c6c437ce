//! Configuration, orchestration and the JSON report.
//!
//! [`run_pipeline`] walks the selected layers one at a time. For each layer it
//! loads the base once, streams every fine-tuned run against it (update mask,
//! sparsity, ratio profiles, spectral drift, optional bound checks), then
//! builds the configured selection masks, their overlaps with each run's
//! updates, and the cross-run Jaccard and consensus statistics. A failure in
//! one stage of one layer is recorded in the report and the rest continues.
//!
//! Given the same configuration the report is byte-identical: no timestamps,
//! no hash-map iteration, every random stream derived from the root seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{consensus, jaccard_matrix, overlap_ratio, ratio_profiles, JaccardMatrix};
use crate::bf16::ProbeConfig;
use crate::diff::{
    assemble_sparsity, check_same_layers, update_mask, LayerSparsity, ProbeMode, SparsityReport,
};
use crate::error::{Error, Result};
use crate::geometry::{
    build_recipe_mask_with, MaskArchiveWriter, MaskKind, MaskManifest, MaskRecipe,
};
use crate::mask::Mask;
use crate::seed::derive_seed;
use crate::spectral::{
    bounds_from_summaries, frobenius_norm, layer_drift, spectral_norm, svd_topk_source,
    BoundReport, Difference, DriftReport, LayerDrift, SpectralSummary, SvdRoute,
};
use crate::tensor_io::{open_checkpoint, CheckpointHandle, LayerFilter, WeightMatrix};

/// Version tag of the report layout.
pub const REPORT_SCHEMA: &str = "weightscope-report/1";

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "WEIGHTSCOPE_WORKERS";

/// Identifier and definition of every formula a report block can cite.
pub const FORMULAS: &[(&str, &str)] = &[
    (
        "sparsity.bf16_probe/1",
        "unchanged iff |w1 - w0| <= eta * max(|w0|, |w1|) on stored bf16 values; sparsity = 1 - changed / total",
    ),
    ("sparsity.f32_exact/1", "unchanged iff the stored f32 values are equal; sparsity = 1 - changed / total"),
    ("jaccard.pairwise/1", "J(A, B) = |A & B| / |A | B|, with J = 1 when both masks are empty"),
    (
        "jaccard.bernoulli_baseline/1",
        "E[J] = pq / (p + q - pq) for independent masks of densities p, q; averaged over run pairs at measured densities",
    ),
    ("consensus.ratio/1", "C_ij = (1/R) * sum_r M^(r)_ij over R runs"),
    (
        "profiles.row_col_ratio/1",
        "rho_i = sum_j M_ij / n, kappa_j = sum_i M_ij / m; centred moving average of odd width, truncated at the edges",
    ),
    (
        "spectral.principal_angles/1",
        "theta_i between span(U_k(W0)) and span(U_k(W1)) (and V); cosines from svd(A^T B), sines from svd(B - A A^T B)",
    ),
    ("spectral.nss/1", "NSS = ||sigma(W1) - sigma(W0)||_2 / ||sigma(W0)||_2 over the full spectrum and over the top k"),
    ("spectral.kyfan/1", "|sum_{i<=k} sigma_i(W1) - sum_{i<=k} sigma_i(W0)|"),
    (
        "bounds.suite/1",
        "Weyl, Hoffman-Wielandt, Ky Fan, Wedin sin-theta and ||.||_2 <= ||.||_F with relative slack 1e-6",
    ),
    (
        "masks.principal/1",
        "top ceil(alpha * m * n) entries of |U_k diag(sigma_1..k) V_k^T| of the base layer; ties to the smaller row-major index",
    ),
    ("masks.principal_complement/1", "complement of masks.principal/1"),
    ("masks.low_magnitude/1", "bottom ceil(alpha * m * n) entries of |W0|; ties to the smaller row-major index"),
    ("masks.safe/1", "low_magnitude(alpha_low) | complement(principal(alpha))"),
    ("masks.random_matched/1", "uniform random mask with the reference mask's exact cardinality"),
    ("overlap.ratio/1", "|S & U| / |U| for selection S and update mask U; random baseline = density(S)"),
];

fn formula(id: &str) -> String {
    debug_assert!(
        FORMULAS.iter().any(|(f, _)| *f == id),
        "unknown formula id {id}"
    );
    id.to_string()
}

fn default_true() -> bool {
    true
}

/// Cross-run analytics settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    pub jaccard: bool,
    pub consensus: bool,
    pub profiles: bool,
    /// Odd smoothing window of the ratio profiles.
    pub window: usize,
    /// Consensus CSVs are block-averaged down to at most `grid x grid`.
    pub grid: usize,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig {
            jaccard: true,
            consensus: true,
            profiles: true,
            window: 9,
            grid: 256,
        }
    }
}

/// Spectral drift settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub enabled: bool,
    /// Ranks at which drift is reported; clamped per layer to `min(m, n) - 1`.
    pub k: Vec<usize>,
    /// Ky Fan orders; empty means "the k list".
    pub kyfan: Vec<usize>,
    pub route: SvdRoute,
    /// Also run the perturbation-bound suite at the first k.
    pub bounds: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            enabled: true,
            k: vec![64],
            kyfan: Vec::new(),
            route: SvdRoute::Auto,
            bounds: false,
        }
    }
}

/// Selection-mask settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasksConfig {
    pub enabled: bool,
    pub recipes: Vec<MaskRecipe>,
    /// Label of the recipe whose cardinality `random_matched` copies.
    pub reference: Option<String>,
    /// Write one mask archive per recipe under `<output_dir>/masks/<label>`.
    #[serde(default = "default_true")]
    pub export: bool,
    #[serde(default = "default_true")]
    pub overlap: bool,
}

impl Default for MasksConfig {
    fn default() -> Self {
        MasksConfig {
            enabled: true,
            recipes: vec![
                MaskRecipe::new(MaskKind::Principal),
                MaskRecipe::new(MaskKind::LowMagnitude),
                MaskRecipe::new(MaskKind::Safe),
                MaskRecipe::new(MaskKind::RandomMatched),
            ],
            reference: None,
            export: true,
            overlap: true,
        }
    }
}

/// Everything [`run_pipeline`] needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub base: PathBuf,
    pub finetuned: Vec<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub filter: LayerFilter,
    #[serde(default)]
    pub probe: ProbeMode,
    #[serde(default)]
    pub analytics: AnalyticsConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub masks: MasksConfig,
    /// Worker threads; falls back to the environment, then to all cores.
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

impl MasksConfig {
    /// Unique label per recipe: the kind name, suffixed on repeats.
    pub fn recipe_labels(&self) -> Vec<String> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        self.recipes
            .iter()
            .map(|r| {
                let base = kind_label(r.kind);
                let n = seen.entry(base).or_insert(0);
                *n += 1;
                if *n == 1 {
                    base.to_string()
                } else {
                    format!("{base}_{n}")
                }
            })
            .collect()
    }

    /// Index of the recipe `random_matched` copies: the configured label,
    /// else `safe` if present, else the first non-random recipe.
    pub fn reference_index(&self) -> Option<usize> {
        let labels = self.recipe_labels();
        let non_random = |i: &usize| self.recipes[*i].kind != MaskKind::RandomMatched;
        match &self.reference {
            Some(label) => labels.iter().position(|l| l == label).filter(non_random),
            None => (0..labels.len())
                .find(|&i| self.recipes[i].kind == MaskKind::Safe)
                .or_else(|| (0..labels.len()).find(non_random)),
        }
    }

    /// Checks every recipe and the `random_matched` reference.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.recipes.is_empty() {
            problems.push("masks.recipes is empty".to_string());
        }
        for (label, r) in self.recipe_labels().iter().zip(&self.recipes) {
            if let Err(e) = r.validate() {
                problems.push(format!("recipe `{label}`: {e}"));
            }
        }
        let needs_ref = self
            .recipes
            .iter()
            .any(|r| r.kind == MaskKind::RandomMatched);
        if needs_ref && self.reference_index().is_none() {
            problems.push(match &self.reference {
                Some(l) => format!("masks.reference `{l}` does not name a non-random recipe"),
                None => "random_matched needs another recipe to match".into(),
            });
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(problems))
        }
    }

    /// Recipes with `random_matched` seeds filled in from the root seed
    /// where left at 0.
    pub fn seeded_recipes(&self, root: u64) -> Vec<MaskRecipe> {
        self.recipe_labels()
            .iter()
            .zip(&self.recipes)
            .map(|(label, r)| {
                let mut r = r.clone();
                if r.kind == MaskKind::RandomMatched && r.seed == 0 {
                    r.seed = derive_seed(root, &format!("masks/{label}"));
                }
                r
            })
            .collect()
    }
}

fn kind_label(kind: MaskKind) -> &'static str {
    match kind {
        MaskKind::Principal => "principal",
        MaskKind::PrincipalComplement => "principal_complement",
        MaskKind::LowMagnitude => "low_magnitude",
        MaskKind::Safe => "safe",
        MaskKind::RandomMatched => "random_matched",
    }
}

impl PipelineConfig {
    pub fn new(
        base: impl Into<PathBuf>,
        finetuned: Vec<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        PipelineConfig {
            base: base.into(),
            finetuned,
            output_dir: output_dir.into(),
            seed: 0,
            filter: LayerFilter::default(),
            probe: ProbeMode::default(),
            analytics: AnalyticsConfig::default(),
            spectral: SpectralConfig::default(),
            masks: MasksConfig::default(),
            workers: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))
    }

    /// Reads a TOML file; relative checkpoint and output paths are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut cfg.base);
            cfg.finetuned.iter_mut().for_each(fix);
            fix(&mut cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Checks the whole configuration and reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::ConfigList(list) => list.join("; "),
                    other => other.to_string(),
                });
            }
        };
        if !self.base.is_file() {
            push(Err(Error::Config(format!(
                "base checkpoint {} does not exist",
                self.base.display()
            ))));
        }
        if self.finetuned.is_empty() {
            push(Err(Error::Config(
                "at least one fine-tuned checkpoint is required".into(),
            )));
        }
        for p in &self.finetuned {
            if !p.is_file() {
                push(Err(Error::Config(format!(
                    "fine-tuned checkpoint {} does not exist",
                    p.display()
                ))));
            }
        }
        if self.output_dir.is_file() {
            push(Err(Error::Config(format!(
                "output dir {} is a file",
                self.output_dir.display()
            ))));
        }
        push(self.filter.validate());
        if let ProbeMode::Bf16(p) = &self.probe {
            push(ProbeConfig::new(p.eta()).map(|_| ()));
        }
        if self.analytics.window == 0 || self.analytics.window.is_multiple_of(2) {
            push(Err(Error::Config(format!(
                "analytics.window must be odd and positive, got {}",
                self.analytics.window
            ))));
        }
        if self.analytics.grid == 0 {
            push(Err(Error::Config("analytics.grid must be positive".into())));
        }
        if self.spectral.enabled && (self.spectral.k.is_empty() || self.spectral.k.contains(&0)) {
            push(Err(Error::Config(
                "spectral.k must be a non-empty list of positive ranks".into(),
            )));
        }
        if self.spectral.kyfan.contains(&0) {
            push(Err(Error::Config(
                "spectral.kyfan orders must be positive".into(),
            )));
        }
        if self.masks.enabled {
            push(self.masks.validate());
        }
        if self.workers == Some(0) {
            push(Err(Error::Config("workers must be at least 1".into())));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(problems))
        }
    }
}

/// Worker count: explicit value, else `WEIGHTSCOPE_WORKERS`, else all cores.
pub fn resolve_workers(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return Ok(n.max(1));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{WORKERS_ENV}={v:?} is not a positive integer"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Sparsity of one fine-tuned run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSparsity {
    pub run: usize,
    pub checkpoint: String,
    pub formula: String,
    pub report: SparsityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardBlock {
    pub formula: String,
    pub baseline_formula: String,
    pub layers: Vec<JaccardMatrix>,
    /// Mean over layers of the mean off-diagonal Jaccard.
    pub mean_off_diagonal: f64,
    /// Mean over layers of the Bernoulli baseline.
    pub mean_baseline: Option<f64>,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSummary {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub mean: f64,
    /// Rows where every run changed every entry (consensus 1).
    pub unanimous_rows: Vec<usize>,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusBlock {
    pub formula: String,
    pub runs: usize,
    pub layers: Vec<ConsensusSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub run: usize,
    pub layer: String,
    pub max_row_ratio: f64,
    pub max_col_ratio: f64,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilesBlock {
    pub formula: String,
    pub window: usize,
    pub layers: Vec<ProfileSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDrift {
    pub run: usize,
    /// Requested rank; per-layer effective ranks are in each entry's `k`.
    pub k: usize,
    pub layers: Vec<LayerDrift>,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralBlock {
    pub formulas: Vec<String>,
    pub route: SvdRoute,
    pub runs: Vec<RunDrift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub layer: String,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBounds {
    pub run: usize,
    pub layers: Vec<LayerBounds>,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsBlock {
    pub formula: String,
    pub runs: Vec<RunBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlap {
    pub layer: String,
    pub ratio: f64,
    pub random_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOverlap {
    pub run: usize,
    /// Pooled over layers: `Σ|S ∩ U| / Σ|U|`.
    pub ratio: f64,
    /// Pooled selection density over the same layers.
    pub random_baseline: f64,
    pub layers: Vec<LayerOverlap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeBlock {
    pub label: String,
    pub formula: String,
    pub recipe: MaskRecipe,
    pub archive: Option<String>,
    pub count: u64,
    pub entries: u64,
    pub density: f64,
    pub overlap_formula: Option<String>,
    pub overlaps: Vec<RunOverlap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasksBlock {
    pub recipes: Vec<RecipeBlock>,
}

/// A stage that failed on one layer; the rest of the pipeline continued.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFailure {
    pub layer: String,
    pub stage: String,
    pub error: String,
}

/// Something adjusted or skipped on a layer without being an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNote {
    pub layer: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Findings {
    pub bound_violations: usize,
    pub failed_stages: usize,
}

/// The pipeline's JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub tool_version: String,
    pub seed: u64,
    /// Every derived random stream, by label.
    pub seeds: BTreeMap<String, u64>,
    pub config: PipelineConfig,
    /// Definitions of the formula ids cited by the blocks below.
    pub formulas: BTreeMap<String, String>,
    pub layers: Vec<String>,
    pub sparsity: Vec<RunSparsity>,
    pub jaccard: Option<JaccardBlock>,
    pub consensus: Option<ConsensusBlock>,
    pub profiles: Option<ProfilesBlock>,
    pub spectral: Option<SpectralBlock>,
    pub bounds: Option<BoundsBlock>,
    pub masks: Option<MasksBlock>,
    pub failures: Vec<LayerFailure>,
    pub notes: Vec<LayerNote>,
    pub findings: Findings,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Parse(format!("cannot encode report: {e}")))
    }

    /// 1 when bound violations were found, else 0.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.findings.bound_violations > 0)
    }
}

/// File-system friendly form of a layer name.
pub fn file_stem(layer: &str) -> String {
    layer
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_file(
    out: &Path,
    rel: &str,
    write: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<String> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(rel.to_string())
}

/// Pooled overlap of one recipe with one run's updates.
#[derive(Clone, Default)]
struct OverlapTally {
    layers: Vec<LayerOverlap>,
    intersection: u64,
    updated: u64,
    selected: u64,
    entries: u64,
}

/// Per-run, per-recipe accumulators.
struct Accumulators {
    sparsity: Vec<Vec<LayerSparsity>>,
    drift: Vec<Vec<Vec<LayerDrift>>>,
    bounds: Vec<Vec<LayerBounds>>,
    overlaps: Vec<Vec<OverlapTally>>,
    recipe_totals: Vec<(u64, u64)>,
    jaccard: Vec<JaccardMatrix>,
    consensus: Vec<ConsensusSummary>,
    profiles: Vec<ProfileSummary>,
    failures: Vec<LayerFailure>,
    notes: Vec<LayerNote>,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    h0: &'a CheckpointHandle,
    runs: &'a [CheckpointHandle],
    recipes: Vec<MaskRecipe>,
    labels: Vec<String>,
    reference: Option<usize>,
    kyfan: Vec<usize>,
    writers: Vec<Option<MaskArchiveWriter>>,
}

impl Accumulators {
    fn fail(&mut self, layer: &str, stage: &str, e: Error) {
        log::warn!("{layer}: {stage} failed: {e}");
        self.failures.push(LayerFailure {
            layer: layer.to_string(),
            stage: stage.to_string(),
            error: e.to_string(),
        });
    }

    fn note(&mut self, layer: &str, note: String) {
        self.notes.push(LayerNote {
            layer: layer.to_string(),
            note,
        });
    }
}

/// Effective rank for a layer: `min(k, min(m, n) - 1)`, or `None` when the
/// layer is too small for any spectral analysis.
fn effective_k(k: usize, rows: usize, cols: usize) -> Option<usize> {
    let limit = rows.min(cols).checked_sub(1)?;
    (limit >= 1).then(|| k.min(limit))
}

/// Runs the configured analyses and writes `report.json` plus the CSVs and
/// mask archives into the output directory.
///
/// Layers are processed one at a time; see [`crate::alloc`] for the
/// allocator setting this applies so peak memory stays flat across layers.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Report> {
    cfg.validate()?;
    crate::alloc::return_large_buffers_to_os();
    let workers = resolve_workers(cfg.workers)?;
    log::info!("pipeline: {workers} worker(s)");
    with_workers(workers, || run_inner(cfg))?
}

fn run_inner(cfg: &PipelineConfig) -> Result<Report> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let h0 = open_checkpoint(&cfg.base)?;
    let runs = cfg
        .finetuned
        .iter()
        .map(open_checkpoint)
        .collect::<Result<Vec<_>>>()?;
    let mut names = Vec::new();
    for h in &runs {
        names = check_same_layers(&h0, h, &cfg.filter)?;
    }
    let n_runs = runs.len();

    let mut seeds = BTreeMap::from([("root".to_string(), cfg.seed)]);
    let labels = cfg.masks.recipe_labels();
    let recipes = if cfg.masks.enabled {
        cfg.masks.seeded_recipes(cfg.seed)
    } else {
        Vec::new()
    };
    for (label, r) in labels.iter().zip(&recipes) {
        if r.kind == MaskKind::RandomMatched {
            seeds.insert(format!("masks/{label}"), r.seed);
        }
    }
    let mut writers = Vec::new();
    for (label, r) in labels.iter().zip(&recipes) {
        writers.push(if cfg.masks.export {
            Some(MaskArchiveWriter::create(
                out.join("masks").join(label),
                label,
                r,
            )?)
        } else {
            None
        });
    }
    let kyfan = if cfg.spectral.kyfan.is_empty() {
        cfg.spectral.k.clone()
    } else {
        cfg.spectral.kyfan.clone()
    };
    let mut ctx = Ctx {
        cfg,
        h0: &h0,
        runs: &runs,
        recipes,
        labels,
        reference: cfg.masks.reference_index(),
        kyfan,
        writers,
    };
    let mut acc = Accumulators {
        sparsity: vec![Vec::new(); n_runs],
        drift: vec![vec![Vec::new(); cfg.spectral.k.len()]; n_runs],
        bounds: vec![Vec::new(); n_runs],
        overlaps: vec![vec![OverlapTally::default(); n_runs]; ctx.recipes.len()],
        recipe_totals: vec![(0, 0); ctx.recipes.len()],
        jaccard: Vec::new(),
        consensus: Vec::new(),
        profiles: Vec::new(),
        failures: Vec::new(),
        notes: Vec::new(),
    };

    for name in &names {
        log::info!("layer {name}");
        process_layer(&mut ctx, &mut acc, name);
    }

    // assemble
    let probe_formula = match cfg.probe {
        ProbeMode::Bf16(_) => "sparsity.bf16_probe/1",
        ProbeMode::F32Exact => "sparsity.f32_exact/1",
    };
    let mut sparsity = Vec::new();
    let mut sparsity_csv = String::from("run,layer,changed,total,sparsity\n");
    for (r, layers) in acc.sparsity.iter().enumerate() {
        for l in layers {
            sparsity_csv.push_str(&format!(
                "{r},{},{},{},{}\n",
                l.name, l.changed, l.total, l.sparsity
            ));
        }
        sparsity.push(RunSparsity {
            run: r,
            checkpoint: cfg.finetuned[r].display().to_string(),
            formula: formula(probe_formula),
            report: assemble_sparsity(
                &h0,
                &runs[r],
                &cfg.filter,
                &cfg.probe,
                &names,
                layers.clone(),
            ),
        });
    }
    write_file(out, "sparsity.csv", |b| {
        b.extend_from_slice(sparsity_csv.as_bytes());
        Ok(())
    })?;

    let jaccard = if cfg.analytics.jaccard && n_runs >= 2 {
        let mut csv = String::from("layer,run_a,run_b,jaccard\n");
        for m in &acc.jaccard {
            for (a, row) in m.values.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    csv.push_str(&format!("{},{a},{b},{v}\n", m.layer_name));
                }
            }
        }
        let rel = write_file(out, "jaccard.csv", |b| {
            b.extend_from_slice(csv.as_bytes());
            Ok(())
        })?;
        let n = acc.jaccard.len().max(1) as f64;
        let baselines: Vec<f64> = acc.jaccard.iter().filter_map(|m| m.baseline).collect();
        Some(JaccardBlock {
            formula: formula("jaccard.pairwise/1"),
            baseline_formula: formula("jaccard.bernoulli_baseline/1"),
            mean_off_diagonal: acc.jaccard.iter().map(|m| m.mean_off_diagonal).sum::<f64>() / n,
            mean_baseline: (!baselines.is_empty())
                .then(|| baselines.iter().sum::<f64>() / baselines.len() as f64),
            layers: std::mem::take(&mut acc.jaccard),
            csv: rel,
        })
    } else {
        None
    };
    let consensus = (cfg.analytics.consensus && n_runs >= 2).then(|| ConsensusBlock {
        formula: formula("consensus.ratio/1"),
        runs: n_runs,
        layers: std::mem::take(&mut acc.consensus),
    });
    let profiles = cfg.analytics.profiles.then(|| ProfilesBlock {
        formula: formula("profiles.row_col_ratio/1"),
        window: cfg.analytics.window,
        layers: std::mem::take(&mut acc.profiles),
    });

    let spectral = if cfg.spectral.enabled {
        let mut blocks = Vec::new();
        for (r, per_k) in acc.drift.iter().enumerate() {
            for (ki, layers) in per_k.iter().enumerate() {
                let k = cfg.spectral.k[ki];
                let report = DriftReport {
                    layers: layers.clone(),
                };
                let rel = write_file(out, &format!("spectral/run{r}_k{k}.csv"), |b| {
                    report.write_csv(b)
                })?;
                blocks.push(RunDrift {
                    run: r,
                    k,
                    layers: report.layers,
                    csv: rel,
                });
            }
        }
        Some(SpectralBlock {
            formulas: [
                "spectral.principal_angles/1",
                "spectral.nss/1",
                "spectral.kyfan/1",
            ]
            .iter()
            .map(|f| formula(f))
            .collect(),
            route: cfg.spectral.route,
            runs: blocks,
        })
    } else {
        None
    };
    let mut bound_violations = 0;
    let bounds = (cfg.spectral.enabled && cfg.spectral.bounds).then(|| BoundsBlock {
        formula: formula("bounds.suite/1"),
        runs: acc
            .bounds
            .iter()
            .enumerate()
            .map(|(r, layers)| {
                let violations = layers.iter().map(|l| l.report.violations().count()).sum();
                bound_violations += violations;
                RunBounds {
                    run: r,
                    layers: layers.clone(),
                    violations,
                }
            })
            .collect(),
    });

    let masks = if cfg.masks.enabled {
        let mut blocks = Vec::new();
        let writers = std::mem::take(&mut ctx.writers);
        for (i, (w, r)) in writers.into_iter().zip(&ctx.recipes).enumerate() {
            let label = &ctx.labels[i];
            let archive = match w {
                Some(w) => {
                    w.finish()?;
                    Some(format!("masks/{label}"))
                }
                None => None,
            };
            let (count, entries) = acc.recipe_totals[i];
            let overlaps = if cfg.masks.overlap {
                acc.overlaps[i]
                    .iter_mut()
                    .enumerate()
                    .map(|(run, t)| RunOverlap {
                        run,
                        ratio: if t.updated == 0 {
                            0.0
                        } else {
                            t.intersection as f64 / t.updated as f64
                        },
                        random_baseline: if t.entries == 0 {
                            0.0
                        } else {
                            t.selected as f64 / t.entries as f64
                        },
                        layers: std::mem::take(&mut t.layers),
                    })
                    .collect()
            } else {
                Vec::new()
            };
            blocks.push(RecipeBlock {
                label: label.clone(),
                formula: formula(&format!("masks.{}/1", kind_label(r.kind))),
                recipe: r.clone(),
                archive,
                count,
                entries,
                density: if entries == 0 {
                    0.0
                } else {
                    count as f64 / entries as f64
                },
                overlap_formula: cfg.masks.overlap.then(|| formula("overlap.ratio/1")),
                overlaps,
            });
        }
        Some(MasksBlock { recipes: blocks })
    } else {
        None
    };

    let report = Report {
        schema: REPORT_SCHEMA.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        seeds,
        config: cfg.clone(),
        formulas: FORMULAS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        layers: names,
        sparsity,
        jaccard,
        consensus,
        profiles,
        spectral,
        bounds,
        masks,
        findings: Findings {
            bound_violations,
            failed_stages: acc.failures.len(),
        },
        failures: acc.failures,
        notes: acc.notes,
    };
    let json = report.to_json()?;
    write_file(out, "report.json", |b| {
        b.extend_from_slice(json.as_bytes());
        Ok(())
    })?;
    Ok(report)
}

fn load(h: &CheckpointHandle, name: &str) -> Result<WeightMatrix> {
    h.load_vector(name)
}

fn process_layer(ctx: &mut Ctx<'_>, acc: &mut Accumulators, name: &str) {
    let cfg = ctx.cfg;
    let w0 = match load(ctx.h0, name) {
        Ok(w) => w,
        Err(e) => return acc.fail(name, "load", e),
    };
    let (m, n) = w0.shape();
    let spectral_ks: Vec<Option<usize>> = cfg
        .spectral
        .k
        .iter()
        .map(|&k| effective_k(k, m, n))
        .collect();
    let recipe_ks: Vec<Option<usize>> = ctx
        .recipes
        .iter()
        .map(|r| {
            if r.needs_spectrum() {
                effective_k(r.k, m, n)
            } else {
                None
            }
        })
        .collect();
    for (&k, eff) in cfg
        .spectral
        .k
        .iter()
        .zip(&spectral_ks)
        .chain(ctx.recipes.iter().map(|r| &r.k).zip(&recipe_ks))
    {
        if let Some(e) = eff {
            if *e != k {
                acc.note(name, format!("rank {k} clamped to {e} for a {m}x{n} layer"));
            }
        }
    }
    let mut k_max = 0;
    if cfg.spectral.enabled {
        k_max = spectral_ks.iter().flatten().copied().max().unwrap_or(0);
    }
    k_max = k_max.max(recipe_ks.iter().flatten().copied().max().unwrap_or(0));

    let mut s0: Option<SpectralSummary> = None;
    if k_max > 0 {
        match svd_topk_source(name, &w0, k_max, cfg.spectral.route) {
            Ok(s) => s0 = Some(s),
            Err(e) => acc.fail(name, "spectral_base", e),
        }
    } else if cfg.spectral.enabled && m.min(n) < 2 {
        acc.note(
            name,
            format!("{m}x{n} layer is too small for spectral analysis"),
        );
    }

    // stream every run against the base
    let mut updates: Vec<Option<Mask>> = Vec::with_capacity(ctx.runs.len());
    for (r, h) in ctx.runs.iter().enumerate() {
        let w1 = match load(h, name) {
            Ok(w) => w,
            Err(e) => {
                acc.fail(name, &format!("load_run{r}"), e);
                updates.push(None);
                continue;
            }
        };
        match update_mask(&w0, &w1, &cfg.probe) {
            Ok(mask) => {
                acc.sparsity[r].push(LayerSparsity::from_mask(&mask));
                if cfg.analytics.profiles {
                    match profile(cfg, r, &mask) {
                        Ok(p) => acc.profiles.push(p),
                        Err(e) => acc.fail(name, &format!("profiles_run{r}"), e),
                    }
                }
                updates.push(Some(mask));
            }
            Err(e) => {
                acc.fail(name, &format!("probe_run{r}"), e);
                updates.push(None);
            }
        }
        if cfg.spectral.enabled {
            if let Some(s0) = &s0 {
                if let Err(e) = drift_for_run(ctx, acc, r, s0, &w0, &w1, &spectral_ks) {
                    acc.fail(name, &format!("spectral_run{r}"), e);
                }
            }
        }
    }

    let present: Vec<&Mask> = updates.iter().flatten().collect();
    if present.len() >= 2 && present.len() == updates.len() {
        let owned: Vec<Mask> = present.iter().map(|m| (*m).clone()).collect();
        if cfg.analytics.jaccard {
            match jaccard_matrix(&owned) {
                Ok(j) => acc.jaccard.push(j),
                Err(e) => acc.fail(name, "jaccard", e),
            }
        }
        if cfg.analytics.consensus {
            match consensus_summary(cfg, &owned) {
                Ok(c) => acc.consensus.push(c),
                Err(e) => acc.fail(name, "consensus", e),
            }
        }
    }

    if !cfg.masks.enabled || w0.rows() < 1 {
        return;
    }
    let writers = &mut ctx.writers;
    let labels = &ctx.labels;
    build_layer_masks(
        &w0,
        s0.as_ref(),
        &ctx.recipes,
        &recipe_ks,
        ctx.reference,
        |i, result| {
            let mask = match result {
                Ok(m) => m,
                Err(e) => return acc.fail(name, &format!("mask_{}", labels[i]), e),
            };
            acc.recipe_totals[i].0 += mask.count() as u64;
            acc.recipe_totals[i].1 += mask.len() as u64;
            if let Some(w) = writers[i].as_mut() {
                if let Err(e) = w.add(mask) {
                    acc.fail(name, &format!("export_{}", labels[i]), e);
                }
            }
            if !cfg.masks.overlap {
                return;
            }
            for (r, u) in updates.iter().enumerate() {
                let Some(u) = u else { continue };
                match overlap_ratio(mask, u) {
                    Ok(o) => {
                        let slot = &mut acc.overlaps[i][r];
                        slot.layers.push(LayerOverlap {
                            layer: name.to_string(),
                            ratio: o.ratio,
                            random_baseline: o.random_baseline,
                        });
                        slot.intersection += mask.intersection_count(u).unwrap_or(0) as u64;
                        slot.updated += u.count() as u64;
                        slot.selected += mask.count() as u64;
                        slot.entries += mask.len() as u64;
                    }
                    // an untouched layer has no overlap to measure
                    Err(Error::Domain(_)) => {}
                    Err(e) => acc.fail(name, &format!("overlap_{}_run{r}", labels[i]), e),
                }
            }
        },
    );
}

/// Builds every recipe's mask for one layer, handing each (or its error) to
/// `sink` with the recipe index. Principal kinds use `ks` (already clamped)
/// and the base spectrum `s0`; `random_matched` copies recipe `reference`,
/// so non-random recipes are built first.
fn build_layer_masks(
    w0: &WeightMatrix,
    s0: Option<&SpectralSummary>,
    recipes: &[MaskRecipe],
    ks: &[Option<usize>],
    reference: Option<usize>,
    mut sink: impl FnMut(usize, Result<&Mask>),
) {
    let (m, n) = w0.shape();
    let mut built: Vec<Option<Mask>> = vec![None; recipes.len()];
    let order: Vec<usize> = (0..recipes.len())
        .filter(|&i| recipes[i].kind != MaskKind::RandomMatched)
        .chain((0..recipes.len()).filter(|&i| recipes[i].kind == MaskKind::RandomMatched))
        .collect();
    for i in order {
        let result = (|| -> Result<Mask> {
            let mut r = recipes[i].clone();
            let mut summary = None;
            if r.needs_spectrum() {
                let k = ks[i].ok_or_else(|| {
                    Error::Shape(format!(
                        "{m}x{n} layer is too small for a rank-k reconstruction"
                    ))
                })?;
                r.k = k;
                let s0 = s0.ok_or_else(|| Error::Numerics("base spectrum unavailable".into()))?;
                summary = Some(s0.truncated(k)?);
            }
            let reference = match r.kind {
                MaskKind::RandomMatched => reference.and_then(|j| built[j].as_ref()),
                _ => None,
            };
            build_recipe_mask_with(w0, &r, summary.as_ref(), reference)
        })();
        match result {
            Ok(mask) => {
                sink(i, Ok(&mask));
                built[i] = Some(mask);
            }
            Err(e) => sink(i, Err(e)),
        }
    }
}

fn drift_for_run(
    ctx: &Ctx<'_>,
    acc: &mut Accumulators,
    r: usize,
    s0: &SpectralSummary,
    w0: &WeightMatrix,
    w1: &WeightMatrix,
    ks: &[Option<usize>],
) -> Result<()> {
    let cfg = ctx.cfg;
    let k_max = ks.iter().flatten().copied().max();
    let Some(k_max) = k_max else { return Ok(()) };
    let s1 = svd_topk_source(&w1.name, w1, k_max, cfg.spectral.route)?;
    for (ki, k) in ks.iter().enumerate() {
        let Some(k) = *k else { continue };
        let (a, b) = (s0.truncated(k)?, s1.truncated(k)?);
        acc.drift[r][ki].push(layer_drift(&a, &b, &ctx.kyfan)?);
        if ki == 0 && cfg.spectral.bounds {
            let d = Difference {
                base: w0,
                tuned: w1,
            };
            let report = bounds_from_summaries(&a, &b, spectral_norm(&d)?, frobenius_norm(&d))?;
            acc.bounds[r].push(LayerBounds {
                layer: w0.name.clone(),
                report,
            });
        }
    }
    Ok(())
}

fn profile(cfg: &PipelineConfig, run: usize, mask: &Mask) -> Result<ProfileSummary> {
    let p = ratio_profiles(mask, cfg.analytics.window)?;
    let rel = format!("profiles/run{run}/{}.csv", file_stem(mask.name()));
    let csv = write_file(&cfg.output_dir, &rel, |b| p.write_csv(b))?;
    Ok(ProfileSummary {
        run,
        layer: mask.name().to_string(),
        max_row_ratio: p.rho.iter().copied().fold(0.0, f64::max),
        max_col_ratio: p.kappa.iter().copied().fold(0.0, f64::max),
        csv,
    })
}

fn consensus_summary(cfg: &PipelineConfig, masks: &[Mask]) -> Result<ConsensusSummary> {
    let c = consensus(masks)?;
    let rel = format!("consensus/{}.csv", file_stem(&c.layer_name));
    let g = cfg.analytics.grid;
    let csv = write_file(&cfg.output_dir, &rel, |b| c.write_grid_csv(b, g, g))?;
    Ok(ConsensusSummary {
        layer: c.layer_name.clone(),
        rows: c.rows,
        cols: c.cols,
        mean: c.mean(),
        unanimous_rows: c.unanimous_rows(),
        csv,
    })
}

/// One archive written by [`export_masks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedArchive {
    pub label: String,
    pub formula: String,
    pub dir: String,
    pub manifest: MaskManifest,
}

/// Result of [`export_masks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskExport {
    pub schema: String,
    pub tool_version: String,
    pub checkpoint: String,
    pub seed: u64,
    pub archives: Vec<ExportedArchive>,
    pub failures: Vec<LayerFailure>,
    pub notes: Vec<LayerNote>,
}

/// Builds the configured selection masks for every filtered layer of one
/// checkpoint and writes one archive per recipe under `out_dir/<label>`.
/// Layers are processed one at a time; per-layer failures are recorded.
pub fn export_masks(
    checkpoint: impl AsRef<Path>,
    filter: &LayerFilter,
    masks: &MasksConfig,
    route: SvdRoute,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<MaskExport> {
    crate::alloc::return_large_buffers_to_os();
    let (checkpoint, out_dir) = (checkpoint.as_ref(), out_dir.as_ref());
    let mut problems = Vec::new();
    for r in [filter.validate(), masks.validate()] {
        match r {
            Err(Error::ConfigList(list)) => problems.extend(list),
            Err(e) => problems.push(e.to_string()),
            Ok(()) => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::ConfigList(problems));
    }
    let h = open_checkpoint(checkpoint)?;
    let labels = masks.recipe_labels();
    let recipes = masks.seeded_recipes(seed);
    let reference = masks.reference_index();
    let mut writers = labels
        .iter()
        .zip(&recipes)
        .map(|(label, r)| MaskArchiveWriter::create(out_dir.join(label), label, r))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Accumulators {
        sparsity: Vec::new(),
        drift: Vec::new(),
        bounds: Vec::new(),
        overlaps: Vec::new(),
        recipe_totals: Vec::new(),
        jaccard: Vec::new(),
        consensus: Vec::new(),
        profiles: Vec::new(),
        failures: Vec::new(),
        notes: Vec::new(),
    };
    for name in h.list_layers(filter) {
        let w = match h.load_vector(&name) {
            Ok(w) => w,
            Err(e) => {
                acc.fail(&name, "load", e);
                continue;
            }
        };
        let (m, n) = w.shape();
        let ks: Vec<Option<usize>> = recipes
            .iter()
            .map(|r| {
                if r.needs_spectrum() {
                    effective_k(r.k, m, n)
                } else {
                    None
                }
            })
            .collect();
        for (r, k) in recipes.iter().zip(&ks) {
            if let Some(k) = k.filter(|&k| k != r.k) {
                acc.note(
                    &name,
                    format!("rank {} clamped to {k} for a {m}x{n} layer", r.k),
                );
            }
        }
        let mut s0 = None;
        if let Some(k_max) = ks.iter().flatten().copied().max() {
            match svd_topk_source(&name, &w, k_max, route) {
                Ok(s) => s0 = Some(s),
                Err(e) => acc.fail(&name, "spectral_base", e),
            }
        }
        build_layer_masks(&w, s0.as_ref(), &recipes, &ks, reference, |i, result| {
            let added = result.and_then(|mask| writers[i].add(mask));
            if let Err(e) = added {
                acc.fail(&name, &format!("mask_{}", labels[i]), e);
            }
        });
    }
    let mut archives = Vec::new();
    for ((w, label), r) in writers.into_iter().zip(&labels).zip(&recipes) {
        archives.push(ExportedArchive {
            label: label.clone(),
            formula: formula(&format!("masks.{}/1", kind_label(r.kind))),
            dir: out_dir.join(label).display().to_string(),
            manifest: w.finish()?,
        });
    }
    Ok(MaskExport {
        schema: REPORT_SCHEMA.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        checkpoint: checkpoint.display().to_string(),
        seed,
        archives,
        failures: acc.failures,
        notes: acc.notes,
    })
}
