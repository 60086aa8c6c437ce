//! `weightscope` command-line front end.
//!
//! Every subcommand prints a JSON document to stdout (or `--json <file>`).
//! Exit codes: 0 success, 1 findings (bound violations, failed invariance or
//! theory checks), 2 configuration or input errors, 3 I/O or archive errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use weightscope::diff::{sparsity_bf16, update_mask, ProbeMode};
use weightscope::geometry::{load_mask_archive, MaskKind, MaskRecipe};
use weightscope::intervention::{
    intervene_checkpoint, verify_invariance_with, EditKind, HeadLayout, InterventionSpec,
    InvarianceOptions, InvarianceReport, LayerTensors, Precision, DEFAULT_NAME_TEMPLATE,
};
use weightscope::pipeline::{
    export_masks, file_stem, resolve_workers, run_pipeline, with_workers, AnalyticsConfig,
    MasksConfig, PipelineConfig, Report, SpectralConfig, WORKERS_ENV,
};
use weightscope::seed::derive_seed;
use weightscope::spectral::SvdRoute;
use weightscope::theory::{run_theory_bench, TheoryBenchConfig};
use weightscope::{open_checkpoint, Error, LayerFilter, ProbeConfig, Result, ZeroPolicy};

#[derive(Parser)]
#[command(
    name = "weightscope",
    version,
    about = "Diagnose how fine-tuning moved a model's weights"
)]
struct Cli {
    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    json: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Update sparsity of a base/fine-tuned pair.
    Sparsity {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Write per-layer update masks (`<layer>.mask` files).
    Mask {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Pairwise Jaccard overlap of update masks across runs.
    Jaccard(AnalysisArgs),
    /// Consensus ratio maps across runs (grid CSVs).
    Consensus {
        #[command(flatten)]
        common: AnalysisArgs,
        /// Downsample each map to at most GRID x GRID cells.
        #[arg(long, default_value_t = 256)]
        grid: usize,
    },
    /// Row and column update-ratio profiles.
    Profiles {
        #[command(flatten)]
        common: AnalysisArgs,
        /// Odd moving-average window.
        #[arg(long, default_value_t = 9)]
        window: usize,
    },
    /// Principal angles, spectral shift and Ky Fan drift.
    Spectral {
        #[command(flatten)]
        common: AnalysisArgs,
        #[command(flatten)]
        spectral: SpectralArgs,
    },
    /// Perturbation-bound suite on the actual weight change.
    Bounds {
        #[command(flatten)]
        common: AnalysisArgs,
        #[command(flatten)]
        spectral: SpectralArgs,
    },
    /// Principal-weight mask archive of one checkpoint.
    PrincipalMask {
        #[command(flatten)]
        source: MaskSourceArgs,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Overlap of a mask archive with the update masks of a pair.
    Overlap {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        probe: ProbeArgs,
        /// Mask archive directory (with manifest.json).
        #[arg(long, value_name = "DIR")]
        masks: PathBuf,
    },
    /// Build and export selection-mask archives.
    ExportMasks {
        #[command(flatten)]
        source: MaskSourceArgs,
        /// Recipes to build (repeatable).
        #[arg(long = "recipe", value_enum, default_values_t = [RecipeArg::Principal, RecipeArg::LowMagnitude, RecipeArg::Safe, RecipeArg::RandomMatched])]
        recipes: Vec<RecipeArg>,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Low-magnitude fraction of the safe mask.
        #[arg(long, default_value_t = 0.5)]
        alpha_low: f64,
        /// Recipe label random_matched copies (default: safe).
        #[arg(long)]
        reference: Option<String>,
    },
    /// Apply a function-preserving rotation/permutation to attention layers.
    Intervene {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        edit: EditArgs,
        #[arg(long, value_enum, default_value_t = KindArg::Rotate)]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Provenance record (default: `<output>.provenance.json`).
        #[arg(long)]
        provenance: Option<PathBuf>,
    },
    /// Check that two checkpoints' attention layers compute the same function.
    VerifyInvariance {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[command(flatten)]
        edit: EditArgs,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Numerical checks of the KL-geometry lemmas on categorical policies.
    TheoryCheck {
        /// TOML file with bench settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run every configured analysis and write a report directory.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone)]
struct PairArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    finetuned: Vec<PathBuf>,
}

#[derive(Args, Clone)]
struct ProbeArgs {
    /// Relative tolerance of the bf16 probe.
    #[arg(long)]
    eta: Option<f64>,
    /// Compare f32 payloads exactly instead of the bf16 probe.
    #[arg(long, conflicts_with = "eta")]
    f32_exact: bool,
    /// Treat +0 and -0 as different values.
    #[arg(long)]
    bit_exact_zeros: bool,
}

impl ProbeArgs {
    fn mode(&self) -> Result<ProbeMode> {
        if self.f32_exact {
            return Ok(ProbeMode::F32Exact);
        }
        let mut cfg = match self.eta {
            Some(eta) => ProbeConfig::new(eta)?,
            None => ProbeConfig::default(),
        };
        if self.bit_exact_zeros {
            cfg = cfg.with_zero_policy(ZeroPolicy::BitExact);
        }
        Ok(ProbeMode::Bf16(cfg))
    }

    fn overrides(&self) -> bool {
        self.f32_exact || self.eta.is_some() || self.bit_exact_zeros
    }
}

#[derive(Args, Clone, Default)]
struct FilterArgs {
    /// Include every tensor (norms, biases, embeddings, LM head).
    #[arg(long)]
    all: bool,
    /// Name globs to include (repeatable; replaces the default `*`).
    #[arg(long = "include", value_name = "GLOB")]
    include: Vec<String>,
    /// Name globs to exclude (repeatable; added to the defaults).
    #[arg(long = "exclude", value_name = "GLOB")]
    exclude: Vec<String>,
}

impl FilterArgs {
    fn apply(&self, mut f: LayerFilter) -> LayerFilter {
        if self.all {
            f = LayerFilter::all();
        }
        if !self.include.is_empty() {
            f.include = self.include.clone();
        }
        f.exclude.extend(self.exclude.iter().cloned());
        f
    }

    fn overrides(&self) -> bool {
        self.all || !self.include.is_empty() || !self.exclude.is_empty()
    }

    fn filter(&self) -> LayerFilter {
        self.apply(LayerFilter::default())
    }
}

#[derive(Args, Clone)]
struct AnalysisArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[command(flatten)]
    probe: ProbeArgs,
    #[command(flatten)]
    filter: FilterArgs,
    /// Directory for CSVs and the full report.
    #[arg(long, value_name = "DIR", default_value = "weightscope-out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct SpectralArgs {
    /// Ranks (repeatable).
    #[arg(long = "k", default_values_t = [64])]
    k: Vec<usize>,
    /// Ky Fan orders (repeatable; default: the ranks).
    #[arg(long = "kyfan")]
    kyfan: Vec<usize>,
    #[arg(long, value_enum, default_value_t = RouteArg::Auto)]
    route: RouteArg,
}

#[derive(Args, Clone)]
struct MaskSourceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = RouteArg::Auto)]
    route: RouteArg,
}

#[derive(Args, Clone)]
struct EditArgs {
    /// Layer indices (comma separated or repeated).
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    layers: Vec<usize>,
    #[arg(long)]
    head_dim: usize,
    #[arg(long)]
    q_heads: usize,
    #[arg(long)]
    kv_heads: usize,
    /// Tensor name pattern with `{layer}` and `{proj}` placeholders.
    #[arg(long, default_value = DEFAULT_NAME_TEMPLATE)]
    name_template: String,
}

impl EditArgs {
    fn layout(&self) -> Result<HeadLayout> {
        HeadLayout::new(self.head_dim, self.q_heads, self.kv_heads)
    }
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// TOML configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    finetuned: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Spectral ranks (repeatable).
    #[arg(long = "k")]
    k: Vec<usize>,
    #[command(flatten)]
    probe: ProbeArgs,
    #[command(flatten)]
    filter: FilterArgs,
    /// Also run the perturbation-bound suite.
    #[arg(long)]
    bounds: bool,
    #[arg(long)]
    no_spectral: bool,
    #[arg(long)]
    no_masks: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RouteArg {
    Auto,
    Direct,
    Gram,
}

impl From<RouteArg> for SvdRoute {
    fn from(r: RouteArg) -> Self {
        match r {
            RouteArg::Auto => SvdRoute::Auto,
            RouteArg::Direct => SvdRoute::Direct,
            RouteArg::Gram => SvdRoute::Gram,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RecipeArg {
    Principal,
    PrincipalComplement,
    LowMagnitude,
    Safe,
    RandomMatched,
}

impl From<RecipeArg> for MaskKind {
    fn from(r: RecipeArg) -> Self {
        match r {
            RecipeArg::Principal => MaskKind::Principal,
            RecipeArg::PrincipalComplement => MaskKind::PrincipalComplement,
            RecipeArg::LowMagnitude => MaskKind::LowMagnitude,
            RecipeArg::Safe => MaskKind::Safe,
            RecipeArg::RandomMatched => MaskKind::RandomMatched,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Rotate,
    Permute,
    RotatePermute,
}

impl From<KindArg> for EditKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Rotate => EditKind::Rotate,
            KindArg::Permute => EditKind::Permute,
            KindArg::RotatePermute => EditKind::RotatePermute,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let workers = resolve_workers(cli.workers)?;
    with_workers(workers, || dispatch(cli, workers))?
}

fn emit<T: Serialize>(value: &T, dest: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Parse(format!("cannot encode JSON: {e}")))?
        + "\n";
    match dest {
        Some(path) => fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| Error::Io {
                path: PathBuf::from("<stdout>"),
                source,
            }),
    }
}

/// A pipeline configuration with every analysis switched off.
fn bare_config(a: &AnalysisArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::new(&a.pair.base, a.pair.finetuned.clone(), &a.out_dir);
    cfg.seed = a.seed;
    cfg.filter = a.filter.filter();
    cfg.probe = a.probe.mode()?;
    cfg.analytics = AnalyticsConfig {
        jaccard: false,
        consensus: false,
        profiles: false,
        ..AnalyticsConfig::default()
    };
    cfg.spectral.enabled = false;
    cfg.masks.enabled = false;
    Ok(cfg)
}

fn spectral_config(s: &SpectralArgs, bounds: bool) -> SpectralConfig {
    SpectralConfig {
        enabled: true,
        k: s.k.clone(),
        kyfan: s.kyfan.clone(),
        route: s.route.into(),
        bounds,
    }
}

fn run_bare(cfg: PipelineConfig, workers: usize) -> Result<Report> {
    let mut cfg = cfg;
    cfg.workers = Some(workers);
    run_pipeline(&cfg)
}

fn dispatch(cli: &Cli, workers: usize) -> Result<u8> {
    let out = cli.json.as_deref();
    match &cli.command {
        Command::Sparsity {
            pair,
            probe,
            filter,
        } => {
            let h0 = open_checkpoint(&pair.base)?;
            let mode = probe.mode()?;
            let filter = filter.filter();
            let reports = pair
                .finetuned
                .iter()
                .map(|p| sparsity_bf16(&h0, &open_checkpoint(p)?, &filter, &mode))
                .collect::<Result<Vec<_>>>()?;
            if reports.len() == 1 {
                emit(&reports[0], out)?;
            } else {
                emit(&reports, out)?;
            }
            Ok(0)
        }
        Command::Mask {
            pair,
            probe,
            filter,
            out_dir,
        } => {
            #[derive(Serialize)]
            struct Written {
                run: usize,
                layer: String,
                file: String,
                count: usize,
                density: f64,
            }
            let h0 = open_checkpoint(&pair.base)?;
            let mode = probe.mode()?;
            let filter = filter.filter();
            let mut written = Vec::new();
            for (r, path) in pair.finetuned.iter().enumerate() {
                let h1 = open_checkpoint(path)?;
                let names = weightscope::diff::check_same_layers(&h0, &h1, &filter)?;
                let dir = if pair.finetuned.len() == 1 {
                    out_dir.clone()
                } else {
                    out_dir.join(format!("run{r}"))
                };
                fs::create_dir_all(&dir).map_err(|source| Error::Io {
                    path: dir.clone(),
                    source,
                })?;
                for name in names {
                    let mask =
                        update_mask(&h0.load_vector(&name)?, &h1.load_vector(&name)?, &mode)?;
                    let file = dir.join(format!("{}.mask", file_stem(&name)));
                    mask.save(&file)?;
                    written.push(Written {
                        run: r,
                        layer: name,
                        file: file.display().to_string(),
                        count: mask.count(),
                        density: mask.density(),
                    });
                }
            }
            emit(&written, out)?;
            Ok(0)
        }
        Command::Jaccard(a) => {
            let mut cfg = bare_config(a)?;
            cfg.analytics.jaccard = true;
            let report = run_bare(cfg, workers)?;
            let block = report.jaccard.ok_or(Error::Arity {
                needed: 2,
                got: a.pair.finetuned.len(),
            })?;
            emit(&block, out)?;
            Ok(0)
        }
        Command::Consensus { common, grid } => {
            let mut cfg = bare_config(common)?;
            cfg.analytics.consensus = true;
            cfg.analytics.grid = *grid;
            let report = run_bare(cfg, workers)?;
            let block = report.consensus.ok_or(Error::Arity {
                needed: 2,
                got: common.pair.finetuned.len(),
            })?;
            emit(&block, out)?;
            Ok(0)
        }
        Command::Profiles { common, window } => {
            let mut cfg = bare_config(common)?;
            cfg.analytics.profiles = true;
            cfg.analytics.window = *window;
            let report = run_bare(cfg, workers)?;
            emit(&report.profiles, out)?;
            Ok(0)
        }
        Command::Spectral { common, spectral } => {
            let mut cfg = bare_config(common)?;
            cfg.spectral = spectral_config(spectral, false);
            let report = run_bare(cfg, workers)?;
            emit(&SpectralOutput::from(&report), out)?;
            Ok(0)
        }
        Command::Bounds { common, spectral } => {
            let mut cfg = bare_config(common)?;
            cfg.spectral = spectral_config(spectral, true);
            let report = run_bare(cfg, workers)?;
            emit(&SpectralOutput::from(&report), out)?;
            Ok(report.exit_code() as u8)
        }
        Command::PrincipalMask { source, k, alpha } => {
            let masks = MasksConfig {
                recipes: vec![MaskRecipe::new(MaskKind::Principal)
                    .with_k(*k)
                    .with_alpha(*alpha)],
                ..MasksConfig::default()
            };
            mask_export(source, &masks, out)
        }
        Command::ExportMasks {
            source,
            recipes,
            k,
            alpha,
            alpha_low,
            reference,
        } => {
            let masks = MasksConfig {
                recipes: recipes
                    .iter()
                    .map(|&r| {
                        MaskRecipe::new(r.into())
                            .with_k(*k)
                            .with_alpha(*alpha)
                            .with_alpha_low(*alpha_low)
                    })
                    .collect(),
                reference: reference.clone(),
                ..MasksConfig::default()
            };
            mask_export(source, &masks, out)
        }
        Command::Overlap { pair, probe, masks } => overlap(pair, probe, masks, out),
        Command::Intervene {
            input,
            output,
            edit,
            kind,
            seed,
            provenance,
        } => {
            let mut spec =
                InterventionSpec::new(edit.layers.clone(), (*kind).into(), edit.layout()?, *seed);
            spec.name_template = edit.name_template.clone();
            let record = intervene_checkpoint(input, output, &spec)?;
            let path = provenance.clone().unwrap_or_else(|| {
                let mut p = output.clone().into_os_string();
                p.push(".provenance.json");
                PathBuf::from(p)
            });
            emit(&record, Some(&path))?;
            emit(&record, out)?;
            let failed = record.layers.iter().any(|l| !l.exact_check.passed);
            Ok(u8::from(failed))
        }
        Command::VerifyInvariance {
            original,
            edited,
            edit,
            trials,
            tol,
            precision,
            seed,
        } => {
            #[derive(Serialize)]
            struct LayerCheck {
                layer: usize,
                report: InvarianceReport,
            }
            #[derive(Serialize)]
            struct Output {
                layout: HeadLayout,
                seed: u64,
                passed: bool,
                layers: Vec<LayerCheck>,
            }
            let layout = edit.layout()?;
            let mut spec =
                InterventionSpec::new(edit.layers.clone(), EditKind::Rotate, layout, *seed);
            spec.name_template = edit.name_template.clone();
            let (h0, h1) = (open_checkpoint(original)?, open_checkpoint(edited)?);
            let precision = match precision {
                PrecisionArg::F64 => Precision::F64,
                PrecisionArg::F32 => Precision::F32,
            };
            let mut layers = Vec::new();
            for &layer in &edit.layers {
                let a = LayerTensors::load(&h0, &spec, layer)?;
                let b = LayerTensors::load(&h1, &spec, layer)?;
                let opts = InvarianceOptions::new(*trials, *tol)
                    .with_precision(precision)
                    .with_seed(derive_seed(*seed, &format!("verify-invariance/{layer}")));
                let report = verify_invariance_with(&a.weights, &b.weights, &layout, &opts)?;
                layers.push(LayerCheck { layer, report });
            }
            let passed = layers.iter().all(|l| l.report.passed);
            emit(
                &Output {
                    layout,
                    seed: *seed,
                    passed,
                    layers,
                },
                out,
            )?;
            Ok(u8::from(!passed))
        }
        Command::TheoryCheck {
            config,
            seed,
            trials,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|source| Error::Io {
                        path: path.clone(),
                        source,
                    })?;
                    toml::from_str::<TheoryBenchConfig>(&text).map_err(|e| {
                        Error::Config(format!("{}: {}", path.display(), e.message()))
                    })?
                }
                None => TheoryBenchConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(t) = trials {
                cfg.quadratic_trials = *t;
            }
            let card = run_theory_bench(&cfg)?;
            emit(&card, out)?;
            Ok(u8::from(!card.passed))
        }
        Command::Pipeline(args) => {
            let cfg = pipeline_config(args, cli.workers, workers)?;
            let report = run_pipeline(&cfg)?;
            emit(&report, out)?;
            Ok(report.exit_code() as u8)
        }
    }
}

/// Spectral and bounds blocks of a report, for the two spectral commands.
#[derive(Serialize)]
struct SpectralOutput {
    spectral: Option<weightscope::pipeline::SpectralBlock>,
    bounds: Option<weightscope::pipeline::BoundsBlock>,
    notes: Vec<weightscope::pipeline::LayerNote>,
    failures: Vec<weightscope::pipeline::LayerFailure>,
}

impl From<&Report> for SpectralOutput {
    fn from(r: &Report) -> Self {
        SpectralOutput {
            spectral: r.spectral.clone(),
            bounds: r.bounds.clone(),
            notes: r.notes.clone(),
            failures: r.failures.clone(),
        }
    }
}

fn mask_export(source: &MaskSourceArgs, masks: &MasksConfig, out: Option<&Path>) -> Result<u8> {
    let export = export_masks(
        &source.checkpoint,
        &source.filter.filter(),
        masks,
        source.route.into(),
        source.seed,
        &source.out_dir,
    )?;
    emit(&export, out)?;
    Ok(0)
}

fn overlap(pair: &PairArgs, probe: &ProbeArgs, masks: &Path, out: Option<&Path>) -> Result<u8> {
    #[derive(Serialize)]
    struct LayerRow {
        layer: String,
        ratio: Option<f64>,
        random_baseline: f64,
    }
    #[derive(Serialize)]
    struct RunRow {
        run: usize,
        checkpoint: String,
        ratio: f64,
        random_baseline: f64,
        layers: Vec<LayerRow>,
    }
    #[derive(Serialize)]
    struct Output {
        formula: &'static str,
        label: String,
        runs: Vec<RunRow>,
    }
    let (manifest, selections) = load_mask_archive(masks)?;
    let mode = probe.mode()?;
    let h0 = open_checkpoint(&pair.base)?;
    let mut runs = Vec::new();
    for (r, path) in pair.finetuned.iter().enumerate() {
        let h1 = open_checkpoint(path)?;
        let (mut inter, mut updated, mut selected, mut entries) = (0u64, 0u64, 0u64, 0u64);
        let mut layers = Vec::new();
        for s in &selections {
            let u = update_mask(
                &h0.load_vector(s.name())?,
                &h1.load_vector(s.name())?,
                &mode,
            )?;
            let i = s.intersection_count(&u)?;
            inter += i as u64;
            updated += u.count() as u64;
            selected += s.count() as u64;
            entries += s.len() as u64;
            layers.push(LayerRow {
                layer: s.name().to_string(),
                ratio: (u.count() > 0).then(|| i as f64 / u.count() as f64),
                random_baseline: s.density(),
            });
        }
        runs.push(RunRow {
            run: r,
            checkpoint: path.display().to_string(),
            ratio: if updated == 0 {
                0.0
            } else {
                inter as f64 / updated as f64
            },
            random_baseline: if entries == 0 {
                0.0
            } else {
                selected as f64 / entries as f64
            },
            layers,
        });
    }
    emit(
        &Output {
            formula: "overlap.ratio/1",
            label: manifest.label,
            runs,
        },
        out,
    )?;
    Ok(0)
}

fn pipeline_config(
    a: &PipelineArgs,
    explicit_workers: Option<usize>,
    workers: usize,
) -> Result<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let base = a
                .base
                .clone()
                .ok_or_else(|| Error::Config("--base or --config is required".into()))?;
            let out = a
                .out_dir
                .clone()
                .ok_or_else(|| Error::Config("--out-dir or --config is required".into()))?;
            PipelineConfig::new(base, a.finetuned.clone(), out)
        }
    };
    if let Some(b) = &a.base {
        cfg.base = b.clone();
    }
    if !a.finetuned.is_empty() {
        cfg.finetuned = a.finetuned.clone();
    }
    if let Some(o) = &a.out_dir {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if !a.k.is_empty() {
        cfg.spectral.k = a.k.clone();
    }
    if a.probe.overrides() {
        cfg.probe = a.probe.mode()?;
    }
    if a.filter.overrides() {
        cfg.filter = a.filter.apply(cfg.filter);
    }
    if a.bounds {
        cfg.spectral.bounds = true;
    }
    if a.no_spectral {
        cfg.spectral.enabled = false;
    }
    if a.no_masks {
        cfg.masks.enabled = false;
    }
    // --workers (or the environment) wins over the file
    if explicit_workers.is_some() || cfg.workers.is_none() {
        cfg.workers = Some(workers);
    }
    Ok(cfg)
}
