//! Numerical checks of KL expansions on categorical softmax policies.
//!
//! A categorical policy over `N` outcomes is parameterised by logits `θ`,
//! `π_θ = softmax(θ)`. Everything here is exact at desk scale: the Fisher
//! information is `diag(p) - p pᵀ`, KL is a finite sum, and the KL-regularised
//! reward maximiser is the exponential tilt `q · exp(R/β) / Z`. The checks
//! cover:
//!
//! - the quadratic expansion `KL(π_{θ+sΔ} ‖ π_θ) = ½ s² ΔᵀFΔ + O(s³)`,
//!   measured as the log-log slope of `|ratio - 1|` against `s`;
//! - the clipping leash `Σ_t |log r_t| ≤ T · max(-log(1-ε), log(1+ε))`;
//! - the tilting argmax, against brute force over a simplex grid;
//! - the weight bound `‖Δ‖ ≤ √(2K/μ)` when `½ΔᵀFΔ ≤ K` and `F ⪰ μI`.
//!
//! Scope: categorical policies only; no claim is made about neural policies.

use faer::{Mat, MatRef, Side};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Softmax policy over `N` outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("logits must be finite and non-empty".into()));
        }
        let probs = softmax(&logits);
        if probs.iter().any(|&p| p <= 0.0) {
            return Err(Error::Domain(
                "logit range too wide: some probability underflows to 0".into(),
            ));
        }
        Ok(CategoricalPolicy { logits, probs })
    }

    /// From probabilities (positive, summing to 1 within 1e-12).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Domain(
                "probabilities must be positive and finite".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("probabilities sum to {total}")));
        }
        Self::from_logits(probs.iter().map(|p| p.ln()).collect())
    }

    /// Uniform logits plus Gaussian noise of standard deviation `spread`.
    pub fn random(n: usize, spread: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::from_logits(
            (0..n)
                .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Fisher information of the logit parameterisation: `diag(p) - p pᵀ`.
pub fn categorical_fisher(p: &CategoricalPolicy) -> Mat<f64> {
    let p = p.probs();
    Mat::from_fn(p.len(), p.len(), |i, j| {
        if i == j {
            p[i] - p[i] * p[i]
        } else {
            -p[i] * p[j]
        }
    })
}

/// `KL(p ‖ q) = Σ p_i log(p_i / q_i)`, computed from logits so that the
/// terms stay accurate when `p` and `q` are close.
pub fn kl_categorical(p: &CategoricalPolicy, q: &CategoricalPolicy) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "policies over {} and {} outcomes",
            p.len(),
            q.len()
        )));
    }
    let d: Vec<f64> = p.logits.iter().zip(&q.logits).map(|(a, b)| a - b).collect();
    // p = q · exp(d) / Z with Z = E_q[exp(d)]
    Ok(tilted_kl(q.probs(), &d, 1.0))
}

/// `KL(q·e^{sΔ}/Z ‖ q)` without cancellation: `Δ` is centred under `q`, after
/// which both `s·E_tilted[Δ]` and `log Z` are `O(s²)` quantities evaluated
/// from `expm1`.
fn tilted_kl(q: &[f64], delta: &[f64], s: f64) -> f64 {
    let mean: f64 = q.iter().zip(delta).map(|(p, d)| p * d).sum();
    let c: Vec<f64> = delta.iter().map(|d| s * (d - mean)).collect();
    // Σ q (e^c - 1) = Σ q (e^c - 1 - c) since Σ q c = 0
    let b: f64 = q.iter().zip(&c).map(|(p, &x)| p * (x.exp_m1() - x)).sum();
    let a: f64 = q.iter().zip(&c).map(|(p, &x)| p * x.exp_m1() * x).sum();
    let kl = a / (1.0 + b) - b.ln_1p();
    kl.max(0.0)
}

/// Quadratic form `ΔᵀFΔ = Var_p(Δ)`.
pub fn fisher_quadratic(p: &CategoricalPolicy, delta: &[f64]) -> f64 {
    let probs = p.probs();
    let mean: f64 = probs.iter().zip(delta).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(delta)
        .map(|(p, d)| p * (d - mean).powi(2))
        .sum()
}

/// Default scales for [`quadratic_kl_check`].
pub const DEFAULT_SCALES: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// Ratio curve of the quadratic expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticKlCurve {
    pub scales: Vec<f64>,
    /// `KL(π_{θ+sΔ} ‖ π_θ) / (½ s² ΔᵀFΔ)` per scale.
    pub ratios: Vec<f64>,
    /// Least-squares slope of `log|ratio - 1|` against `log s`.
    pub slope: f64,
    /// `ΔᵀFΔ`.
    pub curvature: f64,
}

/// Evaluates the quadratic KL expansion along `direction` at each scale.
pub fn quadratic_kl_check(
    p: &CategoricalPolicy,
    direction: &[f64],
    scales: &[f64],
) -> Result<QuadraticKlCurve> {
    if direction.len() != p.len() {
        return Err(Error::Shape(format!(
            "direction has {} entries for {} outcomes",
            direction.len(),
            p.len()
        )));
    }
    if scales.len() < 2 {
        return Err(Error::Domain(
            "need at least two scales to fit a slope".into(),
        ));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite()))
        || scales.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::Domain(
            "scales must be positive and strictly decreasing".into(),
        ));
    }
    if direction.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("direction must be finite".into()));
    }
    let curvature = fisher_quadratic(p, direction);
    let second_moment: f64 = p
        .probs()
        .iter()
        .zip(direction)
        .map(|(p, d)| p * d * d)
        .sum();
    if curvature <= 1e-12 * second_moment || curvature == 0.0 {
        return Err(Error::Domain(
            "direction lies in the Fisher null space (a constant logit shift)".into(),
        ));
    }
    let ratios: Vec<f64> = scales
        .iter()
        .map(|&s| tilted_kl(p.probs(), direction, s) / (0.5 * s * s * curvature))
        .collect();
    let xs: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = ratios
        .iter()
        .map(|r| (r - 1.0).abs().max(f64::MIN_POSITIVE).ln())
        .collect();
    Ok(QuadraticKlCurve {
        scales: scales.to_vec(),
        ratios,
        slope: ls_slope(&xs, &ys),
        curvature,
    })
}

/// Ordinary least-squares slope.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Result of [`clip_leash_bound`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipLeash {
    /// `Σ_t |log r_t|`.
    pub empirical: f64,
    /// `T · max(-log(1-ε), log(1+ε))`.
    pub bound: f64,
}

impl ClipLeash {
    pub fn holds(&self) -> bool {
        self.empirical <= self.bound
    }
}

/// Per-token leash `max(-log(1-ε), log(1+ε)) = -log(1-ε)`.
pub fn clip_leash_per_token(epsilon: f64) -> f64 {
    (-(-epsilon).ln_1p()).max(epsilon.ln_1p())
}

/// The KL leash implied by ratio clipping over `tokens` tokens. Ratios must
/// lie in `[1-ε, 1+ε]`; at most `tokens` of them may be given.
pub fn clip_leash_bound(ratios: &[f64], epsilon: f64, tokens: usize) -> Result<ClipLeash> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!(
            "clip epsilon {epsilon} outside (0, 1)"
        )));
    }
    if ratios.len() > tokens {
        return Err(Error::Domain(format!(
            "{} ratios for {tokens} tokens",
            ratios.len()
        )));
    }
    for (index, &ratio) in ratios.iter().enumerate() {
        if !(ratio >= 1.0 - epsilon && ratio <= 1.0 + epsilon) {
            return Err(Error::ClipViolation {
                index,
                ratio,
                epsilon,
            });
        }
    }
    Ok(ClipLeash {
        empirical: ratios.iter().map(|r| r.ln().abs()).sum(),
        bound: tokens as f64 * clip_leash_per_token(epsilon),
    })
}

/// The KL-regularised maximiser `argmax_π E_π[R] - β KL(π ‖ q)`, i.e.
/// `q · exp(R/β) / Z`.
pub fn exponential_tilt(q: &[f64], rewards: &[f64], beta: f64) -> Result<Vec<f64>> {
    if q.len() != rewards.len() || q.is_empty() {
        return Err(Error::Shape(
            "reference and rewards must have equal, non-zero length".into(),
        ));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!(
            "temperature {beta} must be positive"
        )));
    }
    let logits: Vec<f64> = q
        .iter()
        .zip(rewards)
        .map(|(p, r)| p.ln() + r / beta)
        .collect();
    Ok(softmax(&logits))
}

/// `E_π[R] - β KL(π ‖ q)`; zero-probability outcomes of `π` contribute 0.
pub fn tilting_objective(pi: &[f64], q: &[f64], rewards: &[f64], beta: f64) -> f64 {
    let mut value = 0.0;
    for ((&p, &qi), &r) in pi.iter().zip(q).zip(rewards) {
        if p > 0.0 {
            value += p * r - beta * p * (p / qi).ln();
        }
    }
    value
}

/// Brute-force comparison of the tilt against every point of the simplex
/// grid with spacing `1/resolution`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltCheck {
    pub n: usize,
    pub resolution: usize,
    pub grid_points: usize,
    pub tilt_value: f64,
    pub grid_best_value: f64,
    /// `‖grid argmax - tilt‖₁`.
    pub l1_distance: f64,
    /// Largest distance compatible with strong concavity:
    /// `√(2 (f(tilt) - f(rounded tilt)) / β)`.
    pub l1_allowed: f64,
    pub passed: bool,
}

/// Checks that the tilt beats every grid point and that the grid argmax is
/// as close to it as strong concavity demands.
pub fn tilt_brute_force(
    q: &[f64],
    rewards: &[f64],
    beta: f64,
    resolution: usize,
) -> Result<TiltCheck> {
    let n = q.len();
    if !(1..=8).contains(&n) || resolution == 0 {
        return Err(Error::Domain(
            "brute force needs 1 <= N <= 8 and a positive resolution".into(),
        ));
    }
    let tilt = exponential_tilt(q, rewards, beta)?;
    let tilt_value = tilting_objective(&tilt, q, rewards, beta);
    let mut best = (f64::NEG_INFINITY, vec![0.0; n]);
    let mut counts = vec![0usize; n];
    let mut points = 0usize;
    simplex_grid(&mut counts, 0, resolution, &mut |c| {
        points += 1;
        let pi: Vec<f64> = c.iter().map(|&k| k as f64 / resolution as f64).collect();
        let v = tilting_objective(&pi, q, rewards, beta);
        if v > best.0 {
            best = (v, pi);
        }
    });
    let rounded = round_to_grid(&tilt, resolution);
    let rounded_value = tilting_objective(&rounded, q, rewards, beta);
    let l1_distance: f64 = best.1.iter().zip(&tilt).map(|(a, b)| (a - b).abs()).sum();
    let gap = (tilt_value - rounded_value).max(0.0);
    // f(tilt) - f(π) = β KL(π ‖ tilt) ≥ (β/2) ‖π - tilt‖₁² (Pinsker)
    let l1_allowed = (2.0 * gap / beta).sqrt() + 1e-9;
    let tol = 1e-12 * (1.0 + tilt_value.abs());
    Ok(TiltCheck {
        n,
        resolution,
        grid_points: points,
        tilt_value,
        grid_best_value: best.0,
        l1_distance,
        l1_allowed,
        passed: best.0 <= tilt_value + tol && l1_distance <= l1_allowed,
    })
}

fn simplex_grid(counts: &mut [usize], i: usize, left: usize, f: &mut impl FnMut(&[usize])) {
    if i + 1 == counts.len() {
        counts[i] = left;
        f(counts);
        return;
    }
    for k in 0..=left {
        counts[i] = k;
        simplex_grid(counts, i + 1, left - k, f);
    }
}

/// Largest-remainder rounding of a distribution onto the grid.
fn round_to_grid(p: &[f64], resolution: usize) -> Vec<f64> {
    let scaled: Vec<f64> = p.iter().map(|x| x * resolution as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|x| x.floor() as usize).collect();
    let short = resolution.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
        .iter()
        .map(|&k| k as f64 / resolution as f64)
        .collect()
}

/// `√(2K/μ)`: the largest step compatible with `½ΔᵀFΔ ≤ K` when `F ⪰ μI`.
pub fn weight_bound(k: f64, mu: f64) -> Result<f64> {
    if mu.is_nan() || mu <= 0.0 || k.is_nan() || k < 0.0 {
        return Err(Error::Domain(format!(
            "weight bound needs K >= 0 and mu > 0, got K={k}, mu={mu}"
        )));
    }
    Ok((2.0 * k / mu).sqrt())
}

/// `(‖Δ‖₂, √(ΔᵀFΔ / μ))`: the step and the bound with `K = ½ΔᵀFΔ`, where `μ`
/// is the smallest eigenvalue of `F`.
pub fn weight_bound_check(f: MatRef<'_, f64>, delta: &[f64]) -> Result<(f64, f64)> {
    if f.nrows() != f.ncols() || f.nrows() != delta.len() {
        return Err(Error::Shape(
            "Fisher block and step dimensions differ".into(),
        ));
    }
    let mu = f
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Numerics(format!("eigen solver failed: {e:?}")))?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let n = delta.len();
    let quad: f64 = (0..n)
        .map(|i| (0..n).map(|j| delta[i] * f[(i, j)] * delta[j]).sum::<f64>())
        .sum();
    let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    Ok((norm, weight_bound(0.5 * quad, mu)?))
}

/// Settings for [`run_theory_bench`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryBenchConfig {
    pub seed: u64,
    pub quadratic_trials: usize,
    pub max_outcomes: usize,
    pub scales: Vec<f64>,
    pub min_slope: f64,
    pub clip_batches: usize,
    pub clip_tokens: usize,
    pub clip_epsilon: f64,
    pub tilt_cases: usize,
    pub tilt_resolution: usize,
    pub weight_trials: usize,
}

impl Default for TheoryBenchConfig {
    fn default() -> Self {
        TheoryBenchConfig {
            seed: 0,
            quadratic_trials: 100,
            max_outcomes: 32,
            scales: DEFAULT_SCALES.to_vec(),
            min_slope: 0.8,
            clip_batches: 10_000,
            clip_tokens: 64,
            clip_epsilon: 0.2,
            tilt_cases: 24,
            tilt_resolution: 12,
            weight_trials: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticScore {
    pub trials: usize,
    pub min_slope: f64,
    pub max_slope: f64,
    pub mean_slope: f64,
    /// Largest `|ratio - 1|` at the smallest scale.
    pub worst_final_gap: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub batches: usize,
    pub tokens: usize,
    pub epsilon: f64,
    pub violations: usize,
    /// Smallest `bound - empirical` over all batches.
    pub worst_slack: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltScore {
    pub cases: usize,
    pub failures: usize,
    pub max_l1_distance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBoundScore {
    pub trials: usize,
    /// Largest `‖Δ‖ / √(2K/μ)`; must stay ≤ 1.
    pub worst_ratio: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherScore {
    pub trials: usize,
    pub min_eigenvalue: f64,
    /// Largest `‖F 1‖_∞`.
    pub max_null_residual: f64,
    pub passed: bool,
}

/// Informational: mean per-token `|log r|` for uniformly drawn clipped
/// ratios as `ε` shrinks, with its fitted log-log slope. Not asserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeashTrend {
    pub epsilons: Vec<f64>,
    pub mean_abs_log_ratio: Vec<f64>,
    pub mean_signed_log_ratio: Vec<f64>,
    pub slope_abs: f64,
}

/// JSON scorecard of the theory bench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryScorecard {
    pub scope: String,
    pub seed: u64,
    pub fisher: FisherScore,
    pub quadratic_kl: QuadraticScore,
    pub clip_leash: ClipScore,
    pub tilting: TiltScore,
    pub weight_bound: WeightBoundScore,
    pub leash_trend: LeashTrend,
    pub passed: bool,
}

/// Runs every check with seeded random trials.
pub fn run_theory_bench(cfg: &TheoryBenchConfig) -> Result<TheoryScorecard> {
    if cfg.max_outcomes < 2 || cfg.quadratic_trials == 0 {
        return Err(Error::Config(
            "theory bench needs max_outcomes >= 2 and at least one trial".into(),
        ));
    }
    let fisher = fisher_score(cfg)?;
    let quadratic_kl = quadratic_score(cfg)?;
    let clip_leash = clip_score(cfg)?;
    let tilting = tilt_score(cfg)?;
    let weight_bound = weight_bound_score(cfg)?;
    let leash_trend = leash_trend(cfg)?;
    let passed = fisher.passed
        && quadratic_kl.passed
        && clip_leash.passed
        && tilting.passed
        && weight_bound.passed;
    Ok(TheoryScorecard {
        scope: "categorical softmax policies (exact Fisher and KL)".into(),
        seed: cfg.seed,
        fisher,
        quadratic_kl,
        clip_leash,
        tilting,
        weight_bound,
        leash_trend,
        passed,
    })
}

fn fisher_score(cfg: &TheoryBenchConfig) -> Result<FisherScore> {
    let mut rng = rng_for(cfg.seed, "theory/fisher");
    let trials = cfg.quadratic_trials;
    let (mut min_eig, mut max_res) = (f64::INFINITY, 0.0f64);
    for _ in 0..trials {
        let n = rng.random_range(2..=cfg.max_outcomes);
        let p = CategoricalPolicy::random(n, 1.0, &mut rng)?;
        let f = categorical_fisher(&p);
        let eig = f
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Numerics(format!("eigen solver failed: {e:?}")))?;
        min_eig = eig.into_iter().fold(min_eig, f64::min);
        for i in 0..n {
            let row: f64 = (0..n).map(|j| f[(i, j)]).sum();
            max_res = max_res.max(row.abs());
        }
    }
    Ok(FisherScore {
        trials,
        min_eigenvalue: min_eig,
        max_null_residual: max_res,
        passed: min_eig >= -1e-12 && max_res <= 1e-12,
    })
}

fn quadratic_score(cfg: &TheoryBenchConfig) -> Result<QuadraticScore> {
    let mut rng = rng_for(cfg.seed, "theory/quadratic");
    let mut slopes = Vec::with_capacity(cfg.quadratic_trials);
    let mut worst_final_gap = 0.0f64;
    for _ in 0..cfg.quadratic_trials {
        let n = rng.random_range(2..=cfg.max_outcomes);
        let p = CategoricalPolicy::random(n, 1.0, &mut rng)?;
        let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let curve = quadratic_kl_check(&p, &dir, &cfg.scales)?;
        worst_final_gap = worst_final_gap.max((curve.ratios.last().unwrap() - 1.0).abs());
        slopes.push(curve.slope);
    }
    let min_slope = slopes.iter().copied().fold(f64::INFINITY, f64::min);
    let max_slope = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(QuadraticScore {
        trials: slopes.len(),
        min_slope,
        max_slope,
        mean_slope: slopes.iter().sum::<f64>() / slopes.len() as f64,
        worst_final_gap,
        threshold: cfg.min_slope,
        passed: min_slope >= cfg.min_slope,
    })
}

fn clip_score(cfg: &TheoryBenchConfig) -> Result<ClipScore> {
    let mut rng = rng_for(cfg.seed, "theory/clip");
    let eps = cfg.clip_epsilon;
    let mut violations = 0;
    let mut worst_slack = f64::INFINITY;
    let mut ratios = vec![0.0; cfg.clip_tokens];
    for _ in 0..cfg.clip_batches {
        for r in ratios.iter_mut() {
            *r = rng.random_range(1.0 - eps..=1.0 + eps);
        }
        let leash = clip_leash_bound(&ratios, eps, cfg.clip_tokens)?;
        if !leash.holds() {
            violations += 1;
        }
        worst_slack = worst_slack.min(leash.bound - leash.empirical);
    }
    Ok(ClipScore {
        batches: cfg.clip_batches,
        tokens: cfg.clip_tokens,
        epsilon: eps,
        violations,
        worst_slack,
        passed: violations == 0,
    })
}

fn tilt_score(cfg: &TheoryBenchConfig) -> Result<TiltScore> {
    let mut rng = rng_for(cfg.seed, "theory/tilt");
    let mut failures = 0;
    let mut max_l1 = 0.0f64;
    for case in 0..cfg.tilt_cases {
        let n = 2 + case % 7;
        let q = CategoricalPolicy::random(n, 0.5, &mut rng)?;
        let rewards: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let beta = rng.random_range(0.25..2.0);
        let check = tilt_brute_force(q.probs(), &rewards, beta, cfg.tilt_resolution)?;
        failures += usize::from(!check.passed);
        max_l1 = max_l1.max(check.l1_distance);
    }
    Ok(TiltScore {
        cases: cfg.tilt_cases,
        failures,
        max_l1_distance: max_l1,
        passed: failures == 0,
    })
}

fn weight_bound_score(cfg: &TheoryBenchConfig) -> Result<WeightBoundScore> {
    let mut rng = rng_for(cfg.seed, "theory/weight");
    let mut worst = 0.0f64;
    for _ in 0..cfg.weight_trials {
        let n = rng.random_range(1..=8);
        // F = Q diag(λ) Qᵀ with λ ≥ μ > 0
        let q = crate::intervention::haar_orthogonal_with(n, &mut rng);
        let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0)).collect();
        let f = Mat::from_fn(n, n, |i, j| {
            (0..n).map(|k| q[(i, k)] * lambda[k] * q[(j, k)]).sum()
        });
        let delta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let (norm, bound) = weight_bound_check(f.as_ref(), &delta)?;
        worst = worst.max(norm / bound);
    }
    Ok(WeightBoundScore {
        trials: cfg.weight_trials,
        worst_ratio: worst,
        passed: worst <= 1.0 + 1e-9,
    })
}

fn leash_trend(cfg: &TheoryBenchConfig) -> Result<LeashTrend> {
    let mut rng = rng_for(cfg.seed, "theory/leash-trend");
    let epsilons = vec![0.2, 0.1, 0.05, 0.025];
    let batches = (cfg.clip_batches / 10).max(1);
    let (mut abs_means, mut signed_means) = (Vec::new(), Vec::new());
    for &eps in &epsilons {
        let (mut abs_sum, mut signed_sum) = (0.0, 0.0);
        for _ in 0..batches {
            for _ in 0..cfg.clip_tokens {
                let l = rng.random_range::<f64, _>(1.0 - eps..=1.0 + eps).ln();
                abs_sum += l.abs();
                signed_sum += l;
            }
        }
        let count = (batches * cfg.clip_tokens) as f64;
        abs_means.push(abs_sum / count);
        signed_means.push(signed_sum / count);
    }
    let xs: Vec<f64> = epsilons.iter().map(|e: &f64| e.ln()).collect();
    let ys: Vec<f64> = abs_means.iter().map(|m: &f64| m.ln()).collect();
    Ok(LeashTrend {
        slope_abs: ls_slope(&xs, &ys),
        epsilons,
        mean_abs_log_ratio: abs_means,
        mean_signed_log_ratio: signed_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_binary_fisher() {
        let p = CategoricalPolicy::from_probs(&[0.5, 0.5]).unwrap();
        let f = categorical_fisher(&p);
        assert_eq!(
            (f[(0, 0)], f[(0, 1)], f[(1, 0)], f[(1, 1)]),
            (0.25, -0.25, -0.25, 0.25)
        );
    }

    #[test]
    fn fisher_matches_finite_difference_hessian() {
        // F is the Hessian of log-sum-exp at the logits
        let logits = vec![0.3, -1.2, 0.7, 0.1];
        let p = CategoricalPolicy::from_logits(logits.clone()).unwrap();
        let f = categorical_fisher(&p);
        let lse = |x: &[f64]| x.iter().map(|v| v.exp()).sum::<f64>().ln();
        let h = 1e-4;
        for i in 0..4 {
            for j in 0..4 {
                let at = |di: f64, dj: f64| {
                    let mut x = logits.clone();
                    x[i] += di;
                    x[j] += dj;
                    lse(&x)
                };
                let fd = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
                assert!(
                    (fd - f[(i, j)]).abs() < 1e-6,
                    "{i},{j}: {fd} vs {}",
                    f[(i, j)]
                );
            }
        }
    }

    #[test]
    fn kl_values() {
        let p = CategoricalPolicy::from_probs(&[0.9, 0.1]).unwrap();
        let q = CategoricalPolicy::from_probs(&[0.5, 0.5]).unwrap();
        let want = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert_relative_eq!(kl_categorical(&p, &q).unwrap(), want, max_relative = 1e-12);
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn binary_direction_matches_closed_form() {
        let p = CategoricalPolicy::from_probs(&[0.5, 0.5]).unwrap();
        let delta = 0.3;
        let curve = quadratic_kl_check(&p, &[delta, -delta], &[1.0, 0.5]).unwrap();
        // θ + sΔ gives probabilities sigmoid(±2sδ)
        let a: f64 = 1.0 / (1.0 + (-2.0 * delta).exp());
        let closed = a * (2.0 * a).ln() + (1.0 - a) * (2.0 * (1.0 - a)).ln();
        let kl = curve.ratios[0] * 0.5 * curve.curvature;
        assert_relative_eq!(kl, closed, max_relative = 1e-12);
    }

    #[test]
    fn ratio_converges_linearly() {
        let p = CategoricalPolicy::from_probs(&[0.6, 0.3, 0.1]).unwrap();
        let curve = quadratic_kl_check(&p, &[1.0, -0.5, 0.2], &DEFAULT_SCALES).unwrap();
        assert!(curve.slope >= 0.9, "slope {}", curve.slope);
        assert!((curve.ratios[3] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn null_direction_rejected() {
        let p = CategoricalPolicy::from_probs(&[0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            quadratic_kl_check(&p, &[1.0; 3], &DEFAULT_SCALES),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            quadratic_kl_check(&p, &[1.0, 0.0, 0.0], &[0.1, 0.2]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn clip_leash_examples() {
        let l = clip_leash_bound(&[], 0.2, 10).unwrap();
        assert_relative_eq!(l.bound, 10.0 * -(0.8f64.ln()), max_relative = 1e-15);
        assert!((l.bound - 2.2314).abs() < 1e-4);
        assert_eq!(clip_leash_bound(&[1.0; 5], 0.2, 5).unwrap().empirical, 0.0);
        assert!(matches!(
            clip_leash_bound(&[1.0, 1.3], 0.2, 2),
            Err(Error::ClipViolation { index: 1, .. })
        ));
    }

    #[test]
    fn tilt_beats_grid() {
        let q = [0.2, 0.5, 0.3];
        let r = [1.0, -0.5, 0.25];
        let c = tilt_brute_force(&q, &r, 0.7, 40).unwrap();
        assert!(c.passed, "{c:?}");
        assert_eq!(c.grid_points, 861);
    }

    #[test]
    fn weight_bound_examples() {
        assert_eq!(weight_bound(2.0, 1.0).unwrap(), 2.0);
        let f = Mat::from_fn(2, 2, |i, j| if i == j { [1.0, 4.0][i] } else { 0.0 });
        let (norm, bound) = weight_bound_check(f.as_ref(), &[1.0, 0.0]).unwrap();
        // tight along the weakest direction
        assert_relative_eq!(norm, bound, max_relative = 1e-12);
    }

    #[test]
    fn small_bench_passes() {
        let cfg = TheoryBenchConfig {
            quadratic_trials: 20,
            clip_batches: 200,
            tilt_cases: 7,
            tilt_resolution: 8,
            weight_trials: 20,
            ..Default::default()
        };
        let s = run_theory_bench(&cfg).unwrap();
        assert!(s.passed, "{s:#?}");
        assert!(s.quadratic_kl.max_slope <= 2.5);
    }
}
