//! Expressivity analysis: weight-norm constants, the normalization-dependent
//! sensitivity bound, a Monte-Carlo estimator of the output-separation
//! probability, and an empirical Lipschitz scan that checks the bound.
//!
//! The model under study is the representation map `f = pool . encoder . h`
//! where `h` is a fitted normalizer. For a neighborhood radius `epsilon` and
//! output threshold `sigma`, the bound is
//!
//! `gamma = S * (epsilon / sigma) * (d/(d-1))^2 * (1 + C1) * C2`
//!
//! with a strategy factor `S` (for example `sqrt(d)/v` for pooled standard
//! scaling) and curvature constants `C1`, `C2` built from spectral norms of
//! the weight matrices.

use crate::data::{tokenize, TimeSeriesInstance, TokenScheme};
use crate::error::{Error, Result};
use crate::linalg::{sample_in_frobenius_ball, spectral_norm, Matrix, RngStream};
use crate::model::{represent, ModelConfig, ModelWeights};
use crate::normalize::{FittedNormalizer, StrategyKind};
use serde::Serialize;

/// Power-iteration settings used for every weight norm.
const SPECTRAL_TOL: f64 = 1e-8;
const SPECTRAL_MAX_ITERS: usize = 1000;

/// 97.5% normal quantile, for the two-sided 95% Wilson interval.
const WILSON_Z: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum C1Variant {
    /// `C1 = |Wo| sqrt(H) max_h [...]` — the default.
    Appendix,
    /// Adds a leading `1 +` to the appendix value.
    Theorem2Maintext,
}

impl C1Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "appendix" => Ok(C1Variant::Appendix),
            "theorem2" | "theorem2-maintext" => Ok(C1Variant::Theorem2Maintext),
            other => Err(Error::Config(format!("unknown c1 variant {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            C1Variant::Appendix => "appendix",
            C1Variant::Theorem2Maintext => "theorem2-maintext",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct HeadNorms {
    pub head: usize,
    pub q_norm: f64,
    pub k_norm: f64,
    pub v_norm: f64,
    /// `v_norm * (4 n / sqrt(d/H) * q_norm * k_norm + 1)`
    pub inner: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Constants {
    pub c1: f64,
    pub c2: f64,
    pub per_head: Vec<HeadNorms>,
}

/// Compute `C1` and `C2` from spectral norms of a single-layer encoder's
/// weights. `C2 = 1 + |W2| |W1|`, treating the FFN's two affine maps around
/// a 1-Lipschitz activation as one block.
pub fn compute_constants(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    variant: C1Variant,
) -> Result<Constants> {
    cfg.validate()?;
    weights.check_shapes(cfg)?;
    if cfg.layers != 1 {
        return Err(Error::Unsupported(format!(
            "expressivity constants are defined for a single encoder layer (got {})",
            cfg.layers
        )));
    }
    let lw = &weights.layers[0];
    let norm = |m: &Matrix| spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITERS);
    let dh = cfg.head_dim() as f64;
    let mut per_head = Vec::with_capacity(cfg.heads);
    let mut max_inner = 0.0f64;
    for h in 0..cfg.heads {
        let q_norm = norm(&lw.wq[h])?;
        let k_norm = norm(&lw.wk[h])?;
        let v_norm = norm(&lw.wv[h])?;
        let inner = v_norm * (4.0 * cfg.n as f64 / dh.sqrt() * q_norm * k_norm + 1.0);
        max_inner = max_inner.max(inner);
        per_head.push(HeadNorms {
            head: h,
            q_norm,
            k_norm,
            v_norm,
            inner,
        });
    }
    let wo_norm = norm(&lw.wo)?;
    let mut c1 = wo_norm * (cfg.heads as f64).sqrt() * max_inner;
    if variant == C1Variant::Theorem2Maintext {
        c1 += 1.0;
    }
    let c2 = 1.0 + norm(&lw.w2)? * norm(&lw.w1)?;
    Ok(Constants { c1, c2, per_head })
}

/// Everything needed to evaluate the bound for one strategy.
#[derive(Debug, Clone)]
pub struct BoundQuery<'a> {
    pub epsilon: f64,
    pub sigma: f64,
    pub normalizer: &'a FittedNormalizer,
    pub cfg: &'a ModelConfig,
    pub weights: &'a ModelWeights,
    pub c1_variant: C1Variant,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct BoundReport {
    pub c1: f64,
    pub c2: f64,
    /// `(d/(d-1))^2 (1 + C1) C2`
    pub lipschitz_core: f64,
    pub strategy_factor: f64,
    pub gamma_raw: f64,
    /// `min(1, gamma_raw)`; the probability bound is vacuous above 1.
    pub gamma_clamped: f64,
    pub strategy: String,
    pub scope: String,
    pub c1_variant: String,
    pub vacuous: bool,
    /// Set for the identity (`none`) strategy, whose factor S = 1 extends
    /// the normalization bounds trivially.
    pub derived_extension: bool,
    pub per_head: Vec<HeadNorms>,
    pub notes: Vec<String>,
}

/// Strategy factor S of the bound. Per-channel strategies need a fitted
/// scale per token channel.
fn strategy_factor(normalizer: &FittedNormalizer, d: usize) -> Result<f64> {
    let kind = normalizer.strategy.kind;
    if kind.is_per_channel() && kind != StrategyKind::Robust && kind != StrategyKind::Quantile {
        let n_ch = normalizer.channels.len();
        if n_ch != d {
            return Err(Error::ShapeMismatch {
                context: "strategy factor".into(),
                left: format!("{n_ch} fitted channels"),
                right: format!("token dimension {d}"),
            });
        }
    }
    match kind {
        StrategyKind::None => Ok(1.0),
        StrategyKind::StandardInstance => Ok(normalizer
            .channel_scales()
            .iter()
            .map(|v| 1.0 / (v * v))
            .sum::<f64>()
            .sqrt()),
        StrategyKind::StandardGlobal => Ok((d as f64).sqrt() / normalizer.global.scale),
        StrategyKind::MinmaxInstance => Ok(normalizer
            .channel_ranges()
            .iter()
            .map(|r| 1.0 / (r * r))
            .sum::<f64>()
            .sqrt()),
        StrategyKind::MinmaxGlobal => Ok((d as f64).sqrt()
            / normalizer.global.range(normalizer.strategy.eps_floor)),
        StrategyKind::Robust | StrategyKind::Quantile => Err(Error::Unsupported(format!(
            "no expressivity bound is defined for the {kind} strategy"
        ))),
    }
}

/// Evaluate the expressivity bound for one query.
pub fn compute_bound(q: &BoundQuery) -> Result<BoundReport> {
    if q.sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be > 0, got {}", q.sigma)));
    }
    if q.epsilon < 0.0 {
        return Err(Error::Config(format!("epsilon must be >= 0, got {}", q.epsilon)));
    }
    let constants = compute_constants(q.cfg, q.weights, q.c1_variant)?;
    let d = q.cfg.d as f64;
    let core = (d / (d - 1.0)).powi(2) * (1.0 + constants.c1) * constants.c2;
    let s = strategy_factor(q.normalizer, q.cfg.d)?;
    let gamma_raw = s * (q.epsilon / q.sigma) * core;
    let gamma_clamped = gamma_raw.min(1.0);
    let kind = q.normalizer.strategy.kind;
    let mut notes = vec![
        "instance-strategy channel sums run over the d token channels".to_string(),
    ];
    if gamma_raw > 1.0 {
        notes.push("gamma-raw exceeds 1; the probability bound is vacuous".to_string());
    }
    if kind == StrategyKind::None {
        notes.push(
            "identity preprocessing is 1-Lipschitz; S = 1 is a derived extension".to_string(),
        );
    }
    Ok(BoundReport {
        c1: constants.c1,
        c2: constants.c2,
        lipschitz_core: core,
        strategy_factor: s,
        gamma_raw,
        gamma_clamped,
        strategy: kind.as_str().to_string(),
        scope: q.normalizer.scope.as_str().to_string(),
        c1_variant: q.c1_variant.as_str().to_string(),
        vacuous: gamma_raw > 1.0,
        derived_extension: kind == StrategyKind::None,
        per_head: constants.per_head,
        notes,
    })
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(p_hat: f64, n: usize) -> (f64, f64) {
    let n = n as f64;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p_hat + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // at the boundary proportions the exact endpoints are 0 and 1
    let lo = if p_hat == 0.0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if p_hat == 1.0 { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMode {
    /// One perturbation per draw; p-hat is the fraction of pairs separated
    /// by more than sigma.
    Pair,
    /// Per draw, take the max output distance over k perturbations.
    MaxOfK { k: usize },
}

impl EstimateMode {
    pub fn parse(s: &str, k: usize) -> Result<Self> {
        match s {
            "pair" => Ok(EstimateMode::Pair),
            "max_of_k" => Ok(EstimateMode::MaxOfK { k: k.max(1) }),
            other => Err(Error::Config(format!("unknown estimate mode {other:?}"))),
        }
    }
}

/// Where the epsilon-ball perturbation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbSpace {
    /// Raw input space, before normalization (the default; this is what the
    /// strategy factor S describes).
    #[default]
    Raw,
    /// After normalization, for ablation.
    Normalized,
}

#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    pub perturb: PerturbSpace,
    /// Skip normalizer and model entirely: f is the identity on the raw
    /// token matrix. Diagnostic fixture.
    pub model_bypass: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExpressivityEstimate {
    pub p_hat: f64,
    pub samples: usize,
    pub wilson_ci: (f64, f64),
    pub max_ratio: f64,
    pub seed: u64,
}

impl ExpressivityEstimate {
    /// Normal-approximation standard error of p-hat.
    pub fn standard_error(&self) -> f64 {
        (self.p_hat * (1.0 - self.p_hat) / self.samples as f64).sqrt()
    }
}

struct SamplePipeline<'a> {
    cfg: &'a ModelConfig,
    weights: &'a ModelWeights,
    normalizer: &'a FittedNormalizer,
    options: &'a EstimateOptions,
}

impl SamplePipeline<'_> {
    /// Raw instance -> representation, honoring bypass and perturb space.
    fn represent_raw(&self, raw: &TimeSeriesInstance) -> Result<Vec<f64>> {
        if self.options.model_bypass {
            return Ok(raw.values.values().to_vec());
        }
        let normalized = self.normalizer.transform(raw)?;
        let tokens = tokenize(&normalized, TokenScheme::PerTimestep)?;
        represent(self.cfg, self.weights, &tokens)
    }

    fn represent_tokens(&self, tokens: &Matrix) -> Result<Vec<f64>> {
        if self.options.model_bypass {
            return Ok(tokens.values().to_vec());
        }
        represent(self.cfg, self.weights, tokens)
    }

    /// Draw the perturbed pair for one sample; returns (f(X), f(X~), ||X~ - X||_F).
    fn sample_pair(
        &self,
        base: &TimeSeriesInstance,
        epsilon: f64,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        match self.options.perturb {
            PerturbSpace::Raw => {
                let perturbed_values = sample_in_frobenius_ball(&base.values, epsilon, rng);
                let dist = perturbed_values.sub(&base.values)?.frobenius_norm();
                let perturbed = TimeSeriesInstance {
                    values: perturbed_values,
                    label: None,
                    target: None,
                };
                let fx = self.represent_raw(base)?;
                let fy = self.represent_raw(&perturbed)?;
                Ok((fx, fy, dist))
            }
            PerturbSpace::Normalized => {
                let tokens = if self.options.model_bypass {
                    base.values.transpose()
                } else {
                    let normalized = self.normalizer.transform(base)?;
                    tokenize(&normalized, TokenScheme::PerTimestep)?
                };
                let perturbed = sample_in_frobenius_ball(&tokens, epsilon, rng);
                let dist = perturbed.sub(&tokens)?.frobenius_norm();
                let fx = self.represent_tokens(&tokens)?;
                let fy = self.represent_tokens(&perturbed)?;
                Ok((fx, fy, dist))
            }
        }
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Monte-Carlo estimate of the probability that a perturbation within the
/// epsilon ball moves the representation by more than sigma. Perturbations
/// are applied in raw input space by default; both the base and perturbed
/// series pass through the same fitted normalizer and model. Each sample
/// derives its own stream from `(rng, sample index)`, so the estimate is
/// reproducible regardless of evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn estimate_expressivity(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    normalizer: &FittedNormalizer,
    dataset: &[TimeSeriesInstance],
    epsilon: f64,
    sigma: f64,
    samples: usize,
    rng: &RngStream,
    mode: EstimateMode,
    options: &EstimateOptions,
) -> Result<ExpressivityEstimate> {
    if dataset.is_empty() {
        return Err(Error::Empty("expressivity estimator dataset".into()));
    }
    if samples < 100 {
        return Err(Error::Config(format!(
            "estimator needs >= 100 samples, got {samples}"
        )));
    }
    if epsilon < 0.0 || sigma < 0.0 {
        return Err(Error::Config("epsilon and sigma must be >= 0".into()));
    }
    let pipeline = SamplePipeline {
        cfg,
        weights,
        normalizer,
        options,
    };
    let mut hits = 0usize;
    let mut max_ratio = 0.0f64;
    for s in 0..samples {
        let mut stream = rng.substream(s as u64);
        let base = &dataset[stream.uniform_index(dataset.len())];
        let k = match mode {
            EstimateMode::Pair => 1,
            EstimateMode::MaxOfK { k } => k,
        };
        let mut worst = 0.0f64;
        for _ in 0..k {
            let (fx, fy, dist) = pipeline.sample_pair(base, epsilon, &mut stream)?;
            let sep = l2_distance(&fx, &fy);
            worst = worst.max(sep);
            if dist > 0.0 {
                max_ratio = max_ratio.max(sep / dist);
            }
        }
        if worst > sigma {
            hits += 1;
        }
    }
    let p_hat = hits as f64 / samples as f64;
    Ok(ExpressivityEstimate {
        p_hat,
        samples,
        wilson_ci: wilson_interval(p_hat, samples),
        max_ratio,
        seed: rng.seed(),
    })
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    /// Multiplier on the theory bound fed to the violation check; 1.0 checks
    /// the bound as derived, smaller factors are fault injection.
    pub bound_factor: f64,
    /// Pairs where any post-normalization token row has a population std
    /// below this are excluded: bare layer norm has unbounded local
    /// sensitivity near constant tokens, outside the bound's assumptions.
    pub min_token_std: f64,
    pub perturb: PerturbSpace,
    pub model_bypass: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            bound_factor: 1.0,
            min_token_std: 0.1,
            perturb: PerturbSpace::Raw,
            model_bypass: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ScanReport {
    pub max_ratio: f64,
    pub violations: usize,
    pub kept: usize,
    pub excluded: usize,
    /// The threshold ratios were checked against (S * L * bound_factor).
    pub bound: f64,
}

fn min_token_std(tokens: &Matrix) -> f64 {
    let mut worst = f64::INFINITY;
    for i in 0..tokens.rows() {
        let row = tokens.row(i);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        worst = worst.min(var.sqrt());
    }
    worst
}

/// Sample perturbation pairs and compare the realized output/input distance
/// ratio against the strategy's bound `S * L`.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_scan(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    normalizer: &FittedNormalizer,
    dataset: &[TimeSeriesInstance],
    epsilon: f64,
    pairs: usize,
    rng: &RngStream,
    options: &ScanOptions,
) -> Result<ScanReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("lipschitz scan dataset".into()));
    }
    if pairs == 0 {
        return Err(Error::Config("scan needs >= 1 pairs".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config("scan epsilon must be > 0".into()));
    }
    let bound = if options.model_bypass {
        strategy_factor(normalizer, cfg.d)? * options.bound_factor
    } else {
        let constants = compute_constants(cfg, weights, C1Variant::Appendix)?;
        let d = cfg.d as f64;
        let core = (d / (d - 1.0)).powi(2) * (1.0 + constants.c1) * constants.c2;
        strategy_factor(normalizer, cfg.d)? * core * options.bound_factor
    };
    let est_options = EstimateOptions {
        perturb: options.perturb,
        model_bypass: options.model_bypass,
    };
    let pipeline = SamplePipeline {
        cfg,
        weights,
        normalizer,
        options: &est_options,
    };
    let mut kept = 0usize;
    let mut excluded = 0usize;
    let mut violations = 0usize;
    let mut max_ratio = 0.0f64;
    for s in 0..pairs {
        let mut stream = rng.substream(s as u64);
        let base = &dataset[stream.uniform_index(dataset.len())];
        let perturbed_values = sample_in_frobenius_ball(&base.values, epsilon, &mut stream);
        let dist = perturbed_values.sub(&base.values)?.frobenius_norm();
        if dist == 0.0 {
            excluded += 1;
            continue;
        }
        let perturbed = TimeSeriesInstance {
            values: perturbed_values,
            label: None,
            target: None,
        };
        if !options.model_bypass && options.min_token_std > 0.0 {
            let ta = tokenize(&normalizer.transform(base)?, TokenScheme::PerTimestep)?;
            let tb = tokenize(&normalizer.transform(&perturbed)?, TokenScheme::PerTimestep)?;
            if min_token_std(&ta) < options.min_token_std
                || min_token_std(&tb) < options.min_token_std
            {
                excluded += 1;
                continue;
            }
        }
        let fx = pipeline.represent_raw(base)?;
        let fy = pipeline.represent_raw(&perturbed)?;
        let ratio = l2_distance(&fx, &fy) / dist;
        kept += 1;
        max_ratio = max_ratio.max(ratio);
        if ratio > bound {
            violations += 1;
        }
    }
    Ok(ScanReport {
        max_ratio,
        violations,
        kept,
        excluded,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, Activation, HeadKind};
    use crate::normalize::{fit_dataset, fit_instance, NormStrategy, Scope};

    fn cfg(n: usize, d: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            n,
            d,
            heads,
            ffn_hidden: d,
            layers: 1,
            positional_encoding: false,
            activation: Activation::Tanh,
            head: HeadKind::Classification { classes: 2 },
        }
    }

    /// Normalizer with hand-set statistics, bypassing fit.
    fn normalizer_with(
        kind: StrategyKind,
        scales: &[f64],
        ranges: &[(f64, f64)],
        global_scale: f64,
        global_range: (f64, f64),
    ) -> FittedNormalizer {
        let strategy = NormStrategy::new(kind);
        let channels = scales
            .iter()
            .zip(ranges)
            .map(|(s, (lo, hi))| crate::normalize::ChannelStats {
                mean: 0.0,
                scale: *s,
                min: *lo,
                max: *hi,
                median: 0.0,
                iqr: 1.0,
                quantile_table: Vec::new(),
            })
            .collect();
        FittedNormalizer {
            strategy,
            scope: Scope::PerInstance,
            channels,
            global: crate::normalize::GlobalStats {
                mean: 0.0,
                scale: global_scale,
                min: global_range.0,
                max: global_range.1,
            },
            warnings: Vec::new(),
        }
    }

    fn unit_norm_weights(c: &ModelConfig) -> ModelWeights {
        let mut w = ModelWeights::zeros(c);
        w.layers[0].wq[0] = Matrix::identity(2);
        w.layers[0].wk[0] = Matrix::identity(2);
        w.layers[0].wv[0] = Matrix::identity(2);
        w.layers[0].wo = Matrix::identity(2);
        w.layers[0].w1 = Matrix::identity(2);
        w.layers[0].w2 = Matrix::identity(2);
        w
    }

    #[test]
    fn constants_zero_weights() {
        let c = cfg(2, 2, 1);
        let w = ModelWeights::zeros(&c);
        let k = compute_constants(&c, &w, C1Variant::Appendix).unwrap();
        assert_eq!(k.c1, 0.0);
        assert_eq!(k.c2, 1.0);
    }

    #[test]
    fn constants_unit_norm_hand_case() {
        // H=1, n=2, d=2, all spectral norms 1: C1 = 4*2/sqrt(2) + 1
        let c = cfg(2, 2, 1);
        let w = unit_norm_weights(&c);
        let k = compute_constants(&c, &w, C1Variant::Appendix).unwrap();
        let expect = 4.0 * 2.0 / 2f64.sqrt() + 1.0;
        assert!((k.c1 - expect).abs() < 1e-7);
        assert!((k.c1 - 6.65685).abs() < 1e-5);
        assert!((k.c2 - 2.0).abs() < 1e-9);
        let k2 = compute_constants(&c, &w, C1Variant::Theorem2Maintext).unwrap();
        assert!((k2.c1 - 7.65685).abs() < 1e-5);
        // exact +1 relationship
        assert_eq!(k2.c1, k.c1 + 1.0);
    }

    #[test]
    fn constants_reject_multi_layer() {
        let mut c = cfg(2, 2, 1);
        c.layers = 2;
        let w = ModelWeights::zeros(&c);
        assert!(matches!(
            compute_constants(&c, &w, C1Variant::Appendix),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn bound_zero_weight_standard_global() {
        let c = cfg(2, 2, 1);
        let w = ModelWeights::zeros(&c);
        let norm = normalizer_with(
            StrategyKind::StandardGlobal,
            &[1.0, 1.0],
            &[(0.0, 1.0), (0.0, 1.0)],
            1.0,
            (0.0, 1.0),
        );
        let report = compute_bound(&BoundQuery {
            epsilon: 0.1,
            sigma: 1.0,
            normalizer: &norm,
            cfg: &c,
            weights: &w,
            c1_variant: C1Variant::Appendix,
        })
        .unwrap();
        assert!((report.lipschitz_core - 4.0).abs() < 1e-12);
        assert!((report.strategy_factor - 2f64.sqrt()).abs() < 1e-12);
        assert!((report.gamma_raw - 0.56569).abs() < 1e-4, "{}", report.gamma_raw);
        assert_eq!(report.gamma_clamped, report.gamma_raw);
        assert!(!report.vacuous);
    }

    #[test]
    fn bound_unit_norm_standard_global() {
        let c = cfg(2, 2, 1);
        let w = unit_norm_weights(&c);
        let norm = normalizer_with(
            StrategyKind::StandardGlobal,
            &[1.0, 1.0],
            &[(0.0, 1.0), (0.0, 1.0)],
            1.0,
            (0.0, 1.0),
        );
        let report = compute_bound(&BoundQuery {
            epsilon: 0.01,
            sigma: 1.0,
            normalizer: &norm,
            cfg: &c,
            weights: &w,
            c1_variant: C1Variant::Appendix,
        })
        .unwrap();
        // sqrt(2) * 0.01 * 4 * (1 + 6.65685) * 2
        assert!((report.gamma_raw - 0.86628).abs() < 1e-4, "{}", report.gamma_raw);
    }

    #[test]
    fn bound_minmax_instance_hand_case() {
        let c = cfg(2, 2, 1);
        let w = ModelWeights::zeros(&c);
        let norm = normalizer_with(
            StrategyKind::MinmaxInstance,
            &[1.0, 1.0],
            &[(0.0, 2.0), (0.0, 0.5)],
            1.0,
            (0.0, 1.0),
        );
        let report = compute_bound(&BoundQuery {
            epsilon: 0.1,
            sigma: 1.0,
            normalizer: &norm,
            cfg: &c,
            weights: &w,
            c1_variant: C1Variant::Appendix,
        })
        .unwrap();
        assert!((report.strategy_factor - 4.25f64.sqrt()).abs() < 1e-12);
        assert!((report.gamma_raw - 0.82462).abs() < 1e-4, "{}", report.gamma_raw);
    }

    #[test]
    fn bound_rejects_robust_and_quantile() {
        let c = cfg(2, 2, 1);
        let w = ModelWeights::zeros(&c);
        for kind in [StrategyKind::Robust, StrategyKind::Quantile] {
            let norm = normalizer_with(kind, &[1.0, 1.0], &[(0.0, 1.0), (0.0, 1.0)], 1.0, (0.0, 1.0));
            let err = compute_bound(&BoundQuery {
                epsilon: 0.1,
                sigma: 1.0,
                normalizer: &norm,
                cfg: &c,
                weights: &w,
                c1_variant: C1Variant::Appendix,
            });
            assert!(matches!(err, Err(Error::Unsupported(_))), "{kind}");
        }
    }

    #[test]
    fn bound_homogeneity_and_scale_collapse() {
        let c = cfg(3, 4, 2);
        let mut c = c;
        c.ffn_hidden = 6;
        let w = init_weights(&c, 5, 0.7).unwrap();
        let norm_inst = normalizer_with(
            StrategyKind::StandardInstance,
            &[2.0; 4],
            &[(0.0, 2.0); 4],
            2.0,
            (0.0, 2.0),
        );
        let norm_glob = normalizer_with(
            StrategyKind::StandardGlobal,
            &[2.0; 4],
            &[(0.0, 2.0); 4],
            2.0,
            (0.0, 2.0),
        );
        let bound = |norm: &FittedNormalizer, eps: f64, sigma: f64| {
            compute_bound(&BoundQuery {
                epsilon: eps,
                sigma,
                normalizer: norm,
                cfg: &c,
                weights: &w,
                c1_variant: C1Variant::Appendix,
            })
            .unwrap()
            .gamma_raw
        };
        let g = bound(&norm_inst, 0.1, 1.0);
        assert!((bound(&norm_inst, 0.3, 1.0) - 3.0 * g).abs() <= 1e-12 * g.abs().max(1.0));
        assert!((bound(&norm_inst, 0.1, 2.0) - g / 2.0).abs() <= 1e-12 * g.abs().max(1.0));
        // equal scales: instance and global factors coincide
        let gi = bound(&norm_inst, 0.1, 1.0);
        let gg = bound(&norm_glob, 0.1, 1.0);
        assert!((gi - gg).abs() <= 1e-12 * gi.abs().max(1.0));
    }

    #[test]
    fn bound_is_independent_of_means_bitwise() {
        let c = cfg(3, 2, 1);
        let w = init_weights(&c, 6, 0.7).unwrap();
        let mut a = normalizer_with(
            StrategyKind::StandardInstance,
            &[1.5, 0.5],
            &[(0.0, 1.0), (0.0, 1.0)],
            1.0,
            (0.0, 1.0),
        );
        let mut b = a.clone();
        a.channels[0].mean = -3.0;
        b.channels[0].mean = 42.0;
        b.global.mean = 7.0;
        let report = |n: &FittedNormalizer| {
            serde_json::to_string(
                &compute_bound(&BoundQuery {
                    epsilon: 0.1,
                    sigma: 1.0,
                    normalizer: n,
                    cfg: &c,
                    weights: &w,
                    c1_variant: C1Variant::Appendix,
                })
                .unwrap(),
            )
            .unwrap()
        };
        assert_eq!(report(&a), report(&b));
    }

    #[test]
    fn gamma_strictly_decreasing_in_scales() {
        let c = cfg(3, 2, 1);
        let w = init_weights(&c, 8, 0.7).unwrap();
        let gamma = |scales: [f64; 2]| {
            let n = normalizer_with(
                StrategyKind::StandardInstance,
                &scales,
                &[(0.0, 1.0), (0.0, 1.0)],
                1.0,
                (0.0, 1.0),
            );
            compute_bound(&BoundQuery {
                epsilon: 0.1,
                sigma: 1.0,
                normalizer: &n,
                cfg: &c,
                weights: &w,
                c1_variant: C1Variant::Appendix,
            })
            .unwrap()
            .gamma_raw
        };
        assert!(gamma([1.0, 1.0]) > gamma([1.5, 1.0]));
        assert!(gamma([1.5, 1.0]) > gamma([1.5, 1.3]));
    }

    fn gaussian_dataset(n_inst: usize, channels: usize, len: usize, seed: u64) -> Vec<TimeSeriesInstance> {
        let base = RngStream::new(seed, 1);
        (0..n_inst)
            .map(|i| {
                let mut rng = base.substream(i as u64);
                TimeSeriesInstance::new(
                    Matrix::new(channels, len, rng.gaussian_vec(channels * len)).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn bypass_estimates_are_exact() {
        let c = cfg(4, 2, 1);
        let w = ModelWeights::zeros(&c);
        let data = gaussian_dataset(8, 2, 4, 3);
        let norm = fit_instance(&NormStrategy::new(StrategyKind::None), &data[0]).unwrap();
        let opts = EstimateOptions {
            model_bypass: true,
            ..Default::default()
        };
        let rng = RngStream::new(11, 0);
        // every distance <= epsilon=1 < sigma=2
        let est = estimate_expressivity(
            &c, &w, &norm, &data, 1.0, 2.0, 500, &rng, EstimateMode::Pair, &opts,
        )
        .unwrap();
        assert_eq!(est.p_hat, 0.0);
        assert_eq!(est.wilson_ci.0, 0.0);
        // sigma = 0: any nonzero perturbation separates
        let est = estimate_expressivity(
            &c, &w, &norm, &data, 1.0, 0.0, 500, &rng, EstimateMode::Pair, &opts,
        )
        .unwrap();
        assert_eq!(est.p_hat, 1.0);
        assert!(est.max_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_weight_model_with_prescan_sigma_gives_zero() {
        let c = cfg(6, 2, 1);
        let w = ModelWeights::zeros(&c);
        let data = gaussian_dataset(16, 2, 6, 4);
        let strategy = NormStrategy::new(StrategyKind::StandardInstance);
        let ds = crate::data::Dataset::new("scan", data.clone()).unwrap();
        let norm = fit_dataset(&strategy, &ds).unwrap();
        let rng = RngStream::new(12, 0);
        let opts = EstimateOptions::default();
        // pre-scan the empirical distances, then set sigma above the support
        let pre = estimate_expressivity(
            &c, &w, &norm, &data, 0.1, f64::INFINITY, 10_000, &rng, EstimateMode::Pair, &opts,
        )
        .unwrap();
        let sigma = 1.1 * pre.max_ratio * 0.1;
        let est = estimate_expressivity(
            &c, &w, &norm, &data, 0.1, sigma, 10_000, &rng, EstimateMode::Pair, &opts,
        )
        .unwrap();
        assert_eq!(est.p_hat, 0.0);
    }

    #[test]
    fn estimates_are_deterministic_per_seed() {
        let c = cfg(4, 2, 1);
        let w = init_weights(&c, 13, 0.5).unwrap();
        let data = gaussian_dataset(8, 2, 4, 5);
        let ds = crate::data::Dataset::new("d", data.clone()).unwrap();
        let norm = fit_dataset(&NormStrategy::new(StrategyKind::StandardGlobal), &ds).unwrap();
        let opts = EstimateOptions::default();
        let e1 = estimate_expressivity(
            &c, &w, &norm, &data, 0.5, 0.05, 300, &RngStream::new(77, 0), EstimateMode::Pair, &opts,
        )
        .unwrap();
        let e2 = estimate_expressivity(
            &c, &w, &norm, &data, 0.5, 0.05, 300, &RngStream::new(77, 0), EstimateMode::Pair, &opts,
        )
        .unwrap();
        assert_eq!(e1.p_hat, e2.p_hat);
        assert_eq!(e1.max_ratio.to_bits(), e2.max_ratio.to_bits());
        let e3 = estimate_expressivity(
            &c, &w, &norm, &data, 0.5, 0.05, 300, &RngStream::new(78, 0), EstimateMode::Pair, &opts,
        )
        .unwrap();
        assert!(e1.p_hat != e3.p_hat || e1.max_ratio != e3.max_ratio);
    }

    #[test]
    fn doubling_samples_shrinks_wilson_ci_like_sqrt2() {
        let c = cfg(2, 2, 1);
        let w = ModelWeights::zeros(&c);
        let data = gaussian_dataset(8, 2, 2, 6);
        let norm = fit_instance(&NormStrategy::new(StrategyKind::None), &data[0]).unwrap();
        let opts = EstimateOptions {
            model_bypass: true,
            ..Default::default()
        };
        // identity f, radius CDF r^(nd): sigma at the p=0.5 radius
        let sigma = 0.5f64.powf(1.0 / 4.0);
        let rng = RngStream::new(14, 0);
        let width = |samples: usize| {
            let e = estimate_expressivity(
                &c, &w, &norm, &data, 1.0, sigma, samples, &rng, EstimateMode::Pair, &opts,
            )
            .unwrap();
            e.wilson_ci.1 - e.wilson_ci.0
        };
        let ratio = width(8000) / width(4000);
        let expect = 1.0 / 2f64.sqrt();
        assert!(
            (ratio - expect).abs() <= 0.2 * expect,
            "ratio {ratio} vs {expect}"
        );
    }

    #[test]
    fn max_of_k_dominates_pair_mode() {
        let c = cfg(4, 2, 1);
        let w = init_weights(&c, 15, 0.5).unwrap();
        let data = gaussian_dataset(8, 2, 4, 7);
        let ds = crate::data::Dataset::new("d", data.clone()).unwrap();
        let norm = fit_dataset(&NormStrategy::new(StrategyKind::StandardGlobal), &ds).unwrap();
        let opts = EstimateOptions::default();
        let rng = RngStream::new(16, 0);
        let pair = estimate_expressivity(
            &c, &w, &norm, &data, 0.5, 0.02, 400, &rng, EstimateMode::Pair, &opts,
        )
        .unwrap();
        let maxk = estimate_expressivity(
            &c, &w, &norm, &data, 0.5, 0.02, 400, &rng, EstimateMode::MaxOfK { k: 8 }, &opts,
        )
        .unwrap();
        assert!(maxk.p_hat >= pair.p_hat);
    }

    #[test]
    fn scan_zero_weight_standard_instance_no_violations() {
        let c = cfg(8, 2, 1);
        let w = ModelWeights::zeros(&c);
        let data = gaussian_dataset(32, 2, 8, 8);
        let ds = crate::data::Dataset::new("scan", data.clone()).unwrap();
        let norm = fit_dataset(&NormStrategy::new(StrategyKind::StandardInstance), &ds).unwrap();
        let report = lipschitz_scan(
            &c,
            &w,
            &norm,
            &data,
            0.25,
            2000,
            &RngStream::new(17, 0),
            &ScanOptions::default(),
        )
        .unwrap();
        assert_eq!(report.violations, 0, "max ratio {} vs bound {}", report.max_ratio, report.bound);
        assert!(report.kept > 0);
    }

    #[test]
    fn scan_identity_bypass_ratio_is_one() {
        let c = cfg(4, 2, 1);
        let w = ModelWeights::zeros(&c);
        let data = gaussian_dataset(8, 2, 4, 9);
        let norm = fit_instance(&NormStrategy::new(StrategyKind::None), &data[0]).unwrap();
        let opts = ScanOptions {
            model_bypass: true,
            ..Default::default()
        };
        let report = lipschitz_scan(
            &c, &w, &norm, &data, 0.5, 500, &RngStream::new(18, 0), &opts,
        )
        .unwrap();
        assert!(report.max_ratio <= 1.0 + 1e-12);
        // bound = S = 1 for the identity strategy; ratios of exactly 1 do
        // not exceed it
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn scan_detector_fires_on_halved_bound_in_degenerate_regime() {
        // with the degenerate-token exclusion disabled, bare layer norm's
        // local sensitivity spikes past half the bound
        let c = cfg(4, 2, 1);
        let w = ModelWeights::zeros(&c);
        let data = gaussian_dataset(32, 2, 4, 10);
        let ds = crate::data::Dataset::new("scan", data.clone()).unwrap();
        let norm = fit_dataset(&NormStrategy::new(StrategyKind::StandardInstance), &ds).unwrap();
        let faulty = ScanOptions {
            bound_factor: 0.5,
            min_token_std: 0.0,
            ..Default::default()
        };
        let report = lipschitz_scan(
            &c, &w, &norm, &data, 0.25, 4000, &RngStream::new(19, 0), &faulty,
        )
        .unwrap();
        assert!(report.violations > 0, "max ratio {} bound {}", report.max_ratio, report.bound);
    }
}
