//! The preprocessing strategy suite: fit statistics per channel or pooled,
//! transform series, and invert where defined.
//!
//! A [`FittedNormalizer`] is immutable after [`fit_instance`]/[`fit_dataset`]
//! and safe to share across sweep workers. Degenerate channels (zero spread)
//! clamp their scale to the strategy's eps floor and record a warning instead
//! of failing, so sweeps always complete.

use crate::data::{Dataset, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    StandardInstance,
    StandardGlobal,
    MinmaxInstance,
    MinmaxGlobal,
    Robust,
    Quantile,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::None,
        StrategyKind::StandardInstance,
        StrategyKind::StandardGlobal,
        StrategyKind::MinmaxInstance,
        StrategyKind::MinmaxGlobal,
        StrategyKind::Robust,
        StrategyKind::Quantile,
    ];

    /// The exact strings used in result records and configs.
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::StandardInstance => "standard_instance",
            StrategyKind::StandardGlobal => "standard_global",
            StrategyKind::MinmaxInstance => "minmax_instance",
            StrategyKind::MinmaxGlobal => "minmax_global",
            StrategyKind::Robust => "robust",
            StrategyKind::Quantile => "quantile",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }

    /// Per-channel statistics (vs one pooled statistic across channels).
    pub fn is_per_channel(&self) -> bool {
        matches!(
            self,
            StrategyKind::StandardInstance
                | StrategyKind::MinmaxInstance
                | StrategyKind::Robust
                | StrategyKind::Quantile
        )
    }

    /// Minimum observations per channel required by the fit.
    fn min_observations(&self) -> usize {
        match self {
            StrategyKind::Robust | StrategyKind::Quantile => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStrategy {
    pub kind: StrategyKind,
    /// Number of knots in the empirical-CDF table (Quantile only).
    /// Defaults to `min(1000, observations)`.
    pub quantile_count: Option<usize>,
    /// Floor applied to zero scales/ranges so degenerate channels warn
    /// instead of dividing by zero.
    pub eps_floor: f64,
    /// Divide by the variance instead of the standard deviation in the
    /// Standard strategies (the literal reading of "v"); off by default.
    pub interpret_v_as_variance: bool,
}

impl NormStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            quantile_count: None,
            eps_floor: 1e-8,
            interpret_v_as_variance: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(q) = self.quantile_count {
            if q < 2 {
                return Err(Error::Config(format!("quantile_count must be >= 2, got {q}")));
            }
        }
        if self.eps_floor <= 0.0 {
            return Err(Error::Config("eps_floor must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Statistics from the single instance being transformed.
    PerInstance,
    /// Statistics pooled over the training split.
    DatasetLevel,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::PerInstance => "per_instance",
            Scope::DatasetLevel => "dataset_level",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_instance" => Ok(Scope::PerInstance),
            "dataset_level" => Ok(Scope::DatasetLevel),
            other => Err(Error::Config(format!("unknown scope {other:?}"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    /// Standard deviation (or variance under `interpret_v_as_variance`),
    /// clamped to the eps floor.
    pub scale: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    /// Type-7 interquartile range, clamped to the eps floor.
    pub iqr: f64,
    /// Sorted empirical-CDF knots (Quantile strategy only).
    pub quantile_table: Vec<f64>,
}

impl ChannelStats {
    pub fn range(&self, eps_floor: f64) -> f64 {
        (self.max - self.min).max(eps_floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mean: f64,
    pub scale: f64,
    pub min: f64,
    pub max: f64,
}

impl GlobalStats {
    pub fn range(&self, eps_floor: f64) -> f64 {
        (self.max - self.min).max(eps_floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Warning {
    /// Channel spread hit the eps floor during fit; `None` means the pooled
    /// global statistic.
    DegenerateChannel { channel: Option<usize> },
    /// Quantile inverse saw values outside [0, 1] and clamped them.
    ClampedQuantile { channel: usize, count: usize },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::DegenerateChannel { channel: Some(c) } => {
                write!(f, "channel {c} has no spread; scale clamped to the eps floor")
            }
            Warning::DegenerateChannel { channel: None } => {
                write!(f, "pooled statistics have no spread; scale clamped to the eps floor")
            }
            Warning::ClampedQuantile { channel, count } => {
                write!(f, "channel {channel}: {count} values outside [0,1] clamped in quantile inverse")
            }
        }
    }
}

/// A strategy tag plus the fitted statistics it needs, with scope metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedNormalizer {
    pub strategy: NormStrategy,
    pub scope: Scope,
    pub channels: Vec<ChannelStats>,
    pub global: GlobalStats,
    pub warnings: Vec<Warning>,
}

/// Fit per-instance statistics of one series.
pub fn fit_instance(strategy: &NormStrategy, x: &TimeSeriesInstance) -> Result<FittedNormalizer> {
    strategy.validate()?;
    if x.is_empty() {
        return Err(Error::Empty("fit: empty instance".into()));
    }
    let channels: Vec<&[f64]> = (0..x.channels()).map(|c| x.channel(c)).collect();
    fit_from_channels(strategy, Scope::PerInstance, &channels)
}

/// Fit dataset-level statistics: each channel pooled across every training
/// instance, plus one statistic pooled over everything.
pub fn fit_dataset(strategy: &NormStrategy, train: &Dataset) -> Result<FittedNormalizer> {
    strategy.validate()?;
    train.validate()?;
    let n_ch = train.channels();
    let pooled: Vec<Vec<f64>> = (0..n_ch)
        .map(|c| {
            train
                .instances
                .iter()
                .flat_map(|inst| inst.channel(c).iter().copied())
                .collect()
        })
        .collect();
    let views: Vec<&[f64]> = pooled.iter().map(|v| v.as_slice()).collect();
    fit_from_channels(strategy, Scope::DatasetLevel, &views)
}

fn fit_from_channels(
    strategy: &NormStrategy,
    scope: Scope,
    channels: &[&[f64]],
) -> Result<FittedNormalizer> {
    let min_obs = strategy.kind.min_observations();
    let mut warnings = Vec::new();
    let mut stats = Vec::with_capacity(channels.len());
    for (ci, ch) in channels.iter().enumerate() {
        if ch.len() < min_obs {
            return Err(Error::Empty(format!(
                "fit: channel {ci} has {} observations, {} requires >= {min_obs}",
                ch.len(),
                strategy.kind
            )));
        }
        let (s, degenerate) = channel_stats(ch, strategy);
        if degenerate {
            warnings.push(Warning::DegenerateChannel { channel: Some(ci) });
        }
        stats.push(s);
    }
    let all: Vec<f64> = channels.iter().flat_map(|c| c.iter().copied()).collect();
    let (g, g_degenerate) = global_stats(&all, strategy);
    if g_degenerate && !strategy.kind.is_per_channel() && strategy.kind != StrategyKind::None {
        warnings.push(Warning::DegenerateChannel { channel: None });
    }
    Ok(FittedNormalizer {
        strategy: strategy.clone(),
        scope,
        channels: stats,
        global: g,
        warnings,
    })
}

fn channel_stats(values: &[f64], strategy: &NormStrategy) -> (ChannelStats, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let raw_scale = if strategy.interpret_v_as_variance { var } else { std };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    let median = type7_quantile(&sorted, 0.5);
    let raw_iqr = type7_quantile(&sorted, 0.75) - type7_quantile(&sorted, 0.25);
    let eps = strategy.eps_floor;
    let degenerate = match strategy.kind {
        StrategyKind::StandardInstance | StrategyKind::StandardGlobal => raw_scale < eps,
        StrategyKind::MinmaxInstance | StrategyKind::MinmaxGlobal => max - min < eps,
        StrategyKind::Robust => raw_iqr < eps,
        StrategyKind::Quantile => max - min < eps,
        StrategyKind::None => false,
    };
    let quantile_table = if strategy.kind == StrategyKind::Quantile {
        let m = strategy
            .quantile_count
            .unwrap_or_else(|| sorted.len().min(1000))
            .max(2);
        (0..m)
            .map(|j| type7_quantile(&sorted, j as f64 / (m - 1) as f64))
            .collect()
    } else {
        Vec::new()
    };
    (
        ChannelStats {
            mean,
            scale: raw_scale.max(eps),
            min,
            max,
            median,
            iqr: raw_iqr.max(eps),
            quantile_table,
        },
        degenerate,
    )
}

fn global_stats(values: &[f64], strategy: &NormStrategy) -> (GlobalStats, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let raw_scale = if strategy.interpret_v_as_variance { var } else { var.sqrt() };
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let eps = strategy.eps_floor;
    let degenerate = match strategy.kind {
        StrategyKind::StandardGlobal => raw_scale < eps,
        StrategyKind::MinmaxGlobal => max - min < eps,
        _ => false,
    };
    (
        GlobalStats {
            mean,
            scale: raw_scale.max(eps),
            min,
            max,
        },
        degenerate,
    )
}

/// Linear-interpolation (type 7) quantile of sorted data.
fn type7_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

fn quantile_forward(table: &[f64], x: f64) -> f64 {
    let m = table.len();
    if x <= table[0] {
        return 0.0;
    }
    if x >= table[m - 1] {
        return 1.0;
    }
    let i = table.partition_point(|q| *q <= x);
    let (lo, hi) = (table[i - 1], table[i]);
    let t = (x - lo) / (hi - lo);
    ((i - 1) as f64 + t) / (m - 1) as f64
}

fn quantile_inverse(table: &[f64], y: f64) -> f64 {
    let m = table.len();
    let p = y * (m - 1) as f64;
    let j = p.floor() as usize;
    if j >= m - 1 {
        return table[m - 1];
    }
    table[j] + (p - j as f64) * (table[j + 1] - table[j])
}

impl FittedNormalizer {
    fn check_channels(&self, x: &TimeSeriesInstance, context: &str) -> Result<()> {
        if x.channels() != self.channels.len() {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                left: format!("{} channels", x.channels()),
                right: format!("{} fitted channels", self.channels.len()),
            });
        }
        Ok(())
    }

    /// Forward map of a single value through channel `c`'s statistics.
    pub fn transform_value(&self, c: usize, v: f64) -> f64 {
        let eps = self.strategy.eps_floor;
        match self.strategy.kind {
            StrategyKind::None => v,
            StrategyKind::StandardInstance => (v - self.channels[c].mean) / self.channels[c].scale,
            StrategyKind::StandardGlobal => (v - self.global.mean) / self.global.scale,
            StrategyKind::MinmaxInstance => {
                (v - self.channels[c].min) / self.channels[c].range(eps)
            }
            StrategyKind::MinmaxGlobal => (v - self.global.min) / self.global.range(eps),
            StrategyKind::Robust => (v - self.channels[c].median) / self.channels[c].iqr,
            StrategyKind::Quantile => quantile_forward(&self.channels[c].quantile_table, v),
        }
    }

    /// Inverse map of a single value through channel `c`'s statistics.
    /// Quantile values are clamped into [0, 1] first; the caller counts
    /// clamps for warning reporting.
    pub fn inverse_value(&self, c: usize, v: f64) -> f64 {
        let eps = self.strategy.eps_floor;
        match self.strategy.kind {
            StrategyKind::None => v,
            StrategyKind::StandardInstance => v * self.channels[c].scale + self.channels[c].mean,
            StrategyKind::StandardGlobal => v * self.global.scale + self.global.mean,
            StrategyKind::MinmaxInstance => {
                v * self.channels[c].range(eps) + self.channels[c].min
            }
            StrategyKind::MinmaxGlobal => v * self.global.range(eps) + self.global.min,
            StrategyKind::Robust => v * self.channels[c].iqr + self.channels[c].median,
            StrategyKind::Quantile => {
                quantile_inverse(&self.channels[c].quantile_table, v.clamp(0.0, 1.0))
            }
        }
    }

    /// Apply the fitted strategy to an instance. Pure; the label and target
    /// pass through untouched.
    pub fn transform(&self, x: &TimeSeriesInstance) -> Result<TimeSeriesInstance> {
        self.check_channels(x, "transform")?;
        let mut values = Matrix::zeros(x.channels(), x.len());
        for c in 0..x.channels() {
            for (t, v) in x.channel(c).iter().enumerate() {
                values.set(c, t, self.transform_value(c, *v));
            }
        }
        Ok(TimeSeriesInstance {
            values,
            label: x.label.clone(),
            target: x.target.clone(),
        })
    }

    /// Invert the fitted strategy. Returns the reconstruction plus any
    /// warnings (degenerate channels, quantile clamping).
    pub fn inverse_transform(
        &self,
        y: &TimeSeriesInstance,
    ) -> Result<(TimeSeriesInstance, Vec<Warning>)> {
        self.check_channels(y, "inverse_transform")?;
        let mut warnings: Vec<Warning> = self
            .warnings
            .iter()
            .filter(|w| matches!(w, Warning::DegenerateChannel { .. }))
            .cloned()
            .collect();
        let mut values = Matrix::zeros(y.channels(), y.len());
        for c in 0..y.channels() {
            let mut clamped = 0usize;
            for (t, v) in y.channel(c).iter().enumerate() {
                if self.strategy.kind == StrategyKind::Quantile && !(0.0..=1.0).contains(v) {
                    clamped += 1;
                }
                values.set(c, t, self.inverse_value(c, *v));
            }
            if clamped > 0 {
                warnings.push(Warning::ClampedQuantile { channel: c, count: clamped });
            }
        }
        Ok((
            TimeSeriesInstance {
                values,
                label: y.label.clone(),
                target: y.target.clone(),
            },
            warnings,
        ))
    }

    /// Forward map of a scalar series that continues channel `c` (used to
    /// normalize forecast targets with the context's statistics).
    pub fn transform_series(&self, c: usize, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| self.transform_value(c, *v)).collect()
    }

    pub fn inverse_series(&self, c: usize, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| self.inverse_value(c, *v)).collect()
    }

    /// Per-channel scales v_i for the standard-normalization bound.
    pub fn channel_scales(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.scale).collect()
    }

    /// Per-channel ranges for the min-max bound.
    pub fn channel_ranges(&self) -> Vec<f64> {
        self.channels
            .iter()
            .map(|c| c.range(self.strategy.eps_floor))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;
    use approx::assert_relative_eq;

    fn inst(channels: &[Vec<f64>]) -> TimeSeriesInstance {
        TimeSeriesInstance::new(Matrix::from_rows(channels).unwrap())
    }

    fn fitted(kind: StrategyKind, x: &TimeSeriesInstance) -> FittedNormalizer {
        fit_instance(&NormStrategy::new(kind), x).unwrap()
    }

    #[test]
    fn standard_instance_fit_hand_case() {
        let norm = fitted(StrategyKind::StandardInstance, &inst(&[vec![2.0, 4.0, 6.0]]));
        assert_relative_eq!(norm.channels[0].mean, 4.0);
        assert_relative_eq!(norm.channels[0].scale, (8.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert!((norm.channels[0].scale - 1.63299).abs() < 1e-5);
    }

    #[test]
    fn minmax_fit_hand_case() {
        let norm = fitted(StrategyKind::MinmaxInstance, &inst(&[vec![2.0, 4.0, 6.0]]));
        assert_eq!(norm.channels[0].min, 2.0);
        assert_eq!(norm.channels[0].max, 6.0);
    }

    #[test]
    fn robust_fit_type7_quartiles() {
        let norm = fitted(StrategyKind::Robust, &inst(&[vec![1.0, 2.0, 3.0, 4.0, 100.0]]));
        assert_eq!(norm.channels[0].median, 3.0);
        assert_eq!(norm.channels[0].iqr, 2.0);
    }

    #[test]
    fn standard_transform_hand_case() {
        let x = inst(&[vec![2.0, 4.0, 6.0]]);
        let out = fitted(StrategyKind::StandardInstance, &x).transform(&x).unwrap();
        let expected = [-1.22474, 0.0, 1.22474];
        for (v, e) in out.channel(0).iter().zip(expected) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn minmax_transform_and_none_identity() {
        let x = inst(&[vec![2.0, 4.0, 6.0]]);
        let out = fitted(StrategyKind::MinmaxInstance, &x).transform(&x).unwrap();
        assert_eq!(out.channel(0), &[0.0, 0.5, 1.0]);
        let same = fitted(StrategyKind::None, &x).transform(&x).unwrap();
        assert_eq!(same.values, x.values);
    }

    #[test]
    fn round_trips_within_1e9() {
        let mut rng = RngStream::new(3, 0);
        for kind in [
            StrategyKind::StandardInstance,
            StrategyKind::StandardGlobal,
            StrategyKind::MinmaxInstance,
            StrategyKind::MinmaxGlobal,
            StrategyKind::Robust,
            StrategyKind::Quantile,
        ] {
            let x = inst(&[rng.gaussian_vec(20), rng.gaussian_vec(20)]);
            let norm = fitted(kind, &x);
            let y = norm.transform(&x).unwrap();
            let (back, warnings) = norm.inverse_transform(&y).unwrap();
            assert!(warnings.is_empty(), "{kind}: {warnings:?}");
            for c in 0..2 {
                for (a, b) in back.channel(c).iter().zip(x.channel(c)) {
                    assert!((a - b).abs() < 1e-9, "{kind}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn quantile_round_trip_hand_case() {
        let x = inst(&[vec![10.0, 20.0, 30.0]]);
        let norm = fitted(StrategyKind::Quantile, &x);
        let y = norm.transform(&x).unwrap();
        assert_eq!(y.channel(0), &[0.0, 0.5, 1.0]);
        let (back, _) = norm.inverse_transform(&y).unwrap();
        for (a, b) in back.channel(0).iter().zip(x.channel(0)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_is_monotone_and_in_unit_interval() {
        let mut rng = RngStream::new(9, 1);
        let x = inst(&[rng.gaussian_vec(50)]);
        let norm = fitted(StrategyKind::Quantile, &x);
        let mut probes: Vec<f64> = rng.gaussian_vec(200).iter().map(|v| v * 2.0).collect();
        probes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = -1.0;
        for p in probes {
            let y = norm.transform_value(0, p);
            assert!((0.0..=1.0).contains(&y));
            assert!(y >= prev);
            prev = y;
        }
    }

    #[test]
    fn quantile_inverse_clamps_with_warning() {
        let x = inst(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let norm = fitted(StrategyKind::Quantile, &x);
        let y = inst(&[vec![-0.5, 0.5, 1.5]]);
        let (back, warnings) = norm.inverse_transform(&y).unwrap();
        assert_eq!(back.channel(0)[0], 1.0);
        assert_eq!(back.channel(0)[2], 4.0);
        assert!(matches!(
            warnings.as_slice(),
            [Warning::ClampedQuantile { channel: 0, count: 2 }]
        ));
    }

    #[test]
    fn standard_instance_moments_property() {
        let mut rng = RngStream::new(21, 7);
        for _ in 0..50 {
            let x = inst(&[rng.gaussian_vec(17).iter().map(|v| 5.0 * v + 3.0).collect()]);
            let out = fitted(StrategyKind::StandardInstance, &x).transform(&x).unwrap();
            let ch = out.channel(0);
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64;
            assert!(mean.abs() <= 1e-9);
            assert!((var.sqrt() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn minmax_instance_range_property() {
        let mut rng = RngStream::new(22, 8);
        for _ in 0..50 {
            let x = inst(&[rng.gaussian_vec(17)]);
            let out = fitted(StrategyKind::MinmaxInstance, &x).transform(&x).unwrap();
            let ch = out.channel(0);
            let min = ch.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(min.abs() <= 1e-12 && (max - 1.0).abs() <= 1e-12);
            assert!(ch.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn affine_invariance_of_instance_transforms() {
        let mut rng = RngStream::new(23, 9);
        for kind in [StrategyKind::StandardInstance, StrategyKind::MinmaxInstance] {
            let base = rng.gaussian_vec(13);
            let x = inst(&[base.clone()]);
            let scaled = inst(&[base.iter().map(|v| 3.7 * v - 11.0).collect()]);
            let a = fitted(kind, &x).transform(&x).unwrap();
            let b = fitted(kind, &scaled).transform(&scaled).unwrap();
            for (u, v) in a.channel(0).iter().zip(b.channel(0)) {
                assert!((u - v).abs() < 1e-9, "{kind}");
            }
        }
    }

    #[test]
    fn instance_transforms_are_idempotent() {
        let mut rng = RngStream::new(24, 10);
        for kind in [StrategyKind::StandardInstance, StrategyKind::MinmaxInstance] {
            let x = inst(&[rng.gaussian_vec(13), rng.gaussian_vec(13)]);
            let once = fitted(kind, &x).transform(&x).unwrap();
            let twice = fitted(kind, &once).transform(&once).unwrap();
            for c in 0..2 {
                for (u, v) in once.channel(c).iter().zip(twice.channel(c)) {
                    assert!((u - v).abs() < 1e-9, "{kind}");
                }
            }
        }
    }

    #[test]
    fn degenerate_channel_warns_and_clamps() {
        let x = inst(&[vec![5.0, 5.0, 5.0]]);
        for kind in [
            StrategyKind::StandardInstance,
            StrategyKind::MinmaxInstance,
            StrategyKind::Robust,
        ] {
            let norm = fitted(kind, &x);
            assert!(
                matches!(norm.warnings.as_slice(), [Warning::DegenerateChannel { channel: Some(0) }]),
                "{kind}: {:?}",
                norm.warnings
            );
            let out = norm.transform(&x).unwrap();
            assert!(out.values.is_finite());
            assert!(out.channel(0).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn robust_and_quantile_need_two_observations() {
        let x = inst(&[vec![1.0]]);
        for kind in [StrategyKind::Robust, StrategyKind::Quantile] {
            assert!(matches!(
                fit_instance(&NormStrategy::new(kind), &x),
                Err(Error::Empty(_))
            ));
        }
        assert!(fit_instance(&NormStrategy::new(StrategyKind::StandardInstance), &x).is_ok());
    }

    #[test]
    fn dataset_fit_pools_training_split_only() {
        let train = Dataset::new(
            "train",
            vec![inst(&[vec![0.0, 2.0]]), inst(&[vec![4.0, 6.0]])],
        )
        .unwrap();
        let strategy = NormStrategy::new(StrategyKind::StandardInstance);
        let norm = fit_dataset(&strategy, &train).unwrap();
        assert_relative_eq!(norm.channels[0].mean, 3.0);
        assert_eq!(norm.scope, Scope::DatasetLevel);
        // transforming a held-out instance must not touch the fitted stats
        let before = norm.clone();
        let held_out = inst(&[vec![100.0, 200.0]]);
        let _ = norm.transform(&held_out).unwrap();
        assert_eq!(norm, before);
    }

    #[test]
    fn global_scope_pools_all_channels_of_the_instance() {
        let x = inst(&[vec![0.0, 0.0], vec![10.0, 10.0]]);
        let norm = fitted(StrategyKind::StandardGlobal, &x);
        assert_relative_eq!(norm.global.mean, 5.0);
        assert_relative_eq!(norm.global.scale, 5.0);
        let out = norm.transform(&x).unwrap();
        assert_eq!(out.channel(0), &[-1.0, -1.0]);
        assert_eq!(out.channel(1), &[1.0, 1.0]);
    }

    #[test]
    fn interpret_v_as_variance_divides_by_variance() {
        let x = inst(&[vec![2.0, 4.0, 6.0]]);
        let mut strategy = NormStrategy::new(StrategyKind::StandardInstance);
        strategy.interpret_v_as_variance = true;
        let norm = fit_instance(&strategy, &x).unwrap();
        assert_relative_eq!(norm.channels[0].scale, 8.0 / 3.0, epsilon = 1e-12);
        let out = norm.transform(&x).unwrap();
        assert_relative_eq!(out.channel(0)[0], -2.0 / (8.0 / 3.0), epsilon = 1e-12);
    }

    #[test]
    fn strategy_names_round_trip() {
        let names = [
            "none",
            "standard_instance",
            "standard_global",
            "minmax_instance",
            "minmax_global",
            "robust",
            "quantile",
        ];
        for (kind, name) in StrategyKind::ALL.iter().zip(names) {
            assert_eq!(kind.as_str(), name);
            assert_eq!(StrategyKind::parse(name).unwrap(), *kind);
        }
        assert!(StrategyKind::parse("zscore").is_err());
    }
}
