//! TOML configuration schema for the CLI. Every key maps 1:1 onto a field
//! of the library types; see README for the full reference.

use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::expressivity::{C1Variant, EstimateMode, PerturbSpace};
use crate::grad::{LossKind, TrainConfig};
use crate::model::{
    init_weights, load_weights, Activation, HeadKind, ModelConfig, ModelWeights,
};
use crate::normalize::{
    fit_dataset, fit_instance, ChannelStats, FittedNormalizer, GlobalStats, NormStrategy, Scope,
    StrategyKind,
};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub model: Option<ModelSection>,
    pub weights: Option<WeightsSection>,
    pub normalizer: Option<NormalizerSection>,
    pub bound: Option<BoundSection>,
    pub estimate: Option<EstimateSection>,
    pub dataset: Option<DatasetSection>,
    pub sweep: Option<SweepSection>,
    pub train: Option<TrainSection>,
}

impl LabConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn require_model(&self) -> Result<&ModelSection> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("missing [model] section".into()))
    }

    pub fn require_bound(&self) -> Result<&BoundSection> {
        self.bound
            .as_ref()
            .ok_or_else(|| Error::Config("missing [bound] section (epsilon, sigma)".into()))
    }

    pub fn require_normalizer(&self) -> Result<&NormalizerSection> {
        self.normalizer
            .as_ref()
            .ok_or_else(|| Error::Config("missing [normalizer] section".into()))
    }

    pub fn require_sweep(&self) -> Result<&SweepSection> {
        self.sweep
            .as_ref()
            .ok_or_else(|| Error::Config("missing [sweep] section".into()))
    }
}

fn default_heads() -> usize {
    1
}
fn default_layers() -> usize {
    1
}
fn default_activation() -> String {
    "tanh".into()
}
fn default_head() -> String {
    "classification".into()
}
fn default_head_size() -> usize {
    2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n: Option<usize>,
    pub d: Option<usize>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub ffn_hidden: Option<usize>,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub positional_encoding: bool,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_head")]
    pub head: String,
    #[serde(default = "default_head_size")]
    pub head_size: usize,
    pub tag: Option<String>,
}

impl ModelSection {
    pub fn activation(&self) -> Result<Activation> {
        match self.activation.as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    pub fn head_kind(&self) -> Result<HeadKind> {
        match self.head.as_str() {
            "classification" => Ok(HeadKind::Classification {
                classes: self.head_size,
            }),
            "forecast" => Ok(HeadKind::Forecast {
                horizon: self.head_size,
            }),
            other => Err(Error::Config(format!("unknown head {other:?}"))),
        }
    }

    /// Fixed-shape model config; `n`/`d` must be present (the sweep derives
    /// them from data instead).
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let n = self.n.ok_or_else(|| Error::Config("missing model.n".into()))?;
        let d = self.d.ok_or_else(|| Error::Config("missing model.d".into()))?;
        self.to_model_config_with(n, d, self.head_kind()?)
    }

    pub fn to_model_config_with(&self, n: usize, d: usize, head: HeadKind) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n,
            d,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden.unwrap_or(4 * d),
            layers: self.layers,
            positional_encoding: self.positional_encoding,
            activation: self.activation()?,
            head,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tag(&self, cfg: &ModelConfig) -> String {
        self.tag
            .clone()
            .unwrap_or_else(|| format!("enc-d{}h{}l{}", cfg.d, cfg.heads, cfg.layers))
    }
}

fn default_weight_source() -> String {
    "zero".into()
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    /// "zero", "seed" or "file"
    #[serde(default = "default_weight_source")]
    pub source: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub path: Option<PathBuf>,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            source: default_weight_source(),
            seed: 0,
            scale: default_scale(),
            path: None,
        }
    }
}

impl WeightsSection {
    /// Materialize weights. A "file" source also returns the stored config,
    /// which replaces the `[model]` shape.
    pub fn resolve(&self, cfg: &ModelConfig) -> Result<(ModelConfig, ModelWeights)> {
        match self.source.as_str() {
            "zero" => Ok((cfg.clone(), ModelWeights::zeros(cfg))),
            "seed" => Ok((cfg.clone(), init_weights(cfg, self.seed, self.scale)?)),
            "file" => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("weights.source = \"file\" needs weights.path".into()))?;
                load_weights(path)
            }
            other => Err(Error::Config(format!("unknown weights.source {other:?}"))),
        }
    }
}

fn default_norm_source() -> String {
    "stats".into()
}
fn default_scope() -> String {
    "per_instance".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerSection {
    pub strategy: String,
    #[serde(default = "default_scope")]
    pub scope: String,
    /// "stats" (explicit statistics below) or "fit" (fit on the dataset).
    #[serde(default = "default_norm_source")]
    pub source: String,
    pub scales: Option<Vec<f64>>,
    pub ranges: Option<Vec<f64>>,
    pub global_scale: Option<f64>,
    pub global_range: Option<f64>,
    pub quantile_count: Option<usize>,
    pub eps_floor: Option<f64>,
    #[serde(default)]
    pub interpret_v_as_variance: bool,
}

impl NormalizerSection {
    pub fn strategy(&self) -> Result<NormStrategy> {
        let mut s = NormStrategy::new(StrategyKind::parse(&self.strategy)?);
        s.quantile_count = self.quantile_count;
        if let Some(eps) = self.eps_floor {
            s.eps_floor = eps;
        }
        s.interpret_v_as_variance = self.interpret_v_as_variance;
        Ok(s)
    }

    pub fn scope(&self) -> Result<Scope> {
        Scope::parse(&self.scope)
    }

    /// Build the fitted normalizer, either from explicit statistics or by
    /// fitting on the supplied training split.
    pub fn resolve(&self, d: usize, train: Option<&Dataset>) -> Result<FittedNormalizer> {
        let strategy = self.strategy()?;
        let scope = self.scope()?;
        match self.source.as_str() {
            "fit" => {
                let train = train.ok_or_else(|| {
                    Error::Config("normalizer.source = \"fit\" needs a [dataset] section".into())
                })?;
                match scope {
                    Scope::DatasetLevel => fit_dataset(&strategy, train),
                    Scope::PerInstance => fit_instance(&strategy, &train.instances[0]),
                }
            }
            "stats" => {
                let kind = strategy.kind;
                let eps = strategy.eps_floor;
                let need = |opt: Option<f64>, key: &str| {
                    opt.ok_or_else(|| {
                        Error::Config(format!("strategy {} needs normalizer.{key}", kind))
                    })
                };
                let per_channel = |values: &Option<Vec<f64>>, key: &str| -> Result<Vec<f64>> {
                    let v = values.clone().ok_or_else(|| {
                        Error::Config(format!("strategy {} needs normalizer.{key}", kind))
                    })?;
                    if v.len() != d {
                        return Err(Error::Config(format!(
                            "normalizer.{key} has {} entries, model.d is {d}",
                            v.len()
                        )));
                    }
                    Ok(v)
                };
                let mut channels: Vec<ChannelStats> = vec![
                    ChannelStats {
                        mean: 0.0,
                        scale: 1.0,
                        min: 0.0,
                        max: 1.0,
                        median: 0.0,
                        iqr: 1.0,
                        quantile_table: Vec::new(),
                    };
                    d
                ];
                let mut global = GlobalStats {
                    mean: 0.0,
                    scale: 1.0,
                    min: 0.0,
                    max: 1.0,
                };
                match kind {
                    StrategyKind::None => {}
                    StrategyKind::StandardInstance => {
                        for (c, s) in channels.iter_mut().zip(per_channel(&self.scales, "scales")?) {
                            c.scale = s.max(eps);
                        }
                    }
                    StrategyKind::StandardGlobal => {
                        global.scale = need(self.global_scale, "global_scale")?.max(eps);
                    }
                    StrategyKind::MinmaxInstance => {
                        for (c, r) in channels.iter_mut().zip(per_channel(&self.ranges, "ranges")?) {
                            c.min = 0.0;
                            c.max = r.max(eps);
                        }
                    }
                    StrategyKind::MinmaxGlobal => {
                        global.min = 0.0;
                        global.max = need(self.global_range, "global_range")?.max(eps);
                    }
                    StrategyKind::Robust | StrategyKind::Quantile => {
                        return Err(Error::Config(format!(
                            "strategy {kind} requires normalizer.source = \"fit\""
                        )));
                    }
                }
                Ok(FittedNormalizer {
                    strategy,
                    scope,
                    channels,
                    global,
                    warnings: Vec::new(),
                })
            }
            other => Err(Error::Config(format!("unknown normalizer.source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub epsilon: f64,
    pub sigma: f64,
    #[serde(default = "default_c1_variant")]
    pub c1_variant: String,
}

fn default_c1_variant() -> String {
    "appendix".into()
}

impl BoundSection {
    pub fn c1_variant(&self) -> Result<C1Variant> {
        C1Variant::parse(&self.c1_variant)
    }
}

fn default_samples() -> usize {
    10_000
}
fn default_mode() -> String {
    "pair".into()
}
fn default_k() -> usize {
    8
}
fn default_perturb() -> String {
    "raw".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub model_bypass: bool,
    #[serde(default = "default_perturb")]
    pub perturb: String,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            seed: 0,
            mode: default_mode(),
            k: default_k(),
            model_bypass: false,
            perturb: default_perturb(),
        }
    }
}

impl EstimateSection {
    pub fn mode(&self) -> Result<EstimateMode> {
        EstimateMode::parse(&self.mode, self.k)
    }

    pub fn perturb(&self) -> Result<PerturbSpace> {
        match self.perturb.as_str() {
            "raw" => Ok(PerturbSpace::Raw),
            "normalized" => Ok(PerturbSpace::Normalized),
            other => Err(Error::Config(format!("unknown perturb space {other:?}"))),
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "ts_file", "csv_file", "synth_dominant_channel",
    /// "synth_amplitude_classes", "synth_trend_forecast" or "gaussian".
    pub source: String,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub train_instances: Option<usize>,
    pub test_instances: Option<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub length: Option<usize>,
    pub channels: Option<usize>,
    pub scale_ratio: Option<f64>,
    pub amp_a: Option<f64>,
    pub amp_b: Option<f64>,
    pub context: Option<usize>,
    pub horizon: Option<usize>,
    pub offset: Option<f64>,
}

impl DatasetSection {
    fn need<T: Copy>(&self, opt: Option<T>, key: &str) -> Result<T> {
        opt.ok_or_else(|| Error::Config(format!("dataset.{} needs dataset.{key}", self.source)))
    }

    /// Load or generate the (train, test) splits.
    pub fn resolve(&self) -> Result<(Dataset, Dataset)> {
        match self.source.as_str() {
            "ts_file" | "csv_file" => {
                let path = self
                    .need(self.path.as_deref(), "path")
                    .map_err(|_| Error::Config(format!("dataset.{} needs dataset.path", self.source)))?;
                let parse = |p: &Path| -> Result<Dataset> {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    if self.source == "ts_file" {
                        data::parse_uea_ts(&text)
                    } else {
                        data::parse_csv(&text)
                    }
                };
                let full = parse(path)?;
                if let Some(test_path) = &self.test_path {
                    let mut test = parse(test_path)?;
                    test.split = Split::Test;
                    return Ok((full, test));
                }
                let n_test = self
                    .test_instances
                    .unwrap_or(((full.instances.len() as f64) * self.test_fraction) as usize)
                    .min(full.instances.len().saturating_sub(1));
                let cut = full.instances.len() - n_test;
                let mut train = full.clone();
                train.instances.truncate(cut);
                let mut test = full;
                test.instances.drain(..cut);
                test.split = Split::Test;
                Ok((train, test))
            }
            "synth_dominant_channel" => {
                let (n_train, n_test) = self.split_counts()?;
                let ds = data::synth_dominant_channel(
                    n_train + n_test,
                    self.need(self.length, "length")?,
                    self.scale_ratio.unwrap_or(1000.0),
                    self.seed,
                )?;
                Ok(split_dataset(ds, n_train))
            }
            "synth_amplitude_classes" => {
                let (n_train, n_test) = self.split_counts()?;
                let ds = data::synth_amplitude_classes(
                    n_train + n_test,
                    self.need(self.length, "length")?,
                    self.amp_a.unwrap_or(10.0),
                    self.amp_b.unwrap_or(1.0),
                    self.seed,
                )?;
                Ok(split_dataset(ds, n_train))
            }
            "synth_trend_forecast" => {
                let (n_train, n_test) = self.split_counts()?;
                let ds = data::synth_trend_forecast(
                    n_train + n_test,
                    self.need(self.context, "context")?,
                    self.need(self.horizon, "horizon")?,
                    self.offset.unwrap_or(100.0),
                    self.seed,
                )?;
                Ok(split_dataset(ds, n_train))
            }
            "gaussian" => {
                let (n_train, n_test) = self.split_counts()?;
                let channels = self.need(self.channels, "channels")?;
                let length = self.need(self.length, "length")?;
                let base = crate::linalg::RngStream::new(self.seed, 2);
                let instances: Vec<_> = (0..n_train + n_test)
                    .map(|i| {
                        let mut rng = base.substream(i as u64);
                        crate::data::TimeSeriesInstance::new(
                            crate::linalg::Matrix::new(
                                channels,
                                length,
                                rng.gaussian_vec(channels * length),
                            )
                            .unwrap(),
                        )
                    })
                    .collect();
                let ds = Dataset::new("gaussian", instances)?;
                Ok(split_dataset(ds, n_train))
            }
            other => Err(Error::Config(format!("unknown dataset.source {other:?}"))),
        }
    }

    fn split_counts(&self) -> Result<(usize, usize)> {
        let train = self.need(self.train_instances, "train_instances")?;
        let test = self.test_instances.unwrap_or(0);
        Ok((train, test))
    }
}

fn split_dataset(mut ds: Dataset, n_train: usize) -> (Dataset, Dataset) {
    let mut test = ds.clone();
    ds.instances.truncate(n_train);
    test.instances.drain(..n_train.min(test.instances.len()));
    test.split = Split::Test;
    (ds, test)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// "classification" or "forecasting"
    pub task: String,
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub scope: Option<String>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

impl SweepSection {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs >= 1 strategy and >= 1 seed".into()));
        }
        if self.task != "classification" && self.task != "forecasting" {
            return Err(Error::Config(format!("unknown sweep.task {:?}", self.task)));
        }
        Ok(())
    }

    /// Scope default: per-instance for classification, dataset-level for
    /// forecasting.
    pub fn scope(&self) -> Result<Scope> {
        match &self.scope {
            Some(s) => Scope::parse(s),
            None => Ok(if self.task == "forecasting" {
                Scope::DatasetLevel
            } else {
                Scope::PerInstance
            }),
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_init_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// 0 trains full-batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            patience: default_patience(),
            batch_size: 0,
            val_fraction: default_val_fraction(),
            init_scale: default_init_scale(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, loss: LossKind, seed: u64) -> TrainConfig {
        let mut t = TrainConfig::new(loss);
        t.learning_rate = self.learning_rate;
        t.epochs = self.epochs;
        t.patience = self.patience;
        t.batch_size = if self.batch_size == 0 {
            None
        } else {
            Some(self.batch_size)
        };
        t.seed = seed;
        t.init_scale = self.init_scale;
        t
    }
}
