//! Experiment orchestration: normalize-train-evaluate pipelines, sweep
//! records (JSON lines, resumable), and mean/std report aggregation.

use crate::config::{ModelSection, SweepSection, TrainSection};
use crate::data::{tokenize, train_val_split, Dataset, TokenScheme};
use crate::error::{Error, Result};
use crate::grad::{evaluate_accuracy, train, LossKind, TrainExample, TrainHistory};
use crate::model::{encoder_forward, pooled_output, HeadKind};
use crate::normalize::{fit_dataset, fit_instance, FittedNormalizer, NormStrategy, Scope};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// One sweep run's result line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunRecord {
    pub dataset: String,
    pub model_tag: String,
    pub strategy: String,
    pub seed: u64,
    /// "classification" or "forecasting"
    pub task: String,
    /// "accuracy" or "mae"
    pub metric: String,
    /// Absent for failed runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub wall_clock_ms: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Normalize every instance of a split under the given strategy and scope,
/// then tokenize. Dataset-level scope requires the normalizer fitted on the
/// training split (pass it for the test split to keep the fit pure).
pub fn prepare_classification(
    ds: &Dataset,
    strategy: &NormStrategy,
    scope: Scope,
    fitted: Option<&FittedNormalizer>,
) -> Result<(Vec<TrainExample>, Option<FittedNormalizer>)> {
    let mut fitted_out = None;
    let shared = match scope {
        Scope::DatasetLevel => Some(match fitted {
            Some(f) => f.clone(),
            None => {
                let f = fit_dataset(strategy, ds)?;
                fitted_out = Some(f.clone());
                f
            }
        }),
        Scope::PerInstance => None,
    };
    let mut out = Vec::with_capacity(ds.instances.len());
    for inst in &ds.instances {
        let normalizer = match &shared {
            Some(f) => f.clone(),
            None => fit_instance(strategy, inst)?,
        };
        let normalized = normalizer.transform(inst)?;
        let tokens = tokenize(&normalized, TokenScheme::PerTimestep)?;
        let label = ds.label_index(inst);
        if label.is_none() {
            return Err(Error::Empty(format!(
                "classification needs labels (dataset {})",
                ds.name
            )));
        }
        out.push(TrainExample {
            tokens,
            label,
            target: None,
        });
    }
    Ok((out, fitted_out))
}

/// Train on the training split (with an internal stratified validation
/// holdout) and report test accuracy.
pub fn run_classification_trial(
    train_ds: &Dataset,
    test_ds: &Dataset,
    strategy: &NormStrategy,
    scope: Scope,
    model: &ModelSection,
    train_section: &TrainSection,
    seed: u64,
) -> Result<(f64, TrainHistory)> {
    let (train_examples, fitted) = prepare_classification(train_ds, strategy, scope, None)?;
    let (test_examples, _) = prepare_classification(test_ds, strategy, scope, fitted.as_ref())?;
    let n = train_ds.instances[0].len();
    let d = train_ds.channels();
    let classes = train_ds.vocabulary.len().max(2);
    let cfg = model.to_model_config_with(n, d, HeadKind::Classification { classes })?;
    let tcfg = train_section.to_train_config(LossKind::CrossEntropy, seed);
    let (tr_idx, va_idx) = train_val_split(train_ds, train_section.val_fraction, seed);
    let tr: Vec<TrainExample> = tr_idx.iter().map(|&i| train_examples[i].clone()).collect();
    let va: Vec<TrainExample> = va_idx.iter().map(|&i| train_examples[i].clone()).collect();
    let (best, history) = train(&cfg, &tcfg, &tr, &va)?;
    let accuracy = evaluate_accuracy(&cfg, &best, &test_examples)?;
    Ok((accuracy, history))
}

/// Forecast examples: normalized context tokens plus delta targets — the
/// normalized continuation minus the last normalized context value of the
/// target channel. Predicting zero therefore reproduces the repeat-last-value
/// baseline.
fn prepare_forecast(
    ds: &Dataset,
    strategy: &NormStrategy,
    scope: Scope,
    fitted: Option<&FittedNormalizer>,
    target_channel: usize,
) -> Result<(Vec<TrainExample>, Vec<FittedNormalizer>, Option<FittedNormalizer>)> {
    let mut fitted_out = None;
    let shared = match scope {
        Scope::DatasetLevel => Some(match fitted {
            Some(f) => f.clone(),
            None => {
                let f = fit_dataset(strategy, ds)?;
                fitted_out = Some(f.clone());
                f
            }
        }),
        Scope::PerInstance => None,
    };
    let mut examples = Vec::with_capacity(ds.instances.len());
    let mut normalizers = Vec::with_capacity(ds.instances.len());
    for inst in &ds.instances {
        let normalizer = match &shared {
            Some(f) => f.clone(),
            None => fit_instance(strategy, inst)?,
        };
        let target = inst.target.as_ref().ok_or_else(|| {
            Error::Empty(format!("forecasting needs targets (dataset {})", ds.name))
        })?;
        let normalized = normalizer.transform(inst)?;
        let tokens = tokenize(&normalized, TokenScheme::PerTimestep)?;
        let last = *normalized.channel(target_channel).last().unwrap();
        let deltas: Vec<f64> = normalizer
            .transform_series(target_channel, target)
            .iter()
            .map(|v| v - last)
            .collect();
        examples.push(TrainExample {
            tokens,
            label: None,
            target: Some(deltas),
        });
        normalizers.push(normalizer);
    }
    Ok((examples, normalizers, fitted_out))
}

/// Train the delta-forecast head and report test MAE in original units
/// (predictions pass back through the inverse transform).
pub fn run_forecast_trial(
    train_ds: &Dataset,
    test_ds: &Dataset,
    strategy: &NormStrategy,
    scope: Scope,
    model: &ModelSection,
    train_section: &TrainSection,
    seed: u64,
) -> Result<(f64, TrainHistory)> {
    let target_channel = 0;
    let (train_examples, _, fitted) =
        prepare_forecast(train_ds, strategy, scope, None, target_channel)?;
    let (test_examples, test_norms, _) =
        prepare_forecast(test_ds, strategy, scope, fitted.as_ref(), target_channel)?;
    let n = train_ds.instances[0].len();
    let d = train_ds.channels();
    let horizon = train_examples[0].target.as_ref().unwrap().len();
    let cfg = model.to_model_config_with(n, d, HeadKind::Forecast { horizon })?;
    let tcfg = train_section.to_train_config(LossKind::SquaredError, seed);
    let (tr_idx, va_idx) = train_val_split(train_ds, train_section.val_fraction, seed);
    let tr: Vec<TrainExample> = tr_idx.iter().map(|&i| train_examples[i].clone()).collect();
    let va: Vec<TrainExample> = va_idx.iter().map(|&i| train_examples[i].clone()).collect();
    let (best, history) = train(&cfg, &tcfg, &tr, &va)?;

    // test MAE in original units
    let mut total = 0.0;
    let mut count = 0usize;
    for ((inst, example), normalizer) in test_ds
        .instances
        .iter()
        .zip(&test_examples)
        .zip(&test_norms)
    {
        let (_, trace) = encoder_forward(&cfg, &best, &example.tokens)?;
        let deltas = pooled_output(&cfg, &trace, &best)?;
        let normalized = normalizer.transform(inst)?;
        let last = *normalized.channel(target_channel).last().unwrap();
        let pred_normalized: Vec<f64> = deltas.iter().map(|d| last + d).collect();
        let pred = normalizer.inverse_series(target_channel, &pred_normalized);
        let raw_target = inst.target.as_ref().unwrap();
        for (p, t) in pred.iter().zip(raw_target) {
            total += (p - t).abs();
            count += 1;
        }
    }
    Ok((total / count as f64, history))
}

/// Inputs a sweep needs beyond the config sections.
pub struct SweepPlan<'a> {
    pub sweep: &'a SweepSection,
    pub model: &'a ModelSection,
    pub train: &'a TrainSection,
    pub train_ds: &'a Dataset,
    pub test_ds: &'a Dataset,
    pub config_hash: String,
}

/// Stable identity of a sweep configuration: everything that shapes a run
/// except the strategy/seed grid itself.
pub fn config_hash(
    task: &str,
    scope: Scope,
    dataset_provenance: &str,
    model: &ModelSection,
    train: &TrainSection,
) -> String {
    let blob = format!(
        "task={task};scope={scope};dataset={dataset_provenance};heads={};ffn={:?};layers={};pe={};act={};head={};size={};lr={};epochs={};patience={};batch={};val={};init={}",
        model.heads,
        model.ffn_hidden,
        model.layers,
        model.positional_encoding,
        model.activation,
        model.head,
        model.head_size,
        train.learning_rate,
        train.epochs,
        train.patience,
        train.batch_size,
        train.val_fraction,
        train.init_scale,
    );
    let digest = Sha256::digest(blob.as_bytes());
    hex_prefix(&digest, 16)
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            col: None,
            msg: format!("bad record: {e}"),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub written: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Run every (strategy, seed) pair not already present in the output file.
/// Records append atomically through one writer; numeric failures become
/// failed records and the sweep continues.
pub fn run_sweep(plan: &SweepPlan, jobs: usize) -> Result<SweepSummary> {
    plan.sweep.validate()?;
    let scope = plan.sweep.scope()?;
    let existing = read_records(&plan.sweep.output)?;
    let done: BTreeSet<(String, u64, String)> = existing
        .iter()
        .map(|r| (r.strategy.clone(), r.seed, r.config_hash.clone()))
        .collect();

    let mut tasks = Vec::new();
    for strategy_name in &plan.sweep.strategies {
        let strategy = NormStrategy::new(crate::normalize::StrategyKind::parse(strategy_name)?);
        for &seed in &plan.sweep.seeds {
            if done.contains(&(strategy_name.clone(), seed, plan.config_hash.clone())) {
                continue;
            }
            tasks.push((strategy_name.clone(), strategy.clone(), seed));
        }
    }
    let skipped = plan.sweep.strategies.len() * plan.sweep.seeds.len() - tasks.len();

    if let Some(parent) = plan.sweep.output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&plan.sweep.output)?;
    let writer = Mutex::new(file);
    let next = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);
    let workers = jobs.max(1).min(tasks.len().max(1));

    let run_one = |strategy_name: &str, strategy: &NormStrategy, seed: u64| -> Result<RunRecord> {
        let started = Instant::now();
        let (metric, outcome) = if plan.sweep.task == "forecasting" {
            let r = run_forecast_trial(
                plan.train_ds,
                plan.test_ds,
                strategy,
                scope,
                plan.model,
                plan.train,
                seed,
            );
            ("mae", r.map(|(v, _)| v))
        } else {
            let r = run_classification_trial(
                plan.train_ds,
                plan.test_ds,
                strategy,
                scope,
                plan.model,
                plan.train,
                seed,
            );
            ("accuracy", r.map(|(v, _)| v))
        };
        let wall = started.elapsed().as_millis() as u64;
        let tag = {
            // tag uses the data-derived shape
            let d = plan.train_ds.channels();
            format!(
                "{}",
                plan.model.tag(&crate::model::ModelConfig {
                    n: plan.train_ds.instances[0].len(),
                    d,
                    heads: plan.model.heads,
                    ffn_hidden: plan.model.ffn_hidden.unwrap_or(4 * d),
                    layers: plan.model.layers,
                    positional_encoding: plan.model.positional_encoding,
                    activation: plan.model.activation()?,
                    head: HeadKind::Classification { classes: 2 },
                })
            )
        };
        let base = RunRecord {
            dataset: plan.train_ds.name.clone(),
            model_tag: tag,
            strategy: strategy_name.to_string(),
            seed,
            task: plan.sweep.task.clone(),
            metric: metric.to_string(),
            value: None,
            wall_clock_ms: wall,
            config_hash: plan.config_hash.clone(),
            error: None,
        };
        match outcome {
            Ok(value) => Ok(RunRecord {
                value: Some(value),
                ..base
            }),
            Err(e) if e.exit_code() == 3 => {
                failed.fetch_add(1, Ordering::SeqCst);
                Ok(RunRecord {
                    error: Some(e.to_string()),
                    ..base
                })
            }
            Err(e) => Err(e),
        }
    };

    let written = AtomicUsize::new(0);
    std::thread::scope(|scope_| {
        let mut handles = Vec::new();
        for _ in 0..workers {
            handles.push(scope_.spawn(|| -> Result<()> {
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= tasks.len() {
                        return Ok(());
                    }
                    let (name, strategy, seed) = &tasks[i];
                    let record = run_one(name, strategy, *seed)?;
                    let line = serde_json::to_string(&record)
                        .map_err(|e| Error::Config(format!("serialize record: {e}")))?;
                    let mut guard = writer.lock().unwrap();
                    writeln!(guard, "{line}")?;
                    guard.flush()?;
                    written.fetch_add(1, Ordering::SeqCst);
                }
            }));
        }
        let mut first_error = None;
        for h in handles {
            if let Err(e) = h.join().expect("sweep worker panicked") {
                first_error.get_or_insert(e);
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })?;

    Ok(SweepSummary {
        written: written.load(Ordering::SeqCst),
        skipped,
        failed: failed.load(Ordering::SeqCst),
    })
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub strategy: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (n-1 denominator); 0 for a single record.
    pub std: f64,
    pub n: usize,
}

/// Group successful records by (dataset, strategy) and compute mean and
/// sample std. A group mixing metrics is an error.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<ReportRow>> {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.value.is_some()).collect();
    if ok.is_empty() {
        return Err(Error::Empty("no successful records to aggregate".into()));
    }
    let mut groups: std::collections::BTreeMap<(String, String), Vec<&RunRecord>> =
        std::collections::BTreeMap::new();
    for r in ok {
        groups
            .entry((r.dataset.clone(), r.strategy.clone()))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for ((dataset, strategy), group) in groups {
        let metric = group[0].metric.clone();
        if group.iter().any(|r| r.metric != metric) {
            return Err(Error::Parse {
                line: 0,
                col: None,
                msg: format!("group ({dataset}, {strategy}) mixes metrics"),
            });
        }
        let values: Vec<f64> = group.iter().map(|r| r.value.unwrap()).collect();
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(ReportRow {
            dataset,
            strategy,
            metric,
            mean,
            std,
            n,
        });
    }
    Ok(rows)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("dataset,strategy,metric,mean,std,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.dataset, r.strategy, r.metric, r.mean, r.std, r.n
        ));
    }
    out
}

/// Nested JSON, one object per dataset keyed by strategy — the layout the
/// radar plot scripts consume.
pub fn report_json(rows: &[ReportRow]) -> serde_json::Value {
    let mut datasets = serde_json::Map::new();
    for r in rows {
        let entry = datasets
            .entry(r.dataset.clone())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
        if let serde_json::Value::Object(map) = entry {
            map.insert(
                r.strategy.clone(),
                serde_json::json!({
                    "metric": r.metric,
                    "mean": r.mean,
                    "std": r.std,
                    "n": r.n,
                }),
            );
        }
    }
    serde_json::Value::Object(datasets)
}
