//! Command implementations behind the `tsnormlab` binary. Each command takes
//! a parsed config plus flag overrides and returns its primary stdout text.

use crate::bench::{self, SweepPlan};
use crate::config::{EstimateSection, LabConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expressivity::{
    compute_bound, estimate_expressivity, BoundQuery, BoundReport, EstimateOptions,
    ExpressivityEstimate,
};
use crate::linalg::RngStream;
use serde::Serialize;
use std::path::Path;

/// Flag/environment overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces weights.seed, estimate.seed and the sweep seed list.
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub c1_variant: Option<String>,
}

fn apply_seed(cfg: &mut LabConfig, overrides: &Overrides) {
    if let Some(seed) = overrides.seed {
        if let Some(w) = cfg.weights.as_mut() {
            w.seed = seed;
        }
        if let Some(e) = cfg.estimate.as_mut() {
            e.seed = seed;
        }
        if let Some(s) = cfg.sweep.as_mut() {
            s.seeds = vec![seed];
        }
    }
}

fn resolve_bound_inputs(
    cfg: &LabConfig,
    overrides: &Overrides,
) -> Result<(crate::model::ModelConfig, crate::model::ModelWeights, crate::normalize::FittedNormalizer, f64, f64, crate::expressivity::C1Variant, Option<(Dataset, Dataset)>)> {
    let model_section = cfg.require_model()?;
    let bound = cfg.require_bound()?;
    let norm_section = cfg.require_normalizer()?;
    let model_cfg = model_section.to_model_config()?;
    let weights_section = cfg.weights.clone().unwrap_or_default();
    let (model_cfg, weights) = weights_section.resolve(&model_cfg)?;
    let splits = match &cfg.dataset {
        Some(section) => Some(section.resolve()?),
        None => None,
    };
    let normalizer = norm_section.resolve(model_cfg.d, splits.as_ref().map(|(tr, _)| tr))?;
    let variant = match &overrides.c1_variant {
        Some(v) => crate::expressivity::C1Variant::parse(v)?,
        None => bound.c1_variant()?,
    };
    Ok((
        model_cfg,
        weights,
        normalizer,
        bound.epsilon,
        bound.sigma,
        variant,
        splits,
    ))
}

/// `tsnormlab bound`: evaluate the expressivity bound and print the report.
pub fn cmd_bound(config_path: &Path, overrides: &Overrides) -> Result<String> {
    let mut cfg = LabConfig::load(config_path)?;
    apply_seed(&mut cfg, overrides);
    let (model_cfg, weights, normalizer, epsilon, sigma, variant, _) =
        resolve_bound_inputs(&cfg, overrides)?;
    let report = compute_bound(&BoundQuery {
        epsilon,
        sigma,
        normalizer: &normalizer,
        cfg: &model_cfg,
        weights: &weights,
        c1_variant: variant,
    })?;
    serde_json::to_string_pretty(&report).map_err(|e| Error::Config(format!("serialize: {e}")))
}

#[derive(Debug, Serialize)]
struct ExpressivityOutput {
    estimate: ExpressivityEstimate,
    bound: BoundReport,
    /// True when `p_hat + 3 * SE <= gamma_clamped`.
    dominated: bool,
}

/// `tsnormlab expressivity`: Monte-Carlo estimate and bound side by side.
pub fn cmd_expressivity(config_path: &Path, overrides: &Overrides) -> Result<String> {
    let mut cfg = LabConfig::load(config_path)?;
    apply_seed(&mut cfg, overrides);
    let estimate_section = cfg.estimate.clone().unwrap_or_else(EstimateSection::default);
    let (model_cfg, weights, normalizer, epsilon, sigma, variant, splits) =
        resolve_bound_inputs(&cfg, overrides)?;
    let (train, _) = splits.ok_or_else(|| {
        Error::Config("expressivity needs a [dataset] section to sample from".into())
    })?;
    let options = EstimateOptions {
        perturb: estimate_section.perturb()?,
        model_bypass: estimate_section.model_bypass,
    };
    let rng = RngStream::new(estimate_section.seed, 0);
    let estimate = estimate_expressivity(
        &model_cfg,
        &weights,
        &normalizer,
        &train.instances,
        epsilon,
        sigma,
        estimate_section.samples,
        &rng,
        estimate_section.mode()?,
        &options,
    )?;
    let bound = compute_bound(&BoundQuery {
        epsilon,
        sigma,
        normalizer: &normalizer,
        cfg: &model_cfg,
        weights: &weights,
        c1_variant: variant,
    })?;
    let dominated = estimate.p_hat + 3.0 * estimate.standard_error() <= bound.gamma_clamped;
    let out = ExpressivityOutput {
        estimate,
        bound,
        dominated,
    };
    serde_json::to_string_pretty(&out).map_err(|e| Error::Config(format!("serialize: {e}")))
}

/// `tsnormlab sweep`: run the (strategy x seed) grid, appending JSON-line
/// records; completed pairs are skipped on rerun.
pub fn cmd_sweep(config_path: &Path, overrides: &Overrides) -> Result<String> {
    let mut cfg = LabConfig::load(config_path)?;
    apply_seed(&mut cfg, overrides);
    let sweep = cfg.require_sweep()?.clone();
    let model = cfg
        .model
        .clone()
        .ok_or_else(|| Error::Config("missing [model] section".into()))?;
    let train_section = cfg.train.clone().unwrap_or_default();
    let dataset_section = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("missing [dataset] section".into()))?;
    let (train_ds, test_ds) = dataset_section.resolve()?;
    if test_ds.instances.is_empty() {
        return Err(Error::Empty("sweep test split".into()));
    }
    let hash = bench::config_hash(
        &sweep.task,
        sweep.scope()?,
        &train_ds.provenance,
        &model,
        &train_section,
    );
    let plan = SweepPlan {
        sweep: &sweep,
        model: &model,
        train: &train_section,
        train_ds: &train_ds,
        test_ds: &test_ds,
        config_hash: hash,
    };
    let jobs = overrides.jobs.unwrap_or(sweep.jobs);
    let summary = bench::run_sweep(&plan, jobs)?;
    Ok(format!(
        "wrote {} records ({} skipped, {} failed) to {}",
        summary.written,
        summary.skipped,
        summary.failed,
        sweep.output.display()
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// `tsnormlab report`: aggregate records into a mean/std table.
pub fn cmd_report(records_path: &Path, format: ReportFormat) -> Result<String> {
    let records = bench::read_records(records_path)?;
    if records.is_empty() {
        return Err(Error::Empty(format!(
            "no records in {}",
            records_path.display()
        )));
    }
    let rows = bench::aggregate(&records)?;
    Ok(match format {
        ReportFormat::Csv => bench::report_csv(&rows),
        ReportFormat::Json => serde_json::to_string_pretty(&bench::report_json(&rows))
            .map_err(|e| Error::Config(format!("serialize: {e}")))?,
    })
}
