use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricsReport;
use crate::autodiff::Tensor;
use crate::data::{fit_normalizer, FoldPlan, NormStats, Split, WindowSample};
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, ModelConfig, PfvaeModel};
use crate::train::{TrainConfig, Trainer};

/// Anything that maps a normalized aggregate window `[C_in, T]` to a
/// normalized appliance estimate `[M, T]`.
pub trait Disaggregator: Sync {
    fn predict(&self, y: &Tensor, n_samples: usize, seed: u64) -> Result<Tensor>;
}

impl Disaggregator for PfvaeModel {
    fn predict(&self, y: &Tensor, n_samples: usize, seed: u64) -> Result<Tensor> {
        Ok(self.predict_mean(y, n_samples, seed, false)?.mean)
    }
}

/// Model, optimizer, and evaluation settings shared by every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Samples averaged per window at evaluation.
    pub n_samples: usize,
    pub nde_sqrt: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            n_samples: 20,
            nde_sqrt: false,
        }
    }
}

/// Seed for the sampler of test window `i`.
pub fn window_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Averages `n_samples` draws per test window, maps predictions and truth
/// back to physical units, concatenates them per appliance, and scores them.
pub fn evaluate(
    model: &impl Disaggregator,
    test: &[WindowSample],
    stats: &NormStats,
    names: &[String],
    n_samples: usize,
    seed: u64,
    nde_sqrt: bool,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    if names.len() != stats.n_targets() {
        return Err(Error::Contract(format!(
            "{} appliance names for {} target channels",
            names.len(),
            stats.n_targets()
        )));
    }
    let pairs = test
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            if !w.normalized {
                return Err(Error::Contract(format!(
                    "test window at {} is not normalized",
                    w.window_start
                )));
            }
            let pred = model.predict(&w.y, n_samples, window_seed(seed, i))?;
            if pred.shape() != w.x.shape() {
                return Err(Error::dim(
                    "evaluate",
                    "prediction shape",
                    format!("{:?}", w.x.shape()),
                    format!("{:?}", pred.shape()),
                ));
            }
            Ok((stats.denormalize_targets(&w.x)?, stats.denormalize_targets(&pred)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = names.len();
    let mut truth = vec![Vec::new(); m];
    let mut pred = vec![Vec::new(); m];
    for (x, p) in &pairs {
        for a in 0..m {
            truth[a].extend(x.row(a).iter().map(|&v| v as f64));
            pred[a].extend(p.row(a).iter().map(|&v| v as f64));
        }
    }
    MetricsReport::from_series(names, &truth, &pred, nde_sqrt)
}

/// Result of one train/evaluate cycle.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<LossBreakdown>,
    pub model: PfvaeModel,
    pub stats: NormStats,
}

/// Fits normalization on the training windows of `split`, trains a fresh
/// model seeded with `seed`, and evaluates on the test windows.
pub fn train_and_evaluate(
    raw: &[WindowSample],
    split: &Split,
    names: &[String],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| raw[i].clone()).collect::<Vec<_>>();
    let train_raw = pick(&split.train);
    let test_raw = pick(&split.test);
    let stats = fit_normalizer(&train_raw)?;
    let train = stats.apply(&train_raw)?;
    let test = stats.apply(&test_raw)?;

    let mut model_cfg = config.model.clone();
    model_cfg.init_seed = seed;
    check_channels(&model_cfg, &stats, names)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    let mut trainer = Trainer::new(PfvaeModel::new(model_cfg)?, train_cfg)?;
    let mut loss_curve = Vec::with_capacity(config.train.epochs);
    for _ in 0..config.train.epochs {
        loss_curve.push(trainer.train_epoch(&train)?);
    }
    let report = evaluate(
        &trainer.model,
        &test,
        &stats,
        names,
        config.n_samples,
        seed,
        config.nde_sqrt,
    )?;
    Ok(RunOutcome {
        report,
        loss_curve,
        model: trainer.model,
        stats,
    })
}

/// Schema check between a model configuration and the data it will see.
pub fn check_channels(model: &ModelConfig, stats: &NormStats, names: &[String]) -> Result<()> {
    if model.n_input_channels != stats.n_inputs() {
        return Err(Error::Schema(format!(
            "model expects {} aggregate channels, data has {}",
            model.n_input_channels,
            stats.n_inputs()
        )));
    }
    if model.n_appliances != stats.n_targets() || names.len() != stats.n_targets() {
        return Err(Error::Schema(format!(
            "model expects {} appliances, data has {}",
            model.n_appliances,
            stats.n_targets()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd::default();
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub nde: MeanStd,
    pub sae: MeanStd,
}

/// Mean and sample std across folds; appliances undefined in a fold are
/// summarized over the folds where they are defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub per_appliance: Vec<SummaryRow>,
    pub total: SummaryRow,
    pub averaged: SummaryRow,
}

impl CvSummary {
    pub fn from_reports(reports: &[MetricsReport]) -> Self {
        let row = |name: &str, pairs: Vec<super::MetricPair>| SummaryRow {
            name: name.to_string(),
            nde: mean_std(&pairs.iter().map(|p| p.nde).collect::<Vec<_>>()),
            sae: mean_std(&pairs.iter().map(|p| p.sae).collect::<Vec<_>>()),
        };
        let names: Vec<String> = reports
            .first()
            .map(|r| r.per_appliance.iter().map(|a| a.name.clone()).collect())
            .unwrap_or_default();
        let per_appliance = names
            .iter()
            .enumerate()
            .map(|(i, n)| row(n, reports.iter().filter_map(|r| r.per_appliance[i].metrics).collect()))
            .collect();
        Self {
            per_appliance,
            total: row("TOTAL", reports.iter().map(|r| r.total).collect()),
            averaged: row("AVERAGED", reports.iter().map(|r| r.averaged).collect()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvOutcome {
    pub reports: Vec<MetricsReport>,
    pub summary: CvSummary,
}

/// One train/evaluate cycle per fold, folds run in parallel.
pub fn run_cv(
    raw: &[WindowSample],
    window_len: usize,
    names: &[String],
    config: &ExperimentConfig,
    plan: &FoldPlan,
    seed: u64,
) -> Result<CvOutcome> {
    let starts: Vec<usize> = raw.iter().map(|w| w.window_start).collect();
    let reports = (0..plan.n_folds)
        .into_par_iter()
        .map(|fold| {
            let split = plan.split(&starts, window_len, fold)?;
            Ok(train_and_evaluate(raw, &split, names, config, seed)?.report)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = CvSummary::from_reports(&reports);
    Ok(CvOutcome { reports, summary })
}
