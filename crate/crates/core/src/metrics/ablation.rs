use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{train_and_evaluate, ExperimentConfig};
use super::{MetricPair, MetricsReport};
use crate::data::{holdout_split, WindowSample};
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Complete,
    SimpleAffine,
    StandardNormalBase,
    /// Complete model with this many step-flow blocks.
    StepFlows(usize),
}

impl Variant {
    pub fn key(&self) -> String {
        match self {
            Variant::Complete => "complete".into(),
            Variant::SimpleAffine => "simple_affine".into(),
            Variant::StandardNormalBase => "standard_normal_base".into(),
            Variant::StepFlows(k) => format!("stepflows_{k}"),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Variant::Complete => "Complete Model".into(),
            Variant::SimpleAffine => "Simple Affine Layer".into(),
            Variant::StandardNormalBase => "Standard Normal".into(),
            Variant::StepFlows(k) => format!("{k} Step-Flows"),
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.ablation_simple_affine = false;
        c.ablation_standard_normal_base = false;
        match *self {
            Variant::Complete => {}
            Variant::SimpleAffine => c.ablation_simple_affine = true,
            Variant::StandardNormalBase => c.ablation_standard_normal_base = true,
            Variant::StepFlows(k) => c.n_flow_blocks = k,
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRunSpec {
    pub variant: Variant,
    pub seed: u64,
}

impl AblationRunSpec {
    pub fn conditioning_suite(seed: u64) -> Vec<Self> {
        [Variant::Complete, Variant::SimpleAffine, Variant::StandardNormalBase]
            .into_iter()
            .map(|variant| Self { variant, seed })
            .collect()
    }

    pub fn stepflow_suite(seed: u64) -> Vec<Self> {
        crate::model::FLOW_DEPTHS
            .into_iter()
            .map(|k| Self {
                variant: Variant::StepFlows(k),
                seed,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    /// One entry per column; `None` where the metric is undefined.
    pub cells: Vec<Option<MetricPair>>,
}

/// Machine rows, then TOTAL and AVERAGED, with one SAE/NDE column pair per variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub column_keys: Vec<String>,
    pub seeds: Vec<u64>,
    pub holdout_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub rows: Vec<TableRow>,
    pub parameter_counts: Vec<usize>,
    pub reports: Vec<MetricsReport>,
    pub loss_curves: Vec<Vec<LossBreakdown>>,
}

impl AblationTable {
    pub fn from_reports(
        specs: &[AblationRunSpec],
        reports: Vec<MetricsReport>,
        parameter_counts: Vec<usize>,
        loss_curves: Vec<Vec<LossBreakdown>>,
        holdout_fraction: f64,
        n_train: usize,
        n_test: usize,
    ) -> Self {
        let machines: Vec<String> = reports
            .first()
            .map(|r| r.per_appliance.iter().map(|a| a.name.clone()).collect())
            .unwrap_or_default();
        let mut rows: Vec<TableRow> = machines
            .iter()
            .enumerate()
            .map(|(i, name)| TableRow {
                label: name.clone(),
                cells: reports.iter().map(|r| r.per_appliance[i].metrics).collect(),
            })
            .collect();
        rows.push(TableRow {
            label: "TOTAL".into(),
            cells: reports.iter().map(|r| Some(r.total)).collect(),
        });
        rows.push(TableRow {
            label: "AVERAGED".into(),
            cells: reports.iter().map(|r| Some(r.averaged)).collect(),
        });
        Self {
            columns: specs.iter().map(|s| s.variant.label()).collect(),
            column_keys: specs.iter().map(|s| s.variant.key()).collect(),
            seeds: specs.iter().map(|s| s.seed).collect(),
            holdout_fraction,
            n_train,
            n_test,
            rows,
            parameter_counts,
            reports,
            loss_curves,
        }
    }

    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn machine_rows(&self) -> &[TableRow] {
        &self.rows[..self.rows.len().saturating_sub(2)]
    }

    /// Aligned text with a variant header line and SAE/NDE sub-columns.
    pub fn to_text(&self) -> String {
        let lw = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let cw = self.columns.iter().map(|c| c.len()).max().unwrap_or(0).max(17);
        let half = (cw - 1) / 2;
        let mut out = format!(
            "# seeds {:?}, holdout {} ({} train / {} test windows)\n",
            self.seeds, self.holdout_fraction, self.n_train, self.n_test
        );
        out.push_str(&format!("{:<lw$}", ""));
        for c in &self.columns {
            out.push_str(&format!(" | {c:^cw$}"));
        }
        out.push('\n');
        out.push_str(&format!("{:<lw$}", "Machine"));
        for _ in &self.columns {
            out.push_str(&format!(" | {:>half$} {:>w$}", "SAE", "NDE", w = cw - half - 1));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<lw$}", row.label));
            for cell in &row.cells {
                match cell {
                    Some(m) => out.push_str(&format!(" | {:>half$.3} {:>w$.3}", m.sae, m.nde, w = cw - half - 1)),
                    None => out.push_str(&format!(" | {:>half$} {:>w$}", "n/a", "n/a", w = cw - half - 1)),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every spec on the same holdout split and collects a comparison table.
pub fn run_ablation_suite(
    raw: &[WindowSample],
    window_len: usize,
    names: &[String],
    base: &ExperimentConfig,
    specs: &[AblationRunSpec],
    holdout_fraction: f64,
) -> Result<AblationTable> {
    if specs.is_empty() {
        return Err(Error::Contract("ablation suite needs at least one run".into()));
    }
    let starts: Vec<usize> = raw.iter().map(|w| w.window_start).collect();
    let split = holdout_split(&starts, window_len, holdout_fraction, specs[0].seed)?;
    let outcomes = specs
        .par_iter()
        .map(|spec| {
            let config = ExperimentConfig {
                model: spec.variant.apply(&base.model),
                ..base.clone()
            };
            let out = train_and_evaluate(raw, &split, names, &config, spec.seed)?;
            Ok((out.report, out.model.parameter_count(), out.loss_curve))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    let mut counts = Vec::new();
    let mut curves = Vec::new();
    for (r, c, l) in outcomes {
        reports.push(r);
        counts.push(c);
        curves.push(l);
    }
    Ok(AblationTable::from_reports(
        specs,
        reports,
        counts,
        curves,
        holdout_fraction,
        split.train.len(),
        split.test.len(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ApplianceMetrics;

    fn report(vals: &[(f64, f64)]) -> MetricsReport {
        let per = vals
            .iter()
            .enumerate()
            .map(|(i, &(nde, sae))| ApplianceMetrics {
                name: format!("M{i}"),
                metrics: Some(MetricPair {
                    nde,
                    sae,
                    nde_sqrt: None,
                }),
            })
            .collect();
        MetricsReport::assemble(per, false)
    }

    #[test]
    fn variants_touch_one_axis() {
        let base = ModelConfig::default();
        assert!(Variant::SimpleAffine.apply(&base).ablation_simple_affine);
        assert!(!Variant::SimpleAffine.apply(&base).ablation_standard_normal_base);
        assert_eq!(Variant::StepFlows(32).apply(&base).n_flow_blocks, 32);
        assert_eq!(AblationRunSpec::conditioning_suite(0).len(), 3);
        let keys: Vec<String> = AblationRunSpec::stepflow_suite(0)
            .iter()
            .map(|s| s.variant.key())
            .collect();
        assert_eq!(
            keys,
            [
                "stepflows_2",
                "stepflows_4",
                "stepflows_8",
                "stepflows_16",
                "stepflows_32"
            ]
        );
    }

    #[test]
    fn table_layout() {
        let specs = AblationRunSpec::conditioning_suite(1);
        let reports = vec![
            report(&[(0.1, 0.2), (0.3, 0.1)]),
            report(&[(0.2, 0.2), (0.4, 0.3)]),
            report(&[(1.0, 2.0), (3.0, 0.5)]),
        ];
        let t = AblationTable::from_reports(&specs, reports, vec![10, 10, 8], vec![vec![]; 3], 0.8, 80, 20);
        let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["M0", "M1", "TOTAL", "AVERAGED"]);
        let total = t.row("TOTAL").unwrap();
        assert!((total.cells[2].unwrap().nde - 4.0).abs() < 1e-12);
        let text = t.to_text();
        assert!(text.contains("Complete Model") && text.contains("Standard Normal"));
        assert_eq!(text.lines().count(), 3 + 4);
    }
}
