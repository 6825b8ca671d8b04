//! Disaggregation metrics, evaluation, cross-validation, and ablations.

mod ablation;
mod eval;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ablation::{run_ablation_suite, AblationRunSpec, AblationTable, TableRow, Variant};
pub use eval::{
    check_channels, evaluate, mean_std, run_cv, train_and_evaluate, window_seed, CvOutcome, CvSummary, Disaggregator,
    ExperimentConfig, MeanStd, RunOutcome, SummaryRow,
};

/// Normalized disaggregation error `sum (x - x_hat)^2 / sum x^2`.
pub fn nde(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_lengths(x, x_hat)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in x.iter().zip(x_hat) {
        num += (a - b) * (a - b);
        den += a * a;
    }
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("NDE of an all-zero ground truth".into()));
    }
    Ok(num / den)
}

/// Signal aggregate error `|sum x_hat - sum x| / sum x`.
pub fn sae(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_lengths(x, x_hat)?;
    let total: f64 = x.iter().sum();
    let predicted: f64 = x_hat.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric(format!("SAE with ground-truth energy {total}")));
    }
    Ok((predicted - total).abs() / total)
}

fn check_lengths(x: &[f64], x_hat: &[f64]) -> Result<()> {
    if x.len() != x_hat.len() {
        return Err(Error::dim("metric", "length", x.len(), x_hat.len()));
    }
    if x.is_empty() {
        return Err(Error::UndefinedMetric("empty series".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub nde: f64,
    pub sae: f64,
    /// `sqrt(nde)`, present when the rooted variant was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nde_sqrt: Option<f64>,
}

impl MetricPair {
    pub fn compute(x: &[f64], x_hat: &[f64], with_sqrt: bool) -> Result<Self> {
        let nde = nde(x, x_hat)?;
        Ok(Self {
            nde,
            sae: sae(x, x_hat)?,
            nde_sqrt: with_sqrt.then(|| nde.sqrt()),
        })
    }

    fn add(&mut self, other: &MetricPair) {
        self.nde += other.nde;
        self.sae += other.sae;
        if let (Some(a), Some(b)) = (self.nde_sqrt.as_mut(), other.nde_sqrt) {
            *a += b;
        }
    }

    fn divided(&self, n: f64) -> Self {
        Self {
            nde: self.nde / n,
            sae: self.sae / n,
            nde_sqrt: self.nde_sqrt.map(|v| v / n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApplianceMetrics {
    pub name: String,
    /// `None` when the metric is undefined for this appliance's test slice.
    pub metrics: Option<MetricPair>,
}

/// Per-appliance metrics plus their sum and mean over defined appliances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_appliance: Vec<ApplianceMetrics>,
    pub total: MetricPair,
    pub averaged: MetricPair,
}

impl MetricsReport {
    /// `truth[m]` and `pred[m]` are the physical-unit series of appliance `m`.
    pub fn from_series(names: &[String], truth: &[Vec<f64>], pred: &[Vec<f64>], with_sqrt: bool) -> Result<Self> {
        if names.len() != truth.len() || names.len() != pred.len() {
            return Err(Error::Contract(format!(
                "{} names, {} truth series, {} predictions",
                names.len(),
                truth.len(),
                pred.len()
            )));
        }
        let per_appliance = names
            .iter()
            .zip(truth.iter().zip(pred))
            .map(|(name, (x, x_hat))| {
                let metrics = match MetricPair::compute(x, x_hat, with_sqrt) {
                    Ok(m) => Some(m),
                    Err(Error::UndefinedMetric(why)) => {
                        log::warn!("{name}: metrics undefined ({why}); excluded from totals");
                        None
                    }
                    Err(e) => return Err(e),
                };
                Ok(ApplianceMetrics {
                    name: name.clone(),
                    metrics,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(per_appliance, with_sqrt))
    }

    /// Recomputes total and averaged rows from the per-appliance entries.
    pub fn assemble(per_appliance: Vec<ApplianceMetrics>, with_sqrt: bool) -> Self {
        let mut total = MetricPair {
            nde_sqrt: with_sqrt.then_some(0.0),
            ..MetricPair::default()
        };
        let mut n = 0usize;
        for m in per_appliance.iter().filter_map(|a| a.metrics.as_ref()) {
            total.add(m);
            n += 1;
        }
        let averaged = if n == 0 { total } else { total.divided(n as f64) };
        Self {
            per_appliance,
            total,
            averaged,
        }
    }

    pub fn defined_count(&self) -> usize {
        self.per_appliance.iter().filter(|a| a.metrics.is_some()).count()
    }

    pub fn get(&self, name: &str) -> Option<&MetricPair> {
        self.per_appliance
            .iter()
            .find(|a| a.name == name)
            .and_then(|a| a.metrics.as_ref())
    }

    /// Aligned text table: one row per appliance, then TOTAL and AVERAGED.
    pub fn to_text(&self) -> String {
        let with_sqrt = self.total.nde_sqrt.is_some();
        let mut rows: Vec<(String, Option<MetricPair>)> =
            self.per_appliance.iter().map(|a| (a.name.clone(), a.metrics)).collect();
        rows.push(("TOTAL".into(), Some(self.total)));
        rows.push(("AVERAGED".into(), Some(self.averaged)));
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>10}  {:>10}", "Machine", "SAE", "NDE");
        if with_sqrt {
            out.push_str(&format!("  {:>10}", "sqrt(NDE)"));
        }
        out.push('\n');
        for (name, m) in rows {
            out.push_str(&format!("{name:<width$}"));
            match m {
                Some(m) => {
                    out.push_str(&format!("  {:>10.4}  {:>10.4}", m.sae, m.nde));
                    if let Some(r) = m.nde_sqrt {
                        out.push_str(&format!("  {r:>10.4}"));
                    }
                }
                None => out.push_str(&format!("  {:>10}  {:>10}", "n/a", "n/a")),
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(nde(&[1.0, 2.0], &[2.0, 2.0]).unwrap(), 0.2);
        assert_eq!(nde(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(nde(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 1.0);
        let x = [4.0, 6.0];
        assert_eq!(sae(&x, &[5.0, 7.0]).unwrap(), 0.2);
        assert_eq!(sae(&x, &[8.0, 12.0]).unwrap(), 1.0);
        assert_eq!(sae(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn undefined_cases() {
        assert!(matches!(nde(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(sae(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(nde(&[1.0], &[1.0, 1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn report_totals_and_exclusion() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let truth = vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![4.0, 6.0]];
        let pred = vec![vec![2.0, 2.0], vec![1.0, 1.0], vec![5.0, 7.0]];
        let r = MetricsReport::from_series(&names, &truth, &pred, true).unwrap();
        assert!(r.per_appliance[1].metrics.is_none());
        assert_eq!(r.defined_count(), 2);
        let a = r.get("a").unwrap();
        let c = r.get("c").unwrap();
        assert!((r.total.nde - (a.nde + c.nde)).abs() < 1e-12);
        assert!((r.averaged.sae - (a.sae + c.sae) / 2.0).abs() < 1e-12);
        assert!((r.total.nde_sqrt.unwrap() - (a.nde.sqrt() + c.nde.sqrt())).abs() < 1e-12);
        let text = r.to_text();
        assert!(text.contains("TOTAL") && text.contains("AVERAGED") && text.contains("n/a"));
    }
}
