//! Meter series, windows, normalization, fold plans, synthetic data.

mod folds;
mod ingest;
mod norm;
mod synth;
mod window;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use folds::{holdout_split, plan_folds, FoldPlan, Split};
pub use ingest::{ingest_csv, ingest_dir, write_csv, Gap, GapReport, Ingested};
pub use norm::{fit_normalizer, NormStats};
pub use synth::{synth_dataset, SynthSpec, Synthetic};
pub use window::{make_windows, window_starts};

/// Electrical quantities a meter file may carry, in canonical column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    VoltageRms,
    CurrentRms,
    PowerActive,
    PowerReactive,
    PowerApparent,
    EnergyActive,
}

impl Quantity {
    pub const ALL: [Quantity; 6] = [
        Quantity::VoltageRms,
        Quantity::CurrentRms,
        Quantity::PowerActive,
        Quantity::PowerReactive,
        Quantity::PowerApparent,
        Quantity::EnergyActive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::VoltageRms => "voltage_rms",
            Quantity::CurrentRms => "current_rms",
            Quantity::PowerActive => "power_active",
            Quantity::PowerReactive => "power_reactive",
            Quantity::PowerApparent => "power_apparent",
            Quantity::EnergyActive => "energy_active",
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Quantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Quantity::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown quantity column `{s}`")))
    }
}

/// 1 Hz series of one meter; every quantity has one value per timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterSeries {
    pub meter_id: String,
    /// Epoch seconds, strictly increasing.
    pub timestamps: Vec<i64>,
    pub quantities: BTreeMap<Quantity, Vec<f32>>,
}

impl MeterSeries {
    pub fn new(
        meter_id: impl Into<String>,
        timestamps: Vec<i64>,
        quantities: BTreeMap<Quantity, Vec<f32>>,
    ) -> Result<Self> {
        let s = Self {
            meter_id: meter_id.into(),
            timestamps,
            quantities,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (q, v) in &self.quantities {
            if v.len() != self.timestamps.len() {
                return Err(Error::Contract(format!(
                    "meter {}: {q} has {} values for {} timestamps",
                    self.meter_id,
                    v.len(),
                    self.timestamps.len()
                )));
            }
        }
        if let Some(w) = self.timestamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Contract(format!(
                "meter {}: timestamps not strictly increasing ({} then {})",
                self.meter_id, w[0], w[1]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn get(&self, q: Quantity) -> Result<&[f32]> {
        self.quantities
            .get(&q)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Schema(format!("meter {} has no {q} column", self.meter_id)))
    }

    pub fn quantity_list(&self) -> Vec<Quantity> {
        self.quantities.keys().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Aggregate,
    Appliance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub meter_id: String,
    pub role: Role,
    pub display_name: String,
    /// File name; defaults to `<meter_id>.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

impl ManifestEntry {
    pub fn file_name(&self) -> String {
        self.file.clone().unwrap_or_else(|| format!("{}.csv", self.meter_id))
    }
}

/// Which meter is the aggregate and the fixed order of the appliances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n_agg = self.entries.iter().filter(|e| e.role == Role::Aggregate).count();
        if n_agg != 1 {
            return Err(Error::Schema(format!(
                "manifest needs exactly one aggregate meter, found {n_agg}"
            )));
        }
        if self.appliances().next().is_none() {
            return Err(Error::Schema("manifest lists no appliances".into()));
        }
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.meter_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Schema(format!("duplicate meter id `{}`", w[0])));
        }
        Ok(())
    }

    pub fn aggregate(&self) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.role == Role::Aggregate)
            .ok_or_else(|| Error::Schema("manifest has no aggregate meter".into()))
    }

    pub fn appliances(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role == Role::Appliance)
    }
}

/// Aligned aggregate meter plus appliance meters in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub aggregate: MeterSeries,
    pub appliances: Vec<MeterSeries>,
    pub appliance_names: Vec<String>,
}

impl Dataset {
    pub fn new(aggregate: MeterSeries, appliances: Vec<MeterSeries>, appliance_names: Vec<String>) -> Result<Self> {
        if appliances.is_empty() || appliances.len() != appliance_names.len() {
            return Err(Error::Contract(
                "dataset needs one name per appliance and at least one appliance".into(),
            ));
        }
        for a in &appliances {
            if a.timestamps != aggregate.timestamps {
                return Err(Error::Contract(format!(
                    "appliance {} is not aligned with the aggregate meter",
                    a.meter_id
                )));
            }
            a.get(Quantity::PowerActive)?;
        }
        if aggregate.quantities.is_empty() {
            return Err(Error::Schema("aggregate meter has no quantity columns".into()));
        }
        Ok(Self {
            aggregate,
            appliances,
            appliance_names,
        })
    }

    /// Builds a dataset from ingested series using the manifest roles.
    pub fn from_manifest(manifest: &Manifest, series: Vec<MeterSeries>) -> Result<Self> {
        let mut by_id: BTreeMap<String, MeterSeries> = series.into_iter().map(|s| (s.meter_id.clone(), s)).collect();
        let agg_id = &manifest.aggregate()?.meter_id;
        let aggregate = by_id
            .remove(agg_id)
            .ok_or_else(|| Error::Schema(format!("no series for aggregate meter `{agg_id}`")))?;
        let mut appliances = Vec::new();
        let mut names = Vec::new();
        for e in manifest.appliances() {
            let s = by_id
                .remove(&e.meter_id)
                .ok_or_else(|| Error::Schema(format!("no series for appliance meter `{}`", e.meter_id)))?;
            appliances.push(s);
            names.push(e.display_name.clone());
        }
        Self::new(aggregate, appliances, names)
    }

    pub fn len(&self) -> usize {
        self.aggregate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aggregate.is_empty()
    }

    pub fn n_appliances(&self) -> usize {
        self.appliances.len()
    }

    /// Aggregate quantities used as input channels, in canonical order.
    pub fn input_quantities(&self) -> Vec<Quantity> {
        self.aggregate.quantity_list()
    }
}

/// One training/evaluation window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Aggregate quantities, `[C_in, T]`.
    pub y: Tensor,
    /// Appliance active power, `[M, T]`, in manifest order.
    pub x: Tensor,
    /// Index of the first sample in the aligned series.
    pub window_start: usize,
    pub normalized: bool,
}

impl WindowSample {
    pub fn window_len(&self) -> usize {
        self.y.shape()[1]
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let file = fs::File::create(&tmp)?;
    let mut w = BufWriter::new(file);
    let res = write(&mut w).and_then(|_| {
        let f = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        f.sync_all()?;
        Ok(())
    });
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
