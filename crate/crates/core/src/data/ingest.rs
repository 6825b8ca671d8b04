use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};
use serde::Serialize;

use super::{atomic_write, Dataset, Manifest, MeterSeries, Quantity};
use crate::error::{Error, Result};

/// Missing seconds after `after` (epoch seconds).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Gap {
    pub after: i64,
    pub missing: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GapReport {
    pub meter_id: String,
    pub gaps: Vec<Gap>,
    /// Rows removed because another meter had no reading at that time.
    pub dropped_by_alignment: usize,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    /// Aligned series, in manifest order.
    pub series: Vec<MeterSeries>,
    pub reports: Vec<GapReport>,
}

impl Ingested {
    pub fn gap_count(&self) -> usize {
        self.reports.iter().map(|r| r.gaps.len()).sum()
    }

    pub fn into_dataset(self, manifest: &Manifest) -> Result<Dataset> {
        Dataset::from_manifest(manifest, self.series)
    }
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return (v.is_finite() && v.fract() == 0.0).then_some(v as i64);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc().timestamp())
}

/// Reads one meter file; returns the series and its internal gaps.
fn read_meter(path: &Path, meter_id: &str) -> Result<(MeterSeries, Vec<Gap>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("timestamp") {
        return Err(Error::Schema(format!(
            "{}: first column must be `timestamp`",
            path.display()
        )));
    }
    let columns = headers
        .iter()
        .skip(1)
        .map(|h| {
            h.trim()
                .parse::<Quantity>()
                .map_err(|_| Error::Schema(format!("{}: unknown quantity column `{}`", path.display(), h.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    if columns.is_empty() {
        return Err(Error::Schema(format!("{}: no quantity columns", path.display())));
    }
    let mut seen = BTreeSet::new();
    for q in &columns {
        if !seen.insert(*q) {
            return Err(Error::Schema(format!("{}: duplicate column `{q}`", path.display())));
        }
    }

    let format_err = |line: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut timestamps: Vec<i64> = Vec::new();
    let mut values: Vec<Vec<f32>> = vec![Vec::new(); columns.len()];
    let mut gaps = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != columns.len() + 1 {
            return Err(format_err(
                line,
                format!("expected {} fields, got {}", columns.len() + 1, rec.len()),
            ));
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| format_err(line, format!("bad timestamp `{}`", &rec[0])))?;
        if let Some(&prev) = timestamps.last() {
            if ts == prev {
                return Err(format_err(line, format!("duplicate timestamp {ts}")));
            }
            if ts < prev {
                return Err(format_err(line, format!("timestamp {ts} goes backwards from {prev}")));
            }
            if ts - prev > 1 {
                gaps.push(Gap {
                    after: prev,
                    missing: ts - prev - 1,
                });
            }
        }
        timestamps.push(ts);
        for (i, col) in values.iter_mut().enumerate() {
            let raw = rec[i + 1].trim();
            let v: f32 = raw
                .parse()
                .map_err(|_| format_err(line, format!("bad value `{raw}` for {}", columns[i])))?;
            if !v.is_finite() {
                return Err(format_err(line, format!("non-finite value for {}", columns[i])));
            }
            col.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }
    let quantities = columns.into_iter().zip(values).collect();
    Ok((MeterSeries::new(meter_id, timestamps, quantities)?, gaps))
}

fn restrict(series: &MeterSeries, keep: &BTreeSet<i64>) -> MeterSeries {
    let mask: Vec<bool> = series.timestamps.iter().map(|t| keep.contains(t)).collect();
    let pick = |v: &[i64]| {
        v.iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| *x)
            .collect::<Vec<_>>()
    };
    let quantities: BTreeMap<Quantity, Vec<f32>> = series
        .quantities
        .iter()
        .map(|(q, v)| (*q, v.iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect()))
        .collect();
    MeterSeries {
        meter_id: series.meter_id.clone(),
        timestamps: pick(&series.timestamps),
        quantities,
    }
}

/// Reads one file per manifest entry (matched by file name) and aligns all
/// meters on the intersection of their timestamps.
pub fn ingest_csv(paths: &[PathBuf], manifest: &Manifest) -> Result<Ingested> {
    manifest.validate()?;
    let mut raw = Vec::new();
    for entry in &manifest.entries {
        let want = entry.file_name();
        let path = paths
            .iter()
            .find(|p| p.file_name().is_some_and(|n| n.to_string_lossy() == want))
            .ok_or_else(|| Error::Schema(format!("no file `{want}` for meter `{}`", entry.meter_id)))?;
        raw.push(read_meter(path, &entry.meter_id)?);
    }

    let mut common: BTreeSet<i64> = raw[0].0.timestamps.iter().copied().collect();
    for (s, _) in &raw[1..] {
        let other: BTreeSet<i64> = s.timestamps.iter().copied().collect();
        common = common.intersection(&other).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::Schema("meters share no timestamps".into()));
    }

    let mut series = Vec::new();
    let mut reports = Vec::new();
    for (s, gaps) in raw {
        let aligned = restrict(&s, &common);
        let report = GapReport {
            meter_id: s.meter_id.clone(),
            gaps,
            dropped_by_alignment: s.len() - aligned.len(),
        };
        if !report.gaps.is_empty() {
            log::warn!(
                "meter {}: {} gap(s) in the timestamp grid",
                report.meter_id,
                report.gaps.len()
            );
        }
        reports.push(report);
        series.push(aligned);
    }
    Ok(Ingested { series, reports })
}

/// Reads every manifest file from `dir`.
pub fn ingest_dir(dir: &Path, manifest: &Manifest) -> Result<Ingested> {
    let paths: Vec<PathBuf> = manifest.entries.iter().map(|e| dir.join(e.file_name())).collect();
    ingest_csv(&paths, manifest)
}

/// Writes a meter in the ingestion schema (epoch-second timestamps).
pub fn write_csv(series: &MeterSeries, path: &Path) -> Result<()> {
    series.validate()?;
    atomic_write(path, |w| {
        let mut cw = csv::Writer::from_writer(w);
        let mut header = vec!["timestamp".to_string()];
        header.extend(series.quantities.keys().map(|q| q.name().to_string()));
        cw.write_record(&header)?;
        for (i, ts) in series.timestamps.iter().enumerate() {
            let mut row = vec![ts.to_string()];
            row.extend(series.quantities.values().map(|v| v[i].to_string()));
            cw.write_record(&row)?;
        }
        cw.flush()?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::io::Write;

    fn manifest() -> Manifest {
        serde_json::from_str(
            r#"[{"meter_id":"main","role":"aggregate","display_name":"Main"},
                {"meter_id":"press","role":"appliance","display_name":"Press"}]"#,
        )
        .unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn rows(start: i64, n: i64) -> String {
        let mut s = String::from("timestamp,power_active\n");
        for t in start..start + n {
            s.push_str(&format!("{t},{}\n", t as f32 * 0.5));
        }
        s
    }

    #[test]
    fn identical_ranges_align_fully() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "main.csv", &rows(100, 50));
        let b = write(dir.path(), "press.csv", &rows(100, 50));
        let ing = ingest_csv(&[a, b], &manifest()).unwrap();
        assert!(ing.series.iter().all(|s| s.len() == 50));
        assert_eq!(ing.gap_count(), 0);
    }

    #[test]
    fn late_meter_shortens_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "main.csv", &rows(100, 50));
        let b = write(dir.path(), "press.csv", &rows(110, 40));
        let ing = ingest_csv(&[a, b], &manifest()).unwrap();
        assert_eq!(ing.series[0].len(), 50 - 10);
        assert_eq!(ing.series[0].timestamps[0], 110);
        assert_eq!(ing.reports[0].dropped_by_alignment, 10);
    }

    #[test]
    fn duplicate_timestamp_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "main.csv", "timestamp,power_active\n1,0.5\n2,0.5\n2,0.7\n");
        let b = write(dir.path(), "press.csv", &rows(1, 3));
        match ingest_csv(&[a, b], &manifest()) {
            Err(Error::Format { line, detail, .. }) => {
                assert_eq!(line, 4);
                assert!(detail.contains("duplicate"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn backwards_timestamp_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "main.csv", "timestamp,power_active\n5,0\n4,0\n");
        let b = write(dir.path(), "press.csv", &rows(1, 3));
        assert!(matches!(
            ingest_csv(&[a, b], &manifest()),
            Err(Error::Format { line: 3, .. })
        ));
    }

    #[test]
    fn unknown_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "main.csv", "timestamp,frequency\n1,50\n");
        let b = write(dir.path(), "press.csv", &rows(1, 3));
        assert!(matches!(ingest_csv(&[a, b], &manifest()), Err(Error::Schema(_))));
    }

    #[test]
    fn iso_timestamps_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            dir.path(),
            "main.csv",
            "timestamp,power_active\n2020-01-01T00:00:00Z,1\n2020-01-01T00:00:01Z,2\n2020-01-01 00:00:05,3\n",
        );
        let b = write(dir.path(), "press.csv", &rows(1_577_836_800, 6));
        let ing = ingest_csv(&[a, b], &manifest()).unwrap();
        assert_eq!(
            ing.series[0].timestamps,
            vec![1_577_836_800, 1_577_836_801, 1_577_836_805]
        );
        assert_eq!(
            ing.reports[0].gaps,
            vec![Gap {
                after: 1_577_836_801,
                missing: 3
            }]
        );
    }

    #[test]
    fn write_then_read_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = BTreeMap::new();
        q.insert(Quantity::PowerActive, vec![0.1f32, 1e-7, 12345.679, -3.25]);
        q.insert(Quantity::VoltageRms, vec![229.9f32, 230.0, 230.1, 231.7]);
        let s = MeterSeries::new("main", vec![10, 11, 12, 13], q).unwrap();
        write_csv(&s, &dir.path().join("main.csv")).unwrap();
        let (back, gaps) = read_meter(&dir.path().join("main.csv"), "main").unwrap();
        assert_eq!(back, s);
        assert!(gaps.is_empty());
    }
}
