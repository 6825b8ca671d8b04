use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use flowdisagg::data::{
    atomic_write, fit_normalizer, holdout_split, ingest_dir, make_windows, synth_dataset, write_csv, Dataset, Manifest,
    NormStats, Split, WindowSample,
};
use flowdisagg::metrics::{
    check_channels, evaluate, run_ablation_suite, window_seed, AblationRunSpec, AblationTable, ExperimentConfig,
    MetricsReport,
};
use flowdisagg::model::{LossBreakdown, PfvaeModel};
use flowdisagg::train::Trainer;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Aligned data cut into raw windows plus the time-ordered holdout split.
pub struct Prepared {
    pub dataset: Dataset,
    pub raw: Vec<WindowSample>,
    pub split: Split,
    pub names: Vec<String>,
    pub quantities: Vec<String>,
}

impl Prepared {
    pub fn pick(&self, idx: &[usize]) -> Vec<WindowSample> {
        idx.iter().map(|&i| self.raw[i].clone()).collect()
    }
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match (&config.data.csv_dir, config.manifest_path()) {
        (Some(dir), Some(manifest_path)) => {
            let manifest = Manifest::load(&manifest_path)
                .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
            Ok(ingest_dir(dir, &manifest)?.into_dataset(&manifest)?)
        }
        _ => Ok(synth_dataset(&config.data.synth)?.dataset),
    }
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let dataset = load_dataset(config)?;
    let raw = make_windows(&dataset, config.data.window_len, config.data.stride)?;
    let starts: Vec<usize> = raw.iter().map(|w| w.window_start).collect();
    let split = holdout_split(
        &starts,
        config.data.window_len,
        config.data.holdout_fraction,
        config.train.seed,
    )?;
    let names = dataset.appliance_names.clone();
    let quantities = dataset
        .input_quantities()
        .iter()
        .map(|q| q.name().to_string())
        .collect();
    Ok(Prepared {
        dataset,
        raw,
        split,
        names,
        quantities,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::from)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn write_loss_csv(path: &Path, first_col: &str, rows: &[(u64, LossBreakdown)]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "{first_col},total,reconstruction,prior")?;
        for (i, l) in rows {
            writeln!(w, "{i},{:e},{:e},{:e}", l.total, l.reconstruction, l.prior)?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Reads a loss CSV written by `train` back as (index, loss) rows.
pub fn read_loss_csv(path: &Path) -> Result<Vec<(u64, LossBreakdown)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                bail!("malformed loss row `{line}`");
            }
            Ok((
                f[0].parse()?,
                LossBreakdown {
                    total: f[1].parse()?,
                    reconstruction: f[2].parse()?,
                    prior: f[3].parse()?,
                },
            ))
        })
        .collect()
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    /// `(epoch, mean loss)` for the epochs run by this invocation, 1-based.
    pub epochs: Vec<(u64, LossBreakdown)>,
    /// `(global step, batch loss)` for the steps run by this invocation, 1-based.
    pub steps: Vec<(u64, LossBreakdown)>,
    pub stats: NormStats,
}

/// Trains on the holdout's training windows; with `resume`, continues the
/// checkpointed run (parameters, optimizer moments, shuffling state, epoch).
///
/// Writes `checkpoint.ckpt`, `loss_curve.csv`, `step_losses.csv`, and
/// `config.json` into the output directory. If a step produces a non-finite
/// loss, the checkpoint from the end of the last completed epoch is written
/// before the error is returned.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let out = &config.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = prepare(config)?;
    let train_raw = data.pick(&data.split.train);

    let mut run = config.clone();
    let (mut trainer, stats) = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            check_schema(&ck, &data)?;
            let Checkpoint { header, mut trainer } = ck;
            trainer.config = run.train.clone();
            run.model = header.model.clone();
            (trainer, header.norm)
        }
        None => {
            let stats = fit_normalizer(&train_raw)?;
            run.model.n_input_channels = stats.n_inputs();
            run.model.n_appliances = stats.n_targets();
            let model = PfvaeModel::new(run.model.clone())?;
            (Trainer::new(model, run.train.clone())?, stats)
        }
    };
    check_channels(trainer.model.config(), &stats, &data.names)?;
    run.write(out)?;
    let train = stats.apply(&train_raw)?;

    let ck_path = out.join(CHECKPOINT_FILE);
    let save = |t: &Trainer| checkpoint::save(&ck_path, t, &run, &stats, &data.names, &data.quantities);
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut failure = None;
    while trainer.epoch < run.train.epochs {
        let last_good = trainer.clone();
        match trainer.train_epoch_with(&train, |step, l| steps.push((step, *l))) {
            Ok(l) => {
                log::info!(
                    "epoch {} loss {:.5} (rec {:.5}, -log p {:.3})",
                    trainer.epoch,
                    l.total,
                    l.reconstruction,
                    l.prior
                );
                epochs.push((trainer.epoch as u64, l));
            }
            Err(e) => {
                save(&last_good)?;
                failure = Some((e, last_good.epoch));
                break;
            }
        }
    }
    write_loss_csv(&out.join("loss_curve.csv"), "epoch", &epochs)?;
    write_loss_csv(&out.join("step_losses.csv"), "step", &steps)?;
    if let Some((e, epoch)) = failure {
        return Err(anyhow::Error::new(e).context(format!(
            "training aborted; checkpoint from epoch {epoch} kept at {}",
            ck_path.display()
        )));
    }
    save(&trainer)?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        epochs,
        steps,
        stats,
    })
}

/// The data must carry the quantities and appliances the checkpoint was trained on.
fn check_schema(ck: &Checkpoint, data: &Prepared) -> Result<()> {
    let h = &ck.header;
    if h.input_quantities != data.quantities {
        bail!(flowdisagg::Error::Schema(format!(
            "checkpoint was trained on aggregate quantities {:?}, data has {:?}",
            h.input_quantities, data.quantities
        )));
    }
    if h.appliance_names.len() != data.names.len() {
        bail!(flowdisagg::Error::Schema(format!(
            "checkpoint has {} appliances, data has {}",
            h.appliance_names.len(),
            data.names.len()
        )));
    }
    Ok(())
}

/// Normalized held-out windows under the checkpoint's statistics.
fn held_out(ck: &Checkpoint, config: &RunConfig) -> Result<(Prepared, Vec<WindowSample>)> {
    let data = prepare(config)?;
    check_schema(ck, &data)?;
    check_channels(ck.model().config(), &ck.header.norm, &data.names)?;
    if ck.model().config().window_len != config.data.window_len {
        bail!(flowdisagg::Error::Schema(format!(
            "checkpoint expects windows of {}, config asks for {}",
            ck.model().config().window_len,
            config.data.window_len
        )));
    }
    let test = ck.header.norm.apply(&data.pick(&data.split.test))?;
    Ok((data, test))
}

/// Scores the held-out windows; writes `report.json` and `report.txt`.
pub fn eval(config: &RunConfig, checkpoint_path: &Path) -> Result<MetricsReport> {
    let ck = checkpoint::load(checkpoint_path)?;
    let (data, test) = held_out(&ck, config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    config.write(out)?;
    let report = evaluate(
        ck.model(),
        &test,
        &ck.header.norm,
        &data.names,
        config.eval.n_samples,
        config.train.seed,
        config.eval.nde_sqrt,
    )?;
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("report.txt"), &report.to_text())?;
    Ok(report)
}

/// File-name-safe form of an appliance name.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Per-window sample means with 95% intervals over the held-out windows,
/// one `samples_<appliance>.csv` per appliance, in physical units.
pub fn sample(config: &RunConfig, checkpoint_path: &Path) -> Result<Vec<PathBuf>> {
    let ck = checkpoint::load(checkpoint_path)?;
    let (data, test) = held_out(&ck, config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    config.write(out)?;
    let stats = &ck.header.norm;
    let n = config.eval.sample_n;
    if n < 2 {
        bail!("intervals need at least 2 samples per window, got {n}");
    }
    let timestamps = &data.dataset.aggregate.timestamps;
    let mut rows: Vec<Vec<String>> = vec![Vec::new(); data.names.len()];
    for (i, w) in test.iter().enumerate() {
        let p = ck
            .model()
            .predict_mean(&w.y, n, window_seed(config.train.seed, i), true)?;
        let mean = stats.denormalize_targets(&p.mean)?;
        let hw = stats.scale_targets(p.half_width.as_ref().expect("intervals requested"))?;
        let truth = stats.denormalize_targets(&w.x)?;
        for (a, lines) in rows.iter_mut().enumerate() {
            for t in 0..w.window_len() {
                let idx = w.window_start + t;
                let (m, h) = (mean.at2(a, t), hw.at2(a, t));
                lines.push(format!(
                    "{i},{idx},{},{},{m},{},{}",
                    timestamps[idx],
                    truth.at2(a, t),
                    m - h,
                    m + h
                ));
            }
        }
    }
    let mut paths = Vec::new();
    for (name, lines) in data.names.iter().zip(rows) {
        let path = out.join(format!("samples_{}.csv", slug(name)));
        atomic_write(&path, |w| {
            writeln!(w, "window,index,timestamp,truth,mean,lower,upper")?;
            for l in &lines {
                writeln!(w, "{l}")?;
            }
            Ok(())
        })?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Conditioning,
    Stepflows,
}

/// Trains every variant of `suite` on one holdout split with the config's
/// seed; writes `ablation.json`, `ablation.txt`, and one loss curve per variant.
pub fn ablate(config: &RunConfig, suite: Suite) -> Result<AblationTable> {
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let data = prepare(config)?;
    let mut model = config.model.clone();
    let first = data.raw.first().context("no windows")?;
    model.n_input_channels = first.y.shape()[0];
    model.n_appliances = first.x.shape()[0];
    let mut run = config.clone();
    run.model = model.clone();
    run.write(out)?;
    let seed = config.train.seed;
    let specs = match suite {
        Suite::Conditioning => AblationRunSpec::conditioning_suite(seed),
        Suite::Stepflows => AblationRunSpec::stepflow_suite(seed),
    };
    let base = ExperimentConfig {
        model,
        train: config.train.clone(),
        n_samples: config.eval.n_samples,
        nde_sqrt: config.eval.nde_sqrt,
    };
    let table = run_ablation_suite(
        &data.raw,
        config.data.window_len,
        &data.names,
        &base,
        &specs,
        config.data.holdout_fraction,
    )?;
    write_json(&out.join("ablation.json"), &table)?;
    write_text(&out.join("ablation.txt"), &table.to_text())?;
    for (key, curve) in table.column_keys.iter().zip(&table.loss_curves) {
        let rows: Vec<(u64, LossBreakdown)> = curve.iter().enumerate().map(|(i, l)| (i as u64 + 1, *l)).collect();
        write_loss_csv(&out.join(format!("loss_{key}.csv")), "epoch", &rows)?;
    }
    Ok(table)
}

/// Writes the synthetic dataset as per-meter CSVs plus `manifest.json`.
pub fn synth(config: &RunConfig) -> Result<PathBuf> {
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    config.write(out)?;
    let s = synth_dataset(&config.data.synth)?;
    write_csv(
        &s.dataset.aggregate,
        &out.join(format!("{}.csv", s.dataset.aggregate.meter_id)),
    )?;
    for a in &s.dataset.appliances {
        write_csv(a, &out.join(format!("{}.csv", a.meter_id)))?;
    }
    let manifest = out.join("manifest.json");
    s.manifest.save(&manifest)?;
    Ok(manifest)
}
