use serde::{Deserialize, Serialize};

use super::WindowSample;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn channel_stats(
    windows: &[WindowSample],
    pick: impl Fn(&WindowSample) -> &Tensor,
    offset: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = pick(&windows[0]).shape()[0];
    let mut mean = vec![0.0; rows];
    let mut std = vec![0.0; rows];
    for c in 0..rows {
        let mut n = 0usize;
        let mut sum = 0.0f64;
        for w in windows {
            let t = pick(w);
            if t.shape()[0] != rows {
                return Err(Error::dim("fit_normalizer", "channels", rows, t.shape()[0]));
            }
            sum += t.row(c).iter().map(|&v| v as f64).sum::<f64>();
            n += t.shape()[1];
        }
        let m = sum / n as f64;
        let var = windows
            .iter()
            .map(|w| pick(w).row(c).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let s = var.sqrt();
        if !(s > 1e-6 * m.abs().max(1.0)) {
            return Err(Error::DegenerateStats {
                channel: offset + c,
                detail: format!("std {s:e} around mean {m} is too small to normalize"),
            });
        }
        mean[c] = m;
        std[c] = s;
    }
    Ok((mean, std))
}

/// Fits statistics on training windows. Channels are numbered inputs first,
/// then appliances, in error reports.
pub fn fit_normalizer(train: &[WindowSample]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Contract("cannot fit normalizer on zero windows".into()));
    }
    if train.iter().any(|w| w.normalized) {
        return Err(Error::Contract("normalizer must be fit on raw windows".into()));
    }
    let (input_mean, input_std) = channel_stats(train, |w| &w.y, 0)?;
    let (target_mean, target_std) = channel_stats(train, |w| &w.x, input_mean.len())?;
    Ok(NormStats {
        input_mean,
        input_std,
        target_mean,
        target_std,
    })
}

fn affine(t: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Result<Tensor> {
    let rows = t.shape()[0];
    if rows != mean.len() {
        return Err(Error::dim("normalize", "channels", mean.len(), rows));
    }
    let cols = t.shape()[1];
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / cols;
            if forward {
                ((v as f64 - mean[c]) / std[c]) as f32
            } else {
                (v as f64 * std[c] + mean[c]) as f32
            }
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

impl NormStats {
    /// Statistics that leave data unchanged.
    pub fn identity(n_inputs: usize, n_targets: usize) -> Self {
        Self {
            input_mean: vec![0.0; n_inputs],
            input_std: vec![1.0; n_inputs],
            target_mean: vec![0.0; n_targets],
            target_std: vec![1.0; n_targets],
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.input_mean.len()
    }

    pub fn n_targets(&self) -> usize {
        self.target_mean.len()
    }

    pub fn normalize(&self, w: &WindowSample) -> Result<WindowSample> {
        if w.normalized {
            return Err(Error::Contract(format!(
                "window at {} is already normalized",
                w.window_start
            )));
        }
        Ok(WindowSample {
            y: affine(&w.y, &self.input_mean, &self.input_std, true)?,
            x: affine(&w.x, &self.target_mean, &self.target_std, true)?,
            window_start: w.window_start,
            normalized: true,
        })
    }

    pub fn apply(&self, windows: &[WindowSample]) -> Result<Vec<WindowSample>> {
        windows.iter().map(|w| self.normalize(w)).collect()
    }

    pub fn denormalize(&self, w: &WindowSample) -> Result<WindowSample> {
        if !w.normalized {
            return Err(Error::Contract(format!(
                "window at {} is not normalized",
                w.window_start
            )));
        }
        Ok(WindowSample {
            y: affine(&w.y, &self.input_mean, &self.input_std, false)?,
            x: self.denormalize_targets(&w.x)?,
            window_start: w.window_start,
            normalized: false,
        })
    }

    /// Maps normalized appliance rows `[M, T]` back to physical units.
    pub fn denormalize_targets(&self, x: &Tensor) -> Result<Tensor> {
        affine(x, &self.target_mean, &self.target_std, false)
    }

    /// Appliance rows `[M, T]` into normalized units.
    pub fn normalize_targets(&self, x: &Tensor) -> Result<Tensor> {
        affine(x, &self.target_mean, &self.target_std, true)
    }

    /// Scales normalized half-widths to physical units (no shift).
    pub fn scale_targets(&self, x: &Tensor) -> Result<Tensor> {
        let zeros = vec![0.0; self.n_targets()];
        affine(x, &zeros, &self.target_std, false)
    }
}
