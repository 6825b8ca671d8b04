use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::FlowVars;

/// Per-channel affine map `s[c] * z[c, t] + b[c]` with data-dependent init.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub scale: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    initialized: bool,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[channels], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            channels,
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks parameters as set without looking at data (checkpoint restore, tests).
    pub fn set_initialized(&mut self, initialized: bool) {
        self.initialized = initialized;
    }

    /// Sets `s = 1/std`, `b = -mean/std` per channel over every `[C, T]`
    /// sample in `batch`, so the first batch leaves with zero mean and unit
    /// (population) standard deviation.
    pub fn initialize(&mut self, store: &mut ParamStore, batch: &[Tensor]) -> Result<()> {
        if self.initialized {
            return Err(Error::Contract("actnorm already initialized".into()));
        }
        let (mean, std) = channel_stats(batch, self.channels)?;
        let scale = store.get_mut(self.scale).data_mut();
        for c in 0..self.channels {
            scale[c] = (1.0 / std[c]) as f32;
        }
        let bias = store.get_mut(self.bias).data_mut();
        for c in 0..self.channels {
            bias[c] = (-mean[c] / std[c]) as f32;
        }
        self.initialized = true;
        Ok(())
    }

    fn affine_params(&self, tape: &mut Tape, store: &ParamStore) -> Result<(Var, Var)> {
        if !self.initialized {
            return Err(Error::Contract("actnorm used before initialization".into()));
        }
        let s = tape.param(store, self.scale);
        let b = tape.param(store, self.bias);
        let s = tape.reshape(s, &[self.channels, 1])?;
        let b = tape.reshape(b, &[self.channels, 1])?;
        Ok((s, b))
    }

    fn log_det(&self, tape: &mut Tape, store: &ParamStore, time: usize, sign: f64) -> Result<Var> {
        let s = tape.param(store, self.scale);
        let a = tape.abs(s)?;
        let l = tape.log(a)?;
        let sum = tape.sum(l)?;
        tape.scale(sum, sign * time as f64)
    }

    fn check(&self, tape: &Tape, z: Var) -> Result<usize> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::dim("actnorm", "channels", self.channels, format!("{shape:?}")));
        }
        Ok(shape[1])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<FlowVars> {
        let time = self.check(tape, z)?;
        let (s, b) = self.affine_params(tape, store)?;
        let scaled = tape.mul(z, s)?;
        let code = tape.add(scaled, b)?;
        let log_det = self.log_det(tape, store, time, 1.0)?;
        Ok(FlowVars { code, log_det })
    }

    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, code: Var) -> Result<FlowVars> {
        let time = self.check(tape, code)?;
        let (s, b) = self.affine_params(tape, store)?;
        let shifted = tape.sub(code, b)?;
        let z = tape.div(shifted, s)?;
        let log_det = self.log_det(tape, store, time, -1.0)?;
        Ok(FlowVars { code: z, log_det })
    }
}

/// Population mean and standard deviation per channel over `[C, T]` samples.
pub(crate) fn channel_stats(batch: &[Tensor], channels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut count = 0usize;
    let mut sum = vec![0.0f64; channels];
    for t in batch {
        if t.shape().len() != 2 || t.shape()[0] != channels {
            return Err(Error::dim(
                "actnorm_init",
                "channels",
                channels,
                format!("{:?}", t.shape()),
            ));
        }
        let time = t.shape()[1];
        count += time;
        for c in 0..channels {
            sum[c] += t.row(c).iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    if count < 2 {
        return Err(Error::Contract(format!(
            "actnorm init needs at least 2 values per channel, got {count}"
        )));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0f64; channels];
    for t in batch {
        for c in 0..channels {
            var[c] += t.row(c).iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let mut std = Vec::with_capacity(channels);
    for (c, v) in var.iter().enumerate() {
        let s = (v / count as f64).sqrt();
        if s < 1e-6 * mean[c].abs().max(1.0) {
            return Err(Error::DegenerateStats {
                channel: c,
                detail: format!("standard deviation {s:e}"),
            });
        }
        std.push(s);
    }
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn init_layer(batch: &[Tensor], channels: usize) -> (ActNorm, ParamStore) {
        let mut store = ParamStore::new();
        let mut layer = ActNorm::new(&mut store, "an", channels);
        layer.initialize(&mut store, batch).unwrap();
        (layer, store)
    }

    #[test]
    fn standardized_batch_is_a_fixed_point() {
        // Two samples of [2, 2] with per-channel values {-1, 1, -1, 1}.
        let s = Tensor::new(vec![2, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let (layer, store) = init_layer(&[s.clone(), s], 2);
        assert_eq!(store.get(layer.scale).data(), &[1.0, 1.0]);
        assert_eq!(store.get(layer.bias).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_five_std_two() {
        let s = Tensor::new(vec![1, 4], vec![3.0, 7.0, 3.0, 7.0]).unwrap();
        let (layer, store) = init_layer(&[s], 1);
        assert!((store.get(layer.scale).data()[0] - 0.5).abs() < 1e-7);
        assert!((store.get(layer.bias).data()[0] + 2.5).abs() < 1e-7);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let s = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0]).unwrap();
        let mut store = ParamStore::new();
        let mut layer = ActNorm::new(&mut store, "an", 2);
        assert!(matches!(
            layer.initialize(&mut store, &[s]),
            Err(Error::DegenerateStats { channel: 1, .. })
        ));
    }

    #[test]
    fn uninitialized_forward_is_rejected() {
        let mut store = ParamStore::new();
        let layer = ActNorm::new(&mut store, "an", 2);
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[2, 3]));
        assert!(matches!(layer.forward(&mut tape, &store, z), Err(Error::Contract(_))));
    }

    #[test]
    fn log_det_closed_form_and_round_trip() {
        let mut store = ParamStore::new();
        let mut layer = ActNorm::new(&mut store, "an", 2);
        store.get_mut(layer.scale).data_mut().copy_from_slice(&[2.0, 2.0]);
        layer.set_initialized(true);
        let mut tape = Tape::new();
        let zt = Tensor::from_fn(&[2, 5], |i| i as f32 * 0.3 - 1.0);
        let z = tape.constant(&zt);
        let fwd = layer.forward(&mut tape, &store, z).unwrap();
        assert!((tape.item(fwd.log_det) - 10.0 * 2f64.ln()).abs() < 1e-9);
        let inv = layer.inverse(&mut tape, &store, fwd.code).unwrap();
        assert!(tape.tensor(inv.code).max_abs_diff(&zt) < 1e-5);
        assert!((tape.item(inv.log_det) + tape.item(fwd.log_det)).abs() < 1e-12);
    }

    #[test]
    fn post_init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::from_fn(&[3, 16], |i| {
                    let x: f32 = StandardNormal.sample(&mut rng);
                    x * (1.0 + (i / 16) as f32) + 3.0
                })
            })
            .collect();
        let (layer, store) = init_layer(&batch, 3);
        let outs: Vec<Tensor> = batch
            .iter()
            .map(|b| {
                let mut tape = Tape::new();
                let z = tape.constant(b);
                let r = layer.forward(&mut tape, &store, z).unwrap();
                tape.tensor(r.code)
            })
            .collect();
        let (mean, std) = channel_stats(&outs, 3).unwrap();
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-5);
            assert!((std[c] - 1.0).abs() < 1e-5);
        }
    }
}
