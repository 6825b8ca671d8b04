use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::FlowVars;
use crate::nn::{Conv1d, GatedConv};

/// Bound applied to the coupling log-scale.
pub const LOG_SCALE_CLAMP: f64 = 5.0;

/// Conditional affine coupling.
///
/// The first `ceil(C/2)` channels pass through; the rest are scaled by
/// `exp(clamp(logs))` and shifted by `t`, where `(logs, t)` come from a
/// backbone over the pass-through channels concatenated with `h` (resampled
/// to the latent length). With `conditioned = false` the backbone sees only
/// the pass-through half and `h` is ignored.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    pub channels: usize,
    pub split: usize,
    pub cond_channels: usize,
    pub conditioned: bool,
    pub hidden: GatedConv,
    pub out: Conv1d,
}

impl AffineCoupling {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        conditioned: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let split = channels.div_ceil(2);
        if channels < 2 {
            return Err(Error::dim("coupling", "channels (split halves)", ">= 2", channels));
        }
        let backbone_in = split + if conditioned { cond_channels } else { 0 };
        let transformed = channels - split;
        Ok(Self {
            channels,
            split,
            cond_channels,
            conditioned,
            hidden: GatedConv::new(store, &format!("{name}.hidden"), backbone_in, hidden, 3, 1, 1, rng),
            out: Conv1d::zeros(store, &format!("{name}.out"), hidden, 2 * transformed, 3, 1),
        })
    }

    fn transformed(&self) -> usize {
        self.channels - self.split
    }

    /// Clamped log-scale and shift for the transformed half.
    fn scale_shift(&self, tape: &mut Tape, store: &ParamStore, pass: Var, h: Var) -> Result<(Var, Var)> {
        let input = if self.conditioned {
            let hs = tape.shape(h).to_vec();
            if hs.len() != 2 || hs[0] != self.cond_channels {
                return Err(Error::dim(
                    "coupling",
                    "conditioning channels",
                    self.cond_channels,
                    format!("{hs:?}"),
                ));
            }
            let time = tape.shape(pass)[1];
            let h = tape.resample_time(h, time)?;
            tape.concat_rows(&[pass, h])?
        } else {
            pass
        };
        let feat = self.hidden.forward(tape, store, input)?;
        let st = self.out.forward(tape, store, feat)?;
        let nb = self.transformed();
        let logs = tape.slice_rows(st, 0, nb)?;
        let logs = tape.clamp(logs, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)?;
        let shift = tape.slice_rows(st, nb, nb)?;
        Ok((logs, shift))
    }

    fn split_input(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::dim("coupling", "channels", self.channels, format!("{shape:?}")));
        }
        let a = tape.slice_rows(z, 0, self.split)?;
        let b = tape.slice_rows(z, self.split, self.transformed())?;
        Ok((a, b))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, h: Var) -> Result<FlowVars> {
        let (za, zb) = self.split_input(tape, z)?;
        let (logs, shift) = self.scale_shift(tape, store, za, h)?;
        let s = tape.exp(logs)?;
        let scaled = tape.mul(zb, s)?;
        let yb = tape.add(scaled, shift)?;
        let code = tape.concat_rows(&[za, yb])?;
        let log_det = tape.sum(logs)?;
        Ok(FlowVars { code, log_det })
    }

    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, code: Var, h: Var) -> Result<FlowVars> {
        let (ya, yb) = self.split_input(tape, code)?;
        let (logs, shift) = self.scale_shift(tape, store, ya, h)?;
        let neg = tape.neg(logs)?;
        let inv_s = tape.exp(neg)?;
        let centered = tape.sub(yb, shift)?;
        let zb = tape.mul(centered, inv_s)?;
        let z = tape.concat_rows(&[ya, zb])?;
        let s = tape.sum(logs)?;
        let log_det = tape.neg(s)?;
        Ok(FlowVars { code: z, log_det })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn layer(channels: usize, conditioned: bool) -> (AffineCoupling, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let l = AffineCoupling::new(&mut store, "cp", channels, 3, 8, conditioned, &mut rng).unwrap();
        (l, store)
    }

    fn randomize_out(l: &AffineCoupling, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0f32, 0.3).unwrap();
        for id in [l.out.weight, l.out.bias] {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = d.sample(&mut rng));
        }
    }

    #[test]
    fn zero_backbone_is_identity() {
        let (l, store) = layer(4, true);
        let mut tape = Tape::new();
        let zt = Tensor::from_fn(&[4, 6], |i| i as f32 * 0.1);
        let z = tape.constant(&zt);
        let h = tape.constant(&Tensor::from_fn(&[3, 6], |i| (i as f32).cos()));
        let r = l.forward(&mut tape, &store, z, h).unwrap();
        assert_eq!(tape.item(r.log_det), 0.0);
        assert_eq!(tape.tensor(r.code), zt);
    }

    #[test]
    fn constant_log_scale_gives_closed_form_log_det() {
        // |z_b| = 2 channels, T = 3, logs = ln 2 everywhere.
        let (l, mut store) = layer(4, true);
        let bias = store.get_mut(l.out.bias).data_mut();
        bias[0] = 2f32.ln();
        bias[1] = 2f32.ln();
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::from_fn(&[4, 3], |i| i as f32));
        let h = tape.constant(&Tensor::zeros(&[3, 3]));
        let r = l.forward(&mut tape, &store, z, h).unwrap();
        assert!((tape.item(r.log_det) - 6.0 * 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn round_trip_with_random_backbone() {
        for seed in 0..10 {
            let (l, mut store) = layer(5, true);
            randomize_out(&l, &mut store, seed);
            let mut tape = Tape::new();
            let zt = Tensor::from_fn(&[5, 8], |i| ((i as f32) * 0.37 + seed as f32).sin());
            let z = tape.constant(&zt);
            // h shorter than z: nearest-neighbour resampled to T = 8.
            let h = tape.constant(&Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.5).cos()));
            let f = l.forward(&mut tape, &store, z, h).unwrap();
            let inv = l.inverse(&mut tape, &store, f.code, h).unwrap();
            assert!(tape.tensor(inv.code).max_abs_diff(&zt) < 1e-5);
            assert!((tape.item(f.log_det) + tape.item(inv.log_det)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(matches!(
            AffineCoupling::new(&mut store, "cp", 1, 2, 4, true, &mut rng),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conditioning_sensitivity() {
        let zt = Tensor::from_fn(&[4, 6], |i| (i as f32 * 0.3).sin());
        let h1 = Tensor::from_fn(&[3, 6], |i| (i as f32).cos());
        let h2 = Tensor::from_fn(&[3, 6], |i| (i as f32 * 1.7).sin() * 2.0);
        let run = |l: &AffineCoupling, store: &ParamStore, h: &Tensor| {
            let mut tape = Tape::new();
            let z = tape.constant(&zt);
            let h = tape.constant(h);
            let r = l.forward(&mut tape, store, z, h).unwrap();
            (tape.tensor(r.code), tape.item(r.log_det))
        };

        let (l, mut store) = layer(4, true);
        randomize_out(&l, &mut store, 9);
        assert_ne!(run(&l, &store, &h1).0, run(&l, &store, &h2).0);

        let (l, mut store) = layer(4, false);
        randomize_out(&l, &mut store, 9);
        let (c1, d1) = run(&l, &store, &h1);
        let (c2, d2) = run(&l, &store, &h2);
        assert_eq!(c1, c2);
        assert_eq!(d1.to_bits(), d2.to_bits());
    }
}
