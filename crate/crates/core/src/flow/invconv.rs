use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::FlowVars;

/// Smallest `|det W|` accepted before the layer is declared singular.
pub const MIN_ABS_DET: f64 = 1e-12;

/// Learned channel mixing `z[:, t] -> W z[:, t]` with a dense `W`.
#[derive(Clone, Debug)]
pub struct InvConv1x1 {
    pub weight: ParamId,
    pub channels: usize,
}

impl InvConv1x1 {
    /// `W` starts as the orthogonal factor of a QR decomposition of a Gaussian matrix.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let g = DMatrix::<f64>::from_fn(channels, channels, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let w = Tensor::from_fn(&[channels, channels], |i| q[(i / channels, i % channels)] as f32);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            channels,
        }
    }

    fn check(&self, tape: &Tape, z: Var) -> Result<usize> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::dim("invconv", "channels", self.channels, format!("{shape:?}")));
        }
        Ok(shape[1])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<FlowVars> {
        let time = self.check(tape, z)?;
        let w = tape.param(store, self.weight);
        let lad = tape.log_abs_det(w)?;
        let code = tape.matmul(w, z)?;
        let log_det = tape.scale(lad, time as f64)?;
        Ok(FlowVars { code, log_det })
    }

    /// Inverse map. `W^{-1}` enters the tape as a constant, so no gradient
    /// flows from the inverse code back to `W`.
    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, code: Var) -> Result<FlowVars> {
        let time = self.check(tape, code)?;
        let c = self.channels;
        let w_store = store.get(self.weight);
        let m = DMatrix::from_row_iterator(c, c, w_store.data().iter().map(|&v| v as f64));
        let det = m.determinant();
        if !(det.abs() >= MIN_ABS_DET) {
            return Err(Error::Singular { det: det.abs() });
        }
        let inv = m.try_inverse().ok_or(Error::Singular { det: det.abs() })?;
        let inv_rows: Vec<f64> = (0..c * c).map(|i| inv[(i / c, i % c)]).collect();
        let w_inv = tape.constant_f64(&[c, c], inv_rows)?;
        let z = tape.matmul(w_inv, code)?;
        let w = tape.param(store, self.weight);
        let lad = tape.log_abs_det(w)?;
        let log_det = tape.scale(lad, -(time as f64))?;
        Ok(FlowVars { code: z, log_det })
    }
}
