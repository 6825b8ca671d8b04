use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Conv1d;

/// Bound on the raw sigma-head output before exponentiation.
pub const LOG_SIGMA_CLAMP: f64 = 7.0;

/// Diagonal Gaussian over the flow output, parameterized from `h(y)`.
#[derive(Clone, Debug)]
pub enum ConditionalBase {
    /// `mu = conv(h)`, `sigma = exp(clamp(conv(h), -7, 7))`.
    Learned { mu_head: Conv1d, sigma_head: Conv1d },
    /// Fixed `mu = 0`, `sigma = 1`.
    StandardNormal { channels: usize },
}

impl ConditionalBase {
    pub fn learned(
        store: &mut ParamStore,
        name: &str,
        cond_channels: usize,
        latent_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pad = (kernel - 1) / 2;
        Self::Learned {
            mu_head: Conv1d::new(
                store,
                &format!("{name}.mu"),
                cond_channels,
                latent_channels,
                kernel,
                1,
                pad,
                rng,
            ),
            sigma_head: Conv1d::new(
                store,
                &format!("{name}.sigma"),
                cond_channels,
                latent_channels,
                kernel,
                1,
                pad,
                rng,
            ),
        }
    }

    pub fn standard_normal(latent_channels: usize) -> Self {
        Self::StandardNormal {
            channels: latent_channels,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Self::Learned { .. })
    }

    /// `(mu, sigma)` over `[C_z, T_h]`.
    pub fn params(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
        match self {
            Self::Learned { mu_head, sigma_head } => {
                let mu = mu_head.forward(tape, store, h)?;
                let raw = sigma_head.forward(tape, store, h)?;
                let raw = tape.clamp(raw, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
                let sigma = tape.exp(raw)?;
                Ok((mu, sigma))
            }
            Self::StandardNormal { channels } => {
                let time = tape.shape(h)[1];
                let mu = tape.constant(&Tensor::zeros(&[*channels, time]));
                let sigma = tape.constant(&Tensor::full(&[*channels, time], 1.0));
                Ok((mu, sigma))
            }
        }
    }
}

/// `sum_i [-ln(2 pi)/2 - ln sigma_i - (z_i - mu_i)^2 / (2 sigma_i^2)]`.
pub fn base_log_prob(tape: &mut Tape, z: Var, mu: Var, sigma: Var) -> Result<Var> {
    if tape.shape(z) != tape.shape(mu) || tape.shape(z) != tape.shape(sigma) {
        return Err(Error::dim(
            "base_log_prob",
            "shape",
            format!("{:?}", tape.shape(z)),
            format!("{:?} / {:?}", tape.shape(mu), tape.shape(sigma)),
        ));
    }
    if let Some(s) = tape.value(sigma).iter().find(|&&s| s <= 0.0) {
        return Err(Error::domain("base_log_prob", format!("non-positive sigma {s}")));
    }
    let d = tape.numel(z) as f64;
    let diff = tape.sub(z, mu)?;
    let r = tape.div(diff, sigma)?;
    let sq = tape.square(r)?;
    let quad = tape.sum(sq)?;
    let quad = tape.scale(quad, -0.5)?;
    let ls = tape.log(sigma)?;
    let ls = tape.sum(ls)?;
    let lp = tape.sub(quad, ls)?;
    tape.add_scalar(lp, -0.5 * d * (2.0 * PI).ln())
}

/// Reparameterized draw `mu + sigma * noise` with caller-supplied unit normals.
pub fn base_sample(mu: &Tensor, sigma: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mu.shape() != sigma.shape() || mu.shape() != noise.shape() {
        return Err(Error::dim(
            "base_sample",
            "shape",
            format!("{:?}", mu.shape()),
            format!("{:?} / {:?}", sigma.shape(), noise.shape()),
        ));
    }
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(noise.data())
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}
