//! The conditional VAE with a flow prior.
//!
//! Training: `z0 = encoder([x; y])`, `h, mu, sigma = conditioning(y)`,
//! `x_hat = decoder([z0; h])`, and the per-sample loss
//! `MSE(x, x_hat) - prior_weight * log p_flow(z0 | h)`.
//!
//! Inference: `z_k = mu + sigma * eps`, `z0 = flow^{-1}(z_k, h)`,
//! `x_hat = decoder([z0; h])`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::flow::{base_sample, CnfModel, FlowConfig};
use crate::nn::{Conv1d, GatedBlock, UpBlock};

/// Step-flow depths from the depth sweep; others are accepted with a warning.
pub const FLOW_DEPTHS: [usize; 5] = [2, 4, 8, 16, 32];

/// z-value of the two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub window_len: usize,
    pub n_input_channels: usize,
    pub n_appliances: usize,
    pub latent_channels: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub n_flow_blocks: usize,
    pub hidden_channels: usize,
    /// Kernel of the encoder output conv and the mu/sigma heads.
    pub head_kernel: usize,
    pub prior_weight: f64,
    pub ablation_simple_affine: bool,
    pub ablation_standard_normal_base: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_len: 256,
            n_input_channels: 6,
            n_appliances: 8,
            latent_channels: 16,
            n_encoder_blocks: 3,
            n_decoder_blocks: 3,
            n_flow_blocks: 8,
            hidden_channels: 64,
            head_kernel: 3,
            prior_weight: 1.0,
            ablation_simple_affine: false,
            ablation_standard_normal_base: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// `T / 2^n_encoder_blocks`.
    pub fn latent_len(&self) -> usize {
        self.window_len >> self.n_encoder_blocks
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.latent_channels, self.latent_len()]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_len", self.window_len),
            ("n_input_channels", self.n_input_channels),
            ("n_appliances", self.n_appliances),
            ("latent_channels", self.latent_channels),
            ("hidden_channels", self.hidden_channels),
            ("head_kernel", self.head_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be positive")));
            }
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(Error::Contract("head_kernel must be odd".into()));
        }
        let factor = 1usize << self.n_encoder_blocks;
        if !self.window_len.is_multiple_of(factor) {
            return Err(Error::Contract(format!(
                "window_len {} not divisible by 2^{}",
                self.window_len, self.n_encoder_blocks
            )));
        }
        if self.n_decoder_blocks != self.n_encoder_blocks {
            return Err(Error::Contract(format!(
                "decoder blocks ({}) must match encoder blocks ({}) to restore the window length",
                self.n_decoder_blocks, self.n_encoder_blocks
            )));
        }
        if self.latent_channels < 2 && self.n_flow_blocks > 0 {
            return Err(Error::Contract(
                "coupling layers need at least 2 latent channels".into(),
            ));
        }
        if !(self.prior_weight.is_finite() && self.prior_weight >= 0.0) {
            return Err(Error::Contract(format!("invalid prior_weight {}", self.prior_weight)));
        }
        if !FLOW_DEPTHS.contains(&self.n_flow_blocks) {
            log::warn!(
                "n_flow_blocks = {} is outside the studied depths {:?}",
                self.n_flow_blocks,
                FLOW_DEPTHS
            );
        }
        Ok(())
    }

    fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            channels: self.latent_channels,
            cond_channels: self.hidden_channels,
            hidden: self.hidden_channels,
            n_blocks: self.n_flow_blocks,
            conditioned_coupling: !self.ablation_simple_affine,
            learned_base: !self.ablation_standard_normal_base,
            head_kernel: self.head_kernel,
        }
    }
}

/// `h(y)` plus the base-distribution parameters computed from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningOutput {
    pub h: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean squared reconstruction error.
    pub reconstruction: f64,
    /// `-log p(z0 | y)` under the flow prior.
    pub prior: f64,
}

/// Sample mean with optional 95% half-widths `1.96 * s / sqrt(n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Tensor,
    pub half_width: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<GatedBlock>,
    head: Conv1d,
}

#[derive(Clone, Debug)]
struct Decoder {
    blocks: Vec<UpBlock>,
    mid: Conv1d,
    out: Conv1d,
}

#[derive(Clone, Debug)]
pub struct PfvaeModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    conditioning: Vec<GatedBlock>,
    decoder: Decoder,
    cnf: CnfModel,
}

impl PfvaeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let hid = config.hidden_channels;
        let pad = (config.head_kernel - 1) / 2;

        let mut blocks = Vec::new();
        let mut c_in = config.n_appliances + config.n_input_channels;
        for i in 0..config.n_encoder_blocks {
            blocks.push(GatedBlock::new(
                &mut params,
                &format!("encoder.block{i}"),
                c_in,
                hid,
                &mut rng,
            ));
            c_in = hid;
        }
        let head = Conv1d::new(
            &mut params,
            "encoder.head",
            c_in,
            config.latent_channels,
            config.head_kernel,
            1,
            pad,
            &mut rng,
        );
        let encoder = Encoder { blocks, head };

        let mut conditioning = Vec::new();
        let mut c_in = config.n_input_channels;
        for i in 0..config.n_encoder_blocks {
            conditioning.push(GatedBlock::new(
                &mut params,
                &format!("conditioning.block{i}"),
                c_in,
                hid,
                &mut rng,
            ));
            c_in = hid;
        }
        // h(y) has `hidden` channels whenever at least one block exists.
        if config.n_encoder_blocks == 0 && config.n_input_channels != hid {
            return Err(Error::Contract(
                "with zero conditioning blocks h(y) = y, so n_input_channels must equal hidden_channels".into(),
            ));
        }

        let mut blocks = Vec::new();
        let mut c_in = config.latent_channels + hid;
        for i in 0..config.n_decoder_blocks {
            blocks.push(UpBlock::new(
                &mut params,
                &format!("decoder.block{i}"),
                c_in,
                hid,
                &mut rng,
            ));
            c_in = hid;
        }
        let mid = Conv1d::new(&mut params, "decoder.mid", c_in, hid, 3, 1, 1, &mut rng);
        let out = Conv1d::new(&mut params, "decoder.out", hid, config.n_appliances, 1, 1, 0, &mut rng);
        let decoder = Decoder { blocks, mid, out };

        let cnf = CnfModel::new(&mut params, "cnf", &config.flow_config(), &mut rng)?;

        Ok(Self {
            config,
            params,
            encoder,
            conditioning,
            decoder,
            cnf,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn cnf(&self) -> &CnfModel {
        &self.cnf
    }

    pub fn cnf_mut(&mut self) -> &mut CnfModel {
        &mut self.cnf
    }

    /// Trainable scalars across encoder, conditioning, decoder, and flow.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Parameter ids grouped as encoder, conditioning (incl. base heads),
    /// decoder, and flow blocks.
    pub fn parameter_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut cond = self.params.group("conditioning.");
        cond.extend(self.params.group("cnf.base."));
        vec![
            ("encoder", self.params.group("encoder.")),
            ("conditioning", cond),
            ("decoder", self.params.group("decoder.")),
            ("flow", self.params.group("cnf.block")),
        ]
    }

    fn check_shape(&self, what: &str, t: &[usize], rows: usize, cols: usize) -> Result<()> {
        if t != [rows, cols] {
            return Err(Error::dim("pfvae", what, format!("[{rows}, {cols}]"), format!("{t:?}")));
        }
        Ok(())
    }

    pub fn encode_var(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
        let c = &self.config;
        self.check_shape("x", tape.shape(x), c.n_appliances, c.window_len)?;
        self.check_shape("y", tape.shape(y), c.n_input_channels, c.window_len)?;
        let mut cur = tape.concat_rows(&[x, y])?;
        for b in &self.encoder.blocks {
            cur = b.forward(tape, &self.params, cur)?;
        }
        self.encoder.head.forward(tape, &self.params, cur)
    }

    /// Returns `(h, mu, sigma)`.
    pub fn condition_var(&self, tape: &mut Tape, y: Var) -> Result<(Var, Var, Var)> {
        let c = &self.config;
        self.check_shape("y", tape.shape(y), c.n_input_channels, c.window_len)?;
        let mut h = y;
        for b in &self.conditioning {
            h = b.forward(tape, &self.params, h)?;
        }
        let (mu, sigma) = self.cnf.base.params(tape, &self.params, h)?;
        Ok((h, mu, sigma))
    }

    pub fn decode_var(&self, tape: &mut Tape, z0: Var, h: Var) -> Result<Var> {
        let c = &self.config;
        self.check_shape("z0", tape.shape(z0), c.latent_channels, c.latent_len())?;
        self.check_shape("h", tape.shape(h), c.hidden_channels, c.latent_len())?;
        let mut cur = tape.concat_rows(&[z0, h])?;
        for b in &self.decoder.blocks {
            cur = b.forward(tape, &self.params, cur)?;
        }
        let mid = self.decoder.mid.forward(tape, &self.params, cur)?;
        let mid = tape.tanh(mid)?;
        self.decoder.out.forward(tape, &self.params, mid)
    }

    pub fn encode(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(x), tape.constant(y));
        let z = self.encode_var(&mut tape, x, y)?;
        Ok(tape.tensor(z))
    }

    pub fn condition(&self, y: &Tensor) -> Result<ConditioningOutput> {
        let mut tape = Tape::new();
        let y = tape.constant(y);
        let (h, mu, sigma) = self.condition_var(&mut tape, y)?;
        Ok(ConditioningOutput {
            h: tape.tensor(h),
            mu: tape.tensor(mu),
            sigma: tape.tensor(sigma),
        })
    }

    pub fn decode(&self, z0: &Tensor, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (z0, h) = (tape.constant(z0), tape.constant(h));
        let x = self.decode_var(&mut tape, z0, h)?;
        Ok(tape.tensor(x))
    }

    /// Per-sample loss terms `(total, reconstruction, prior)` on `tape`.
    ///
    /// `coupling_h` replaces `h(y)` inside the coupling layers only; the base
    /// and decoder always see the real `h(y)`.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        sample: &WindowSample,
        coupling_h: Option<&Tensor>,
    ) -> Result<(Var, Var, Var)> {
        let x = tape.constant(&sample.x);
        let y = tape.constant(&sample.y);
        let z0 = self.encode_var(tape, x, y)?;
        let (h, mu, sigma) = self.condition_var(tape, y)?;
        let x_hat = self
            .decode_var(tape, z0, h)
            .map_err(|e| term_error(e, "reconstruction"))?;
        let diff = tape.sub(x_hat, x)?;
        let sq = tape.square(diff)?;
        let rec = tape.mean(sq).map_err(|e| term_error(e, "reconstruction"))?;
        let flow_h = match coupling_h {
            Some(t) => tape.constant(t),
            None => h,
        };
        let log_prob = self
            .cnf
            .log_prob(tape, &self.params, z0, flow_h, mu, sigma)
            .map_err(|e| term_error(e, "prior"))?;
        let prior = tape.neg(log_prob)?;
        let weighted = tape.scale(prior, self.config.prior_weight)?;
        let total = tape.add(rec, weighted).map_err(|e| term_error(e, "total"))?;
        Ok((total, rec, prior))
    }

    /// Primes every actnorm layer from `batch` if that has not happened yet.
    pub fn ensure_initialized(&mut self, batch: &[WindowSample]) -> Result<()> {
        if self.cnf.is_initialized() {
            return Ok(());
        }
        if batch.is_empty() {
            return Err(Error::Contract("cannot initialize actnorm from an empty batch".into()));
        }
        let (z0, h): (Vec<Tensor>, Vec<Tensor>) = batch
            .iter()
            .map(|s| Ok((self.encode(&s.x, &s.y)?, self.condition(&s.y)?.h)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        self.cnf.initialize(&mut self.params, &z0, &h)
    }

    /// Batch-mean loss; gradients are added into the parameter store.
    ///
    /// The caller zeroes gradients and applies the optimizer.
    pub fn training_step(&mut self, batch: &[WindowSample]) -> Result<LossBreakdown> {
        self.training_step_with(batch, None)
    }

    pub fn training_step_with(&mut self, batch: &[WindowSample], coupling_h: Option<&Tensor>) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        self.ensure_initialized(batch)?;
        let scale = 1.0 / batch.len() as f64;
        let this = &*self;
        let per_sample: Vec<(LossBreakdown, ParamGrads)> = batch
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new();
                let (total, rec, prior) = this.sample_loss(&mut tape, s, coupling_h)?;
                let scaled = tape.scale(total, scale)?;
                let grads = ParamGrads::from_gradients(&tape.gradients(scaled)?);
                let lb = LossBreakdown {
                    total: tape.item(total),
                    reconstruction: tape.item(rec),
                    prior: tape.item(prior),
                };
                Ok((lb, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = LossBreakdown::default();
        let mut sum = ParamGrads::default();
        for (lb, grads) in &per_sample {
            sum.add(grads);
            out.total += lb.total * scale;
            out.reconstruction += lb.reconstruction * scale;
            out.prior += lb.prior * scale;
        }
        check_finite(&out)?;
        sum.accumulate_into(&mut self.params);
        Ok(out)
    }

    /// Batch-mean loss without touching gradients.
    pub fn evaluate_loss(&self, batch: &[WindowSample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let parts = batch
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new();
                let (total, rec, prior) = self.sample_loss(&mut tape, s, None)?;
                Ok(LossBreakdown {
                    total: tape.item(total),
                    reconstruction: tape.item(rec),
                    prior: tape.item(prior),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = LossBreakdown::default();
        for lb in parts {
            out.total += lb.total * scale;
            out.reconstruction += lb.reconstruction * scale;
            out.prior += lb.prior * scale;
        }
        check_finite(&out)?;
        Ok(out)
    }

    /// `decode(flow^{-1}(mu + sigma * noise, h), h)` for a fixed noise draw.
    pub fn sample_with_noise(&self, cond: &ConditioningOutput, noise: &Tensor) -> Result<Tensor> {
        if !self.cnf.is_initialized() {
            return Err(Error::Contract(
                "sampling from a model whose actnorm layers are not initialized".into(),
            ));
        }
        let zk = base_sample(&cond.mu, &cond.sigma, noise)?;
        let mut tape = Tape::new();
        let zk = tape.constant(&zk);
        let h = tape.constant(&cond.h);
        let z0 = self.cnf.inverse(&mut tape, &self.params, zk, h)?;
        let x = self.decode_var(&mut tape, z0.code, h)?;
        Ok(tape.tensor(x))
    }

    /// `n` draws of `x` given `y`, each `[M, T]`, from a generator seeded with `seed`.
    pub fn sample(&self, y: &Tensor, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let cond = self.condition(y)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = self.config.latent_shape();
        (0..n)
            .map(|_| {
                let noise = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng));
                self.sample_with_noise(&cond, &noise)
            })
            .collect()
    }

    pub fn predict_mean(&self, y: &Tensor, n: usize, seed: u64, intervals: bool) -> Result<Prediction> {
        if n == 0 {
            return Err(Error::Contract("predict_mean needs at least one sample".into()));
        }
        if intervals && n < 2 {
            return Err(Error::Contract(format!(
                "confidence intervals need at least 2 samples, got {n}"
            )));
        }
        let samples = self.sample(y, n, seed)?;
        Ok(summarize_samples(&samples, intervals))
    }
}

/// Mean and, optionally, 95% half-widths over equally shaped samples.
pub fn summarize_samples(samples: &[Tensor], intervals: bool) -> Prediction {
    let n = samples.len() as f64;
    let shape = samples[0].shape().to_vec();
    let len = samples[0].len();
    let mut mean = vec![0.0f64; len];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.data()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let half_width = intervals.then(|| {
        let mut var = vec![0.0f64; len];
        for s in samples {
            for ((acc, &v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
                *acc += (v as f64 - m).powi(2);
            }
        }
        let hw: Vec<f64> = var.iter().map(|v| Z_95 * (v / (n - 1.0)).sqrt() / n.sqrt()).collect();
        Tensor::from_f64(&shape, &hw).expect("shape from sample")
    });
    Prediction {
        mean: Tensor::from_f64(&shape, &mean).expect("shape from sample"),
        half_width,
    }
}

fn term_error(e: Error, term: &str) -> Error {
    match e {
        Error::NonFinite { term: inner } => Error::NonFinite {
            term: format!("{term} ({inner})"),
        },
        other => other,
    }
}

fn check_finite(lb: &LossBreakdown) -> Result<()> {
    for (name, v) in [
        ("reconstruction", lb.reconstruction),
        ("prior", lb.prior),
        ("total", lb.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(())
}
