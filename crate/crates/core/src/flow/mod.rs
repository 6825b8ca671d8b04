//! Conditional normalizing flow over the latent code.
//!
//! A [`CnfModel`] stacks [`StepFlowBlock`]s (actnorm, invertible 1x1
//! convolution, conditional affine coupling) and scores the result under a
//! [`ConditionalBase`]. Every layer is dimension-preserving and returns its
//! log-|det Jacobian| alongside the transformed code.

mod actnorm;
mod base;
mod coupling;
mod invconv;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use actnorm::ActNorm;
pub use base::{base_log_prob, base_sample, ConditionalBase, LOG_SIGMA_CLAMP};
pub use coupling::{AffineCoupling, LOG_SCALE_CLAMP};
pub use invconv::{InvConv1x1, MIN_ABS_DET};

/// Output of an invertible map recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FlowVars {
    pub code: Var,
    pub log_det: Var,
}

/// Output of an invertible map at storage precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub code: Tensor,
    pub log_det: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    ActNorm,
    InvConv,
    Coupling,
}

/// One layer application during a traced pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub block: usize,
    pub layer: LayerKind,
}

/// Actnorm, then invertible 1x1 convolution, then affine coupling.
#[derive(Clone, Debug)]
pub struct StepFlowBlock {
    pub actnorm: ActNorm,
    pub invconv: InvConv1x1,
    pub coupling: AffineCoupling,
}

impl StepFlowBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            actnorm: ActNorm::new(store, &format!("{name}.actnorm"), config.channels),
            invconv: InvConv1x1::new(store, &format!("{name}.invconv"), config.channels, rng),
            coupling: AffineCoupling::new(
                store,
                &format!("{name}.coupling"),
                config.channels,
                config.cond_channels,
                config.hidden,
                config.conditioned_coupling,
                rng,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, h: Var) -> Result<FlowVars> {
        self.forward_traced(tape, store, z, h, 0, &mut Vec::new())
    }

    fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        h: Var,
        index: usize,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<FlowVars> {
        let a = self.actnorm.forward(tape, store, z)?;
        trace.push(TraceEvent {
            block: index,
            layer: LayerKind::ActNorm,
        });
        let b = self.invconv.forward(tape, store, a.code)?;
        trace.push(TraceEvent {
            block: index,
            layer: LayerKind::InvConv,
        });
        let c = self.coupling.forward(tape, store, b.code, h)?;
        trace.push(TraceEvent {
            block: index,
            layer: LayerKind::Coupling,
        });
        let ld = tape.add(a.log_det, b.log_det)?;
        let log_det = tape.add(ld, c.log_det)?;
        Ok(FlowVars { code: c.code, log_det })
    }

    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, code: Var, h: Var) -> Result<FlowVars> {
        self.inverse_traced(tape, store, code, h, 0, &mut Vec::new())
    }

    fn inverse_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        code: Var,
        h: Var,
        index: usize,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<FlowVars> {
        let c = self.coupling.inverse(tape, store, code, h)?;
        trace.push(TraceEvent {
            block: index,
            layer: LayerKind::Coupling,
        });
        let b = self.invconv.inverse(tape, store, c.code)?;
        trace.push(TraceEvent {
            block: index,
            layer: LayerKind::InvConv,
        });
        let a = self.actnorm.inverse(tape, store, b.code)?;
        trace.push(TraceEvent {
            block: index,
            layer: LayerKind::ActNorm,
        });
        let ld = tape.add(c.log_det, b.log_det)?;
        let log_det = tape.add(ld, a.log_det)?;
        Ok(FlowVars { code: a.code, log_det })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Latent channels `C_z`.
    pub channels: usize,
    /// Channels of `h(y)`.
    pub cond_channels: usize,
    /// Width of the coupling backbone.
    pub hidden: usize,
    pub n_blocks: usize,
    /// Feed `h(y)` into the coupling backbones.
    pub conditioned_coupling: bool,
    /// Learned `mu(h), sigma(h)` heads; otherwise a fixed standard normal.
    pub learned_base: bool,
    pub head_kernel: usize,
}

/// Stack of step-flow blocks plus the conditional base distribution.
#[derive(Clone, Debug)]
pub struct CnfModel {
    pub blocks: Vec<StepFlowBlock>,
    pub base: ConditionalBase,
}

impl CnfModel {
    pub fn new(store: &mut ParamStore, name: &str, config: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (0..config.n_blocks)
            .map(|i| StepFlowBlock::new(store, &format!("{name}.block{i}"), config, rng))
            .collect::<Result<Vec<_>>>()?;
        let base = if config.learned_base {
            ConditionalBase::learned(
                store,
                &format!("{name}.base"),
                config.cond_channels,
                config.channels,
                config.head_kernel,
                rng,
            )
        } else {
            ConditionalBase::standard_normal(config.channels)
        };
        Ok(Self { blocks, base })
    }

    pub fn is_initialized(&self) -> bool {
        self.blocks.iter().all(|b| b.actnorm.is_initialized())
    }

    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.blocks.iter().map(|b| b.actnorm.is_initialized()).collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        if flags.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "{} actnorm flags for {} blocks",
                flags.len(),
                self.blocks.len()
            )));
        }
        for (b, &f) in self.blocks.iter_mut().zip(flags) {
            b.actnorm.set_initialized(f);
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization: each block's actnorm is fit to
    /// the batch as it arrives at that block.
    pub fn initialize(&mut self, store: &mut ParamStore, z0: &[Tensor], h: &[Tensor]) -> Result<()> {
        if z0.len() != h.len() {
            return Err(Error::Contract("latent and conditioning batches differ in size".into()));
        }
        let mut current: Vec<Tensor> = z0.to_vec();
        for i in 0..self.blocks.len() {
            self.blocks[i].actnorm.initialize(store, &current)?;
            let block = &self.blocks[i];
            current = current
                .iter()
                .zip(h)
                .map(|(z, h)| {
                    let mut tape = Tape::new();
                    let z = tape.constant(z);
                    let h = tape.constant(h);
                    let r = block.forward(&mut tape, store, z, h)?;
                    Ok(tape.tensor(r.code))
                })
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(())
    }

    /// `z_0 -> z_k` with the summed log-determinant.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z0: Var, h: Var) -> Result<FlowVars> {
        self.forward_traced(tape, store, z0, h, &mut Vec::new())
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z0: Var,
        h: Var,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<FlowVars> {
        let mut code = z0;
        let mut log_det = tape.constant(&Tensor::scalar(0.0));
        for (i, block) in self.blocks.iter().enumerate() {
            let r = block.forward_traced(tape, store, code, h, i, trace)?;
            code = r.code;
            log_det = tape.add(log_det, r.log_det)?;
        }
        Ok(FlowVars { code, log_det })
    }

    /// `z_k -> z_0`; blocks are undone last-to-first.
    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, zk: Var, h: Var) -> Result<FlowVars> {
        self.inverse_traced(tape, store, zk, h, &mut Vec::new())
    }

    pub fn inverse_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        zk: Var,
        h: Var,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<FlowVars> {
        let mut code = zk;
        let mut log_det = tape.constant(&Tensor::scalar(0.0));
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let r = block.inverse_traced(tape, store, code, h, i, trace)?;
            code = r.code;
            log_det = tape.add(log_det, r.log_det)?;
        }
        Ok(FlowVars { code, log_det })
    }

    /// `log pi(f(z_0, h) | mu, sigma) + log|det df/dz_0|`.
    pub fn log_prob(&self, tape: &mut Tape, store: &ParamStore, z0: Var, h: Var, mu: Var, sigma: Var) -> Result<Var> {
        let f = self.forward(tape, store, z0, h)?;
        let base = base_log_prob(tape, f.code, mu, sigma)?;
        tape.add(base, f.log_det)
    }

    pub fn forward_tensor(&self, store: &ParamStore, z0: &Tensor, h: &Tensor) -> Result<FlowResult> {
        let mut tape = Tape::new();
        let (z0, h) = (tape.constant(z0), tape.constant(h));
        let r = self.forward(&mut tape, store, z0, h)?;
        Ok(FlowResult {
            code: tape.tensor(r.code),
            log_det: tape.item(r.log_det) as f32,
        })
    }

    pub fn inverse_tensor(&self, store: &ParamStore, zk: &Tensor, h: &Tensor) -> Result<FlowResult> {
        let mut tape = Tape::new();
        let (zk, h) = (tape.constant(zk), tape.constant(h));
        let r = self.inverse(&mut tape, store, zk, h)?;
        Ok(FlowResult {
            code: tape.tensor(r.code),
            log_det: tape.item(r.log_det) as f32,
        })
    }
}
