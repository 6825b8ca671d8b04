//! Binary checkpoints.
//!
//! Layout: 8-byte magic `PFVAECKP`, `u32` format version, `u64` header
//! length, the JSON [`Header`], then the payload of little-endian `f32`
//! arrays. Every array is listed in the header with its shape and byte offset
//! into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use flowdisagg::autodiff::{AdamConfig, AdamState};
use flowdisagg::data::NormStats;
use flowdisagg::model::{ModelConfig, PfvaeModel};
use flowdisagg::train::{RngState, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"PFVAECKP";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

impl ArrayEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        4 * self.numel() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// Resolved configuration of the run that wrote the checkpoint.
    pub run: RunConfig,
    pub model: ModelConfig,
    pub norm: NormStats,
    pub appliance_names: Vec<String>,
    /// Aggregate quantities the model was trained on, in input order.
    pub input_quantities: Vec<String>,
    /// Completed training epochs.
    pub epoch: usize,
    pub actnorm_initialized: Vec<bool>,
    pub rng: RngState,
    pub optimizer: OptimizerHeader,
    /// Model parameters, in store order.
    pub params: Vec<ArrayEntry>,
    /// Adam first moments then second moments, in store order.
    pub moments: Vec<ArrayEntry>,
}

impl Header {
    fn entries(&self) -> impl Iterator<Item = &ArrayEntry> {
        self.params.iter().chain(&self.moments)
    }

    /// Entries must tile the payload exactly, in order.
    pub fn audit(&self, payload_len: u64) -> Result<()> {
        let mut expected = 0u64;
        for e in self.entries() {
            ensure!(
                e.offset == expected,
                "array `{}` starts at byte {} but the previous one ends at {expected}",
                e.name,
                e.offset
            );
            expected += e.byte_len();
        }
        ensure!(
            expected == payload_len,
            "header describes {expected} payload bytes, file has {payload_len}"
        );
        Ok(())
    }
}

/// Everything needed to evaluate a model or continue its training.
pub struct Checkpoint {
    pub header: Header,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn model(&self) -> &PfvaeModel {
        &self.trainer.model
    }
}

pub fn save(
    path: &Path,
    trainer: &Trainer,
    run: &RunConfig,
    norm: &NormStats,
    appliance_names: &[String],
    input_quantities: &[String],
) -> Result<()> {
    let store = trainer.model.params();
    let mut payload: Vec<u8> = Vec::with_capacity(12 * store.scalar_count());
    let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
        let entry = ArrayEntry {
            name,
            shape,
            offset: payload.len() as u64,
        };
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entry
    };
    let params: Vec<ArrayEntry> = store
        .iter()
        .map(|(_, p)| push(p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data()))
        .collect();
    let mut moments = Vec::with_capacity(2 * params.len());
    for (tag, buffers) in [("m", &trainer.adam.m), ("v", &trainer.adam.v)] {
        for ((_, p), buf) in store.iter().zip(buffers.iter()) {
            moments.push(push(format!("{tag}.{}", p.name), p.tensor.shape().to_vec(), buf));
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        run: run.clone(),
        model: trainer.model.config().clone(),
        norm: norm.clone(),
        appliance_names: appliance_names.to_vec(),
        input_quantities: input_quantities.to_vec(),
        epoch: trainer.epoch,
        actnorm_initialized: trainer.model.cnf().actnorm_flags(),
        rng: trainer.rng_state(),
        optimizer: OptimizerHeader {
            config: trainer.adam.config,
            step_count: trainer.adam.step_count,
        },
        params,
        moments,
    };
    let json = serde_json::to_vec(&header)?;
    flowdisagg::data::atomic_write(path, |w| {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&payload)?;
        Ok(())
    })
    .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

fn read_array(payload: &[u8], e: &ArrayEntry) -> Vec<f32> {
    let start = e.offset as usize;
    payload[start..start + e.byte_len() as usize]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    ensure!(bytes.len() >= PREFIX_LEN, "file too short for a checkpoint");
    ensure!(&bytes[..8] == MAGIC, "not a checkpoint (bad magic)");
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        bail!("checkpoint format version {version}, this build reads {FORMAT_VERSION}");
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    ensure!(
        bytes.len() - PREFIX_LEN >= header_len,
        "header length {header_len} runs past the end of the file"
    );
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + header_len])
        .context("checkpoint header is not valid JSON for this format")?;
    let payload = &bytes[PREFIX_LEN + header_len..];
    header.audit(payload.len() as u64)?;
    Ok((header, payload))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let (header, payload) = read_header(&bytes)?;
    let mut model = PfvaeModel::new(header.model.clone())?;
    let n = model.params().len();
    ensure!(
        header.params.len() == n && header.moments.len() == 2 * n,
        "checkpoint lists {} parameters, the model has {n}",
        header.params.len()
    );
    for ((_, p), e) in model.params_mut().iter_mut().zip(&header.params) {
        ensure!(
            p.name == e.name && p.tensor.shape() == e.shape.as_slice(),
            "parameter `{}` {:?} does not match checkpoint entry `{}` {:?}",
            p.name,
            p.tensor.shape(),
            e.name,
            e.shape
        );
        p.tensor.data_mut().copy_from_slice(&read_array(payload, e));
    }
    model.cnf_mut().set_actnorm_flags(&header.actnorm_initialized)?;
    let (m, v) = header.moments.split_at(n);
    let adam = AdamState {
        config: header.optimizer.config,
        step_count: header.optimizer.step_count,
        m: m.iter().map(|e| read_array(payload, e)).collect(),
        v: v.iter().map(|e| read_array(payload, e)).collect(),
    };
    let trainer = Trainer::resume(model, header.run.train.clone(), adam, header.rng.clone(), header.epoch)?;
    Ok(Checkpoint { header, trainer })
}
