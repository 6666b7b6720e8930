//! "VCK1" checkpoints.
//!
//! Layout: magic, u16 format version, u32 length + JSON metadata (config,
//! speakers, step, normalizer, random-stream positions and the parameter
//! table), then every parameter tensor as little-endian f32, then the Adam
//! moments `m` and `v` of each parameter that has optimizer state, and
//! finally the 64-bit FNV-1a hash of all preceding bytes.

use std::fs;
use std::path::Path;

use mdvc_core::corpus::Normalizer;
use mdvc_core::netblocks::{Architecture, ModelBundle};
use mdvc_core::optim::AdamState;
use mdvc_core::params::{Group, Optimizer};
use mdvc_core::train::{Checkpoint, RngState, SpeakerInfo, TrainConfig, Variant};
use mdvc_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"VCK1";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    group: Group,
    trainable: bool,
    shape: Vec<usize>,
    /// Adam step count, absent when the optimizer never touched it.
    adam_t: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamEntry {
    seed: [u8; 32],
    stream: u64,
    /// A u128, kept as text because JSON numbers are not that wide.
    word_pos: String,
}

impl StreamEntry {
    fn of(s: &RngState) -> Self {
        Self {
            seed: s.seed,
            stream: s.stream,
            word_pos: s.word_pos.to_string(),
        }
    }

    fn state(&self) -> Result<RngState> {
        Ok(RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self
                .word_pos
                .parse()
                .map_err(|_| CliError::Format(format!("bad stream position {:?}", self.word_pos)))?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    variant: Variant,
    config: TrainConfig,
    architecture: Architecture,
    speakers: Vec<SpeakerInfo>,
    step: u64,
    normalizer: Normalizer,
    data_rng: StreamEntry,
    noise_rng: StreamEntry,
    params: Vec<ParamEntry>,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ckpt.bundle.params;
    let meta = Metadata {
        variant: ckpt.config.variant,
        config: ckpt.config.clone(),
        architecture: ckpt.bundle.model.arch.clone(),
        speakers: ckpt.speakers.clone(),
        step: ckpt.step,
        normalizer: ckpt.normalizer.clone(),
        data_rng: StreamEntry::of(&ckpt.data_rng),
        noise_rng: StreamEntry::of(&ckpt.noise_rng),
        params: params
            .iter()
            .map(|(id, p)| ParamEntry {
                name: p.name.clone(),
                group: p.group,
                trainable: p.trainable,
                shape: p.value.shape().to_vec(),
                adam_t: ckpt.optimizer.state(id).map(|s| s.t),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params.iter() {
        put_tensor(&mut out, &p.value);
    }
    for (id, _) in params.iter() {
        if let Some(s) = ckpt.optimizer.state(id) {
            put_tensor(&mut out, &s.m);
            put_tensor(&mut out, &s.v);
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

/// Parses a checkpoint. With `expect`, a checkpoint of another variant is
/// rejected with a variant-mismatch error.
pub fn decode(bytes: &[u8], expect: Option<Variant>) -> Result<Checkpoint> {
    if bytes.len() < 4 + 2 + 4 + 8 {
        return Err(CliError::Format("checkpoint is truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::Format(format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(CliError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, at: 4 };
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(CliError::Format(format!("checkpoint version {version}, this build reads {VERSION}")));
    }
    let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let meta: Metadata = serde_json::from_slice(r.take(len)?)?;
    if let Some(v) = expect {
        if v != meta.variant {
            return Err(mdvc_core::Error::VariantMismatch {
                expected: v.to_string(),
                found: meta.variant.to_string(),
            }
            .into());
        }
    }
    if meta.config.variant != meta.variant {
        return Err(CliError::Format("variant tag disagrees with the stored config".into()));
    }

    // rebuild the structure, then overwrite every value
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bundle: ModelBundle<f32> = ModelBundle::new(meta.architecture.clone(), &mut rng.clone(), &mut rng)?;
    if bundle.params.len() != meta.params.len() {
        return Err(CliError::Format(format!(
            "checkpoint lists {} parameters, the architecture has {}",
            meta.params.len(),
            bundle.params.len()
        )));
    }
    let mut optimizer = Optimizer::new(meta.config.adam, bundle.params.len());
    for ((_, p), e) in bundle.params.iter_mut().zip(&meta.params) {
        if p.name != e.name || p.group != e.group || p.trainable != e.trainable || p.value.shape() != e.shape.as_slice() {
            return Err(CliError::Format(format!("parameter {} does not match the architecture", e.name)));
        }
        p.value = r.tensor(&e.shape)?;
    }
    let ids: Vec<_> = bundle.params.iter().map(|(id, _)| id).collect();
    for (id, e) in ids.into_iter().zip(&meta.params) {
        if let Some(t) = e.adam_t {
            let m = r.tensor(&e.shape)?;
            let v = r.tensor(&e.shape)?;
            optimizer.set_state(id, AdamState { m, v, t });
        }
    }
    if r.at != body.len() {
        return Err(CliError::Format(format!("{} unexpected trailing bytes", body.len() - r.at)));
    }
    Ok(Checkpoint {
        config: meta.config,
        speakers: meta.speakers,
        bundle,
        optimizer,
        step: meta.step,
        data_rng: meta.data_rng.state()?,
        noise_rng: meta.noise_rng.state()?,
        normalizer: meta.normalizer,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ckpt)?).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path, expect: Option<Variant>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, expect)
}
