//! "VCF1" feature files: a 16-byte header (magic, frame count, dimension,
//! reserved zero; little-endian u32s) followed by frame-major f32 values.

use std::fs;
use std::path::Path;

use mdvc_core::corpus::FeatureSequence;
use mdvc_core::FEATURE_DIM;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"VCF1";
pub const HEADER_LEN: usize = 16;

pub fn encode(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in seq.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses a feature file; `id` and `speaker` are not stored in the format.
pub fn decode(bytes: &[u8], id: &str, speaker: usize) -> Result<FeatureSequence> {
    let bad = |why: String| CliError::Format(format!("{id}: {why}"));
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let (frames, dim, reserved) = (u32_at(bytes, 4) as usize, u32_at(bytes, 8) as usize, u32_at(bytes, 12));
    if dim != FEATURE_DIM {
        return Err(bad(format!("dimension {dim}, expected {FEATURE_DIM}")));
    }
    if reserved != 0 {
        return Err(bad(format!("reserved field is {reserved}, expected 0")));
    }
    let expected = HEADER_LEN + 4 * frames * dim;
    if bytes.len() != expected {
        return Err(bad(format!("{} bytes, header declares {expected}", bytes.len())));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureSequence::new(id, speaker, data).map_err(|e| bad(e.to_string()))
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    fs::write(path, encode(seq)).map_err(|e| CliError::io(path, e))
}

/// Reads a feature file, taking the utterance id from the file stem.
pub fn read_features(path: &Path, speaker: usize) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    decode(&bytes, id, speaker)
}
