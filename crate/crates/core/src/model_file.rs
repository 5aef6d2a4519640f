//! Binary model file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CQOE"
//! 4       2     format version (u16 LE)
//! 6       4     k           (u32 LE)
//! 10      4     L           (u32 LE)
//! 14      4     n           (u32 LE)
//! 18      4     in_channels (u32 LE)
//! 22      1     variant (0 = proposed, 1 = original_tcn)
//! 23      8     dropout_p   (f64 LE)
//! 31      8*P   parameters (f64 LE), in `Model::param_slices` order
//! 31+8P   4     CRC-32 of all preceding bytes (u32 LE)
//! ```

use std::path::Path;

use crate::architecture::{build_model, count_params, Model, ModelConfig, Variant};
use crate::error::{QoeError, Result};
use crate::rng::SeededRng;
use rand::SeedableRng;

pub const MAGIC: &[u8; 4] = b"CQOE";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 31;
const CHECKSUM_LEN: usize = 4;

/// Size in bytes of a file holding `params` parameters.
pub fn file_size_for(params: usize) -> usize {
    HEADER_LEN + 8 * params + CHECKSUM_LEN
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| QoeError::Parameter(format!("{what} = {v} does not fit in u32")))
}

/// Empty model with the layout `config` describes; weights are filled in
/// by the caller.
fn skeleton(config: &ModelConfig) -> Result<Model> {
    build_model(config, &mut SeededRng::seed_from_u64(0), true)
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let c = model.config();
    let expected = skeleton(c)?;
    let layout: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let want: Vec<usize> = expected.param_slices().iter().map(|s| s.len()).collect();
    if layout != want {
        return Err(QoeError::Parameter(
            "model layout does not match its config; hand-assembled stacks cannot be saved".into(),
        ));
    }
    let mut buf = Vec::with_capacity(file_size_for(count_params(model)));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (v, name) in [
        (c.kernel_size, "k"),
        (c.blocks, "L"),
        (c.filters, "n"),
        (c.in_channels, "in_channels"),
    ] {
        buf.extend_from_slice(&to_u32(v, name)?.to_le_bytes());
    }
    buf.push(match c.variant {
        Variant::Proposed => 0,
        Variant::OriginalTcn => 1,
    });
    buf.extend_from_slice(&c.dropout_p.to_le_bytes());
    for v in model.param_slices().into_iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn read_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(QoeError::Load(format!("truncated file ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(QoeError::Load("bad magic; not a model file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(QoeError::Load("checksum mismatch".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(QoeError::Load(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let variant = match bytes[22] {
        0 => Variant::Proposed,
        1 => Variant::OriginalTcn,
        other => return Err(QoeError::Load(format!("unknown variant tag {other}"))),
    };
    let config = ModelConfig {
        kernel_size: read_u32(bytes, 6),
        blocks: read_u32(bytes, 10),
        filters: read_u32(bytes, 14),
        in_channels: read_u32(bytes, 18),
        variant,
        dropout_p: f64::from_le_bytes(bytes[23..31].try_into().expect("8 bytes")),
    };
    let mut model = skeleton(&config).map_err(|e| QoeError::Load(format!("config block: {e}")))?;
    let params = &body[HEADER_LEN..];
    let expected = count_params(&model);
    if params.len() != 8 * expected {
        return Err(QoeError::Load(format!(
            "expected {expected} parameters, found {} bytes",
            params.len()
        )));
    }
    let mut values = params
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for slot in model.param_slices_mut().into_iter().flatten() {
        *slot = values.next().expect("length checked");
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}
