//! Model checkpoint files: versioned header, model tag, then named parameter
//! blocks as f64 little-endian arrays, with a trailing CRC32. The evaluator
//! and the student decoder share this format.

use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CKPT_MAGIC: &[u8; 4] = b"MOBK";
pub const CKPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("format version mismatch: found {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("model tag mismatch: found {found}, expected {expected}")]
    TagMismatch { found: String, expected: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn save_checkpoint(
    path: &Path,
    model_tag: &str,
    blocks: &[(&str, &[f64])],
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model_tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(model_tag.as_bytes());
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, data) in blocks {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    expected_tag: &str,
) -> Result<Vec<(String, Vec<f64>)>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc_bytes.try_into().unwrap()) {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > body.len() {
            return Err(CheckpointError::Malformed("unexpected end of file".into()));
        }
        let out = &body[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CKPT_FORMAT_VERSION {
        return Err(CheckpointError::FormatVersionMismatch {
            found: version,
            expected: CKPT_FORMAT_VERSION,
        });
    }
    let tag_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let tag = String::from_utf8(take(&mut pos, tag_len)?.to_vec())
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if tag != expected_tag {
        return Err(CheckpointError::TagMismatch { found: tag, expected: expected_tag.into() });
    }
    let n_blocks = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let data_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, data_len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push((name, data));
    }
    Ok(blocks)
}
