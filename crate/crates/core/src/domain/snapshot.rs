//! Pool snapshot files.
//!
//! Line 1 is a header `{"dimension", "encoder_id", "capacity"?}`. Every other
//! line is one demonstration with its embeddings packed as base64 of
//! little-endian `f32`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::domain::{Annotation, Demonstration, Pool, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub dimension: usize,
    pub encoder_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    sample: Sample,
    annotation: Annotation,
    image_embedding: String,
    text_embedding: String,
}

fn pack(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn unpack(s: &str, dimension: usize) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Snapshot(format!("bad base64: {e}")))?;
    if bytes.len() != dimension * 4 {
        return Err(Error::DimensionMismatch {
            expected: dimension,
            got: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_pool<W: Write>(mut w: W, pool: &Pool) -> Result<()> {
    let header = SnapshotHeader {
        dimension: pool.dimension(),
        encoder_id: pool.encoder_id().to_owned(),
        capacity: pool.capacity(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for d in pool.entries() {
        let line = Line {
            sample: d.sample.clone(),
            annotation: d.annotation.clone(),
            image_embedding: pack(&d.image_embedding),
            text_embedding: pack(&d.text_embedding),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a snapshot. When `expected_encoder` is given, a snapshot built with
/// another encoder is rejected; its embeddings live in a different space.
pub fn read_pool<R: Read>(r: R, expected_encoder: Option<&str>) -> Result<Pool> {
    let mut lines = BufReader::new(r).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Snapshot("missing header line".into()))??;
    let header: SnapshotHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Snapshot(format!("bad header: {e}")))?;
    if let Some(expected) = expected_encoder {
        if expected != header.encoder_id {
            return Err(Error::EncoderMismatch {
                expected: header.encoder_id,
                found: expected.to_owned(),
            });
        }
    }
    if header.dimension == 0 {
        return Err(Error::Snapshot("dimension must be positive".into()));
    }
    let mut pool = Pool::new(header.dimension, header.encoder_id).with_capacity(header.capacity);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| Error::Snapshot(format!("entry {}: {e}", i + 1)))?;
        let demo = Demonstration::new(
            l.sample,
            l.annotation,
            unpack(&l.image_embedding, header.dimension)?,
            unpack(&l.text_embedding, header.dimension)?,
        )?;
        pool.push(demo)?;
    }
    Ok(pool)
}

pub fn save_pool(path: impl AsRef<Path>, pool: &Pool) -> Result<()> {
    write_pool(BufWriter::new(File::create(path)?), pool)
}

pub fn load_pool(path: impl AsRef<Path>, expected_encoder: Option<&str>) -> Result<Pool> {
    read_pool(File::open(path)?, expected_encoder)
}
