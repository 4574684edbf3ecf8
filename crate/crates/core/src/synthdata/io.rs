use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, SceneSequence, SkeletonModel, SynthError};

pub const DATASET_FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    skeleton: SkeletonModel,
    units: String,
    frame_rate: f64,
    sequences: usize,
}

#[derive(Serialize, Deserialize)]
struct Line<T> {
    crc32: u32,
    sequence: T,
}

fn malformed(line: usize, detail: impl ToString) -> SynthError {
    SynthError::Malformed { line, detail: detail.to_string() }
}

/// Writes a header line followed by one line per sequence. Each sequence
/// line carries the CRC-32 of the sequence's own JSON text.
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), SynthError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        skeleton: dataset.skeleton.clone(),
        units: "mm".into(),
        frame_rate: dataset.frame_rate,
        sequences: dataset.sequences.len(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for seq in &dataset.sequences {
        let body = serde_json::to_string(seq).map_err(std::io::Error::from)?;
        let crc32 = crc32fast::hash(body.as_bytes());
        writeln!(out, "{{\"crc32\":{crc32},\"sequence\":{body}}}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, SynthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| malformed(1, "empty file"))??;
    let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| malformed(1, e))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| malformed(1, "missing format_version"))?;
    if version != DATASET_FORMAT_VERSION {
        return Err(SynthError::Version { found: version, expected: DATASET_FORMAT_VERSION });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| malformed(1, e))?;
    if header.units != "mm" {
        return Err(malformed(1, format!("unsupported units {:?}", header.units)));
    }
    header.skeleton.validate().map_err(|e| malformed(1, e))?;

    let mut sequences = Vec::with_capacity(header.sequences);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: Line<SceneSequence> = serde_json::from_str(&line).map_err(|e| malformed(line_no, e))?;
        let body = serde_json::to_string(&rec.sequence).map_err(|e| malformed(line_no, e))?;
        if crc32fast::hash(body.as_bytes()) != rec.crc32 {
            return Err(SynthError::Checksum { line: line_no });
        }
        rec.sequence.validate().map_err(|e| malformed(line_no, e))?;
        if rec.sequence.num_joints() != header.skeleton.num_joints() {
            return Err(malformed(line_no, "joint count differs from the skeleton"));
        }
        sequences.push(rec.sequence);
    }
    if sequences.len() != header.sequences {
        return Err(malformed(
            sequences.len() + 2,
            format!("expected {} sequences, found {}", header.sequences, sequences.len()),
        ));
    }
    Ok(Dataset { skeleton: header.skeleton, frame_rate: header.frame_rate, sequences })
}
