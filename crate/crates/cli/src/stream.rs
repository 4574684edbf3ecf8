//! Detection streams for `infer` and the pose output format.
//!
//! A stream is JSON Lines: a header `{"cameras": [...], "neck": 8}` with
//! cameras as stored in datasets (translation in mm), then one
//! `{"frame": i, "detections": [[[u, v, conf, visible], ...], ...]}` line
//! per frame, cameras outer and joints inner.

use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rpose_core::geometry::Point3;
use rpose_core::synthdata::{CameraRecord, Detection, SceneSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub cameras: Vec<CameraRecord>,
    #[serde(default = "default_neck")]
    pub neck: usize,
}

fn default_neck() -> usize {
    rpose_core::synthdata::SkeletonModel::default().neck().expect("default skeleton has a neck")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub detections: Vec<Vec<Detection>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: usize,
    pub pose_mm: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStream {
    pub header: StreamHeader,
    pub frames: Vec<FrameRecord>,
}

impl DetectionStream {
    pub fn from_sequence(seq: &SceneSequence, neck: usize) -> Self {
        Self {
            header: StreamHeader { cameras: seq.cameras.clone(), neck },
            frames: seq.detections.iter().enumerate().map(|(frame, d)| FrameRecord { frame, detections: d.clone() }).collect(),
        }
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for f in &self.frames {
            serde_json::to_writer(&mut out, f)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().context("empty detection stream")??;
        let header: StreamHeader = serde_json::from_str(&first).context("stream header")?;
        let mut frames = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FrameRecord = serde_json::from_str(&line).with_context(|| format!("stream line {}", i + 2))?;
            if rec.frame != frames.len() {
                bail!("stream line {}: expected frame {}, found {}", i + 2, frames.len(), rec.frame);
            }
            if rec.detections.len() != header.cameras.len() {
                bail!("frame {}: {} camera views for {} cameras", rec.frame, rec.detections.len(), header.cameras.len());
            }
            frames.push(rec);
        }
        if frames.is_empty() {
            bail!("detection stream has no frames");
        }
        Ok(Self { header, frames })
    }
}

pub fn write_poses(mut out: impl Write, poses: &[Vec<Point3>]) -> Result<()> {
    for (frame, pose) in poses.iter().enumerate() {
        let rec = PoseRecord { frame, pose_mm: pose.iter().map(|p| [p.x * 1000.0, p.y * 1000.0, p.z * 1000.0]).collect() };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
