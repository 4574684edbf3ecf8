use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ErrorAccumulator, EvalConfig, EvalError};
use crate::model::ModelConfig;

pub const REPORT_CSV_HEADER: &str = "condition,n_cams,t_in,occl_prob,mpjpe_mm,n_poses";

const FOOTNOTE: &str = "baseline rows average only joints seen by at least two of the selected cameras \
(excluded_fraction gives the share left out); model rows cover every joint. Baseline rows with nothing \
reconstructible report mpjpe_mm as NaN/null and n_poses 0.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: String,
    pub n_cams: usize,
    pub t_in: usize,
    pub occl_prob: f64,
    pub mpjpe_mm: f64,
    pub n_poses: usize,
    pub per_joint_mpjpe_mm: Vec<f64>,
    pub excluded_fraction: f64,
    /// Frames centered on the fallback point because the neck could not
    /// be triangulated.
    pub fallback_frames: usize,
}

impl EvalRow {
    pub fn from_acc(condition: String, n_cams: usize, t_in: usize, occl_prob: f64, acc: &ErrorAccumulator) -> Self {
        Self {
            condition,
            n_cams,
            t_in,
            occl_prob,
            mpjpe_mm: acc.mpjpe_mm(),
            n_poses: acc.poses,
            per_joint_mpjpe_mm: acc.per_joint_mm(),
            excluded_fraction: acc.excluded_fraction(),
            fallback_frames: acc.fallback_frames,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.condition.split(':').nth(1) == Some("baseline")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eval_seed: u64,
    pub config: EvalConfig,
    pub model: Option<ModelConfig>,
    pub footnote: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(config: EvalConfig, model: Option<ModelConfig>, rows: Vec<EvalRow>) -> Self {
        Self { eval_seed: config.seed, config, model, footnote: FOOTNOTE.into(), rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.condition, r.n_cams, r.t_in, r.occl_prob, r.mpjpe_mm, r.n_poses));
        }
        out
    }

    pub fn fallback_frames(&self) -> usize {
        self.rows.iter().map(|r| r.fallback_frames).sum()
    }
}

pub fn write_report_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<(), EvalError> {
    std::fs::write(path, report.to_csv())?;
    Ok(())
}

pub fn write_report_json(path: impl AsRef<Path>, report: &EvalReport) -> Result<(), EvalError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, report).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
