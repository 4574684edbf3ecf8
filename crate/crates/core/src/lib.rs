//! Multi-view 3D human pose reconstruction.
//!
//! 2D joint detections from calibrated cameras are lifted to Plücker rays,
//! fused by a transformer encoder whose attention is biased by detection
//! confidence and pairwise ray distance, and decoded into 3D joint
//! sequences by per-joint queries.

pub mod eval;
pub mod geometry;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod training;
