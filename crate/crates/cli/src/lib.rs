//! Library side of the `rpose` binary: config layering, self-check suites
//! and the detection-stream format.

pub mod check;
pub mod config;
pub mod stream;

/// Process exit codes.
pub mod exit {
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const MISMATCH: i32 = 4;
    pub const CHECK: i32 = 5;
}
