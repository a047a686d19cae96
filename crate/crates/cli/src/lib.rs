//! Library side of the `certigrad` command: problem files, reports and
//! experiment drivers.

pub mod experiment;
pub mod output;
pub mod problem;
pub mod solve;
