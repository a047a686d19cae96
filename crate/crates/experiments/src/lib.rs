//! Polynomial bilevel and stereo localization experiments on top of the
//! certified QCQP layer.

pub mod audit;
pub mod calibrate;
pub mod jacobian;
pub mod poly;
pub mod stereo;
pub mod trace;
