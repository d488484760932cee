//! Training, certification, accounting and analysis front end.

pub mod bench;
pub mod certify;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod phi;
pub mod task;
pub mod train;
