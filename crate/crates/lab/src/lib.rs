//! IO, configuration, and experiment orchestration around
//! `poisonlab-core`: the portable tensor file format, dataset loaders,
//! partition/checkpoint persistence, the experiment matrix runner, and
//! results summarization. The `poisonlab` binary is a thin CLI over this.

pub mod bdtf;
pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod csvio;
pub mod error;
pub mod manifest;
pub mod runner;
pub mod tensor_dir;

pub use error::{LabError, LabResult};
