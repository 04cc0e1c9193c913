//! File formats, run pipeline, and command line for the hsimamba
//! hyperspectral classifier. The numerics live in `hsimamba-core`; this
//! crate adds the HSIB container, PPM/PGM map emission, checkpointing,
//! key=value run configs, and the subcommand implementations.

pub mod checkpoint;
pub mod container;
pub mod pipeline;
pub mod pnm;
pub mod runconfig;

pub use hsimamba_core as core;
