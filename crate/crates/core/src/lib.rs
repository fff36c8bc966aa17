//! Audiovisual word recognition from raw pixels and raw waveforms.

pub mod audio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod training;
pub mod video;

pub use error::{AvsrError, Result};
pub use params::{ParamKind, ParamStore, Trainable};
