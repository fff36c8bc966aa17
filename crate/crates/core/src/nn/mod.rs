//! Network building blocks on top of the tape.

pub mod backend;
pub mod basic;
pub mod ctx;
pub mod gru;
pub mod resnet;

pub use backend::TemporalConvBackend;
pub use basic::{update_running_stats, BatchNorm, Conv, Linear, BN_EPS, BN_MOMENTUM};
pub use ctx::{Ctx, Recorded};
pub use gru::{Bgru, BgruStack, GruCell};
pub use resnet::{scaled, AudioResNet, ResidualBlock, VisualFrontend, VisualResNet, FRAMES, SAMPLE_RATE};
