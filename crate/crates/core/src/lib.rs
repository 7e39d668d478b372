pub mod audio;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod fpit;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod room;
pub mod scene;
pub mod separate;
pub mod stft;
pub mod synth;
pub mod training;

pub use audio::MultichannelWaveform;
pub use error::{Error, Result};
pub use room::{MixtureScene, RirSet, RoomScenario};
pub use stft::{istft, stft, ComplexSpectrogram, Stft, StftConfig};
