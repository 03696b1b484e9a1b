//! Audio-visual target speech separation for mixtures with an unknown number
//! of speakers and incomplete visual cues.

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod separator;
pub mod train;
pub mod visual;

pub use audio::Waveform;
pub use error::{Error, Result};
pub use model::AvSepNet;
pub use separator::SeparatorConfig;
pub use visual::VisualFeatures;
