//! Binaural audio-visual source separation guided by object location.
//!
//! The crate covers the DSP front end ([`signal`], [`spatial`]), coordinate encodings
//! ([`posenc`]), the attention fusion stack ([`fusion`]), the U-Net separator and its
//! training loop ([`separator`]), objectives and bss_eval metrics ([`losses_metrics`]) and
//! synthetic scene generation ([`datagen`]).

pub mod config;
pub mod datagen;
pub mod error;
pub mod fusion;
pub mod losses_metrics;
pub mod posenc;
pub mod separator;
pub mod signal;
pub mod spatial;
pub mod wav;

pub use config::{MaskTarget, ModelConfig, ModelFlags, Preset};
pub use error::{BinsepError, Result};
