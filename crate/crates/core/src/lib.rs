//! Zero-shot multilingual singing voice conversion.
//!
//! The pipeline converts a sung (or spoken) source performance to a target
//! voice while preserving lyrics and melody:
//!
//! - [`audio`] — WAV I/O, band-limited resampling, linear/mel spectrograms.
//! - [`pitch`] — autocorrelation f0 tracking, coarse log-bin quantization,
//!   key shifting, and an external-contour loader.
//! - [`content`] — self-supervised content backbone with a speaker-invariant
//!   clustering head (vector quantization exists only during training).
//! - [`speaker`] — pluggable speaker embeddings and the trainable
//!   language-embedding table.
//! - [`model`] — the synthesis core: posterior encoder, speaker-conditioned
//!   affine-coupling flow, content/pitch/language-conditioned prior,
//!   upsampling decoder, and multi-period/multi-scale discriminators.
//! - [`data`] — dataset manifests, known/unknown evaluation splits, and
//!   inverse-frequency weighted sampling.
//! - [`train`] — GAN training loop, Adam, LR schedule, checkpoints.
//! - [`eval`] — DTW, F0 Pearson correlation, WER/CER, bootstrap confidence
//!   intervals and significance flags.

pub mod audio;
pub mod content;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pitch;
pub mod speaker;
pub mod train;

pub use audio::{LinearSpectrogram, MelSpectrogram, Waveform};
pub use content::{ContentBackbone, ContentFeatures, SpinHead};
pub use data::{ManifestRecord, SampleWeights};
pub use error::{Error, Result};
pub use eval::{DtwPath, MetricReport};
pub use pitch::{CoarsePitch, F0Contour};
pub use speaker::{LanguageTable, SpeakerEmbedding};
