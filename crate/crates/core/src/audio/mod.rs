//! Sound observations: WAV ingest, synthesized tone commands, and
//! fixed-shape MFCC matrices.

mod mfcc;
mod synth;
mod wav;

pub use mfcc::{compute_mfcc, MfccConfig, MfccMatrix};
pub use synth::{synth_command, SynthConfig};
pub use wav::{load_wav, save_wav, WaveSignal};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("stereo input not supported ({0} channels)")]
    Stereo(u16),
    #[error("signal shorter than one frame ({len} samples < frame {frame})")]
    ShortSignal { len: usize, frame: usize },
    #[error("empty signal")]
    EmptySignal,
    #[error("sample rate mismatch: signal {signal} Hz, config {config} Hz")]
    SampleRateMismatch { signal: u32, config: u32 },
    #[error("intent {intent} out of range (have {count} fundamentals)")]
    IntentOutOfRange { intent: usize, count: usize },
}
