//! Minimal RIFF/WAV codec for PCM 16-bit mono, the dataset interchange
//! format for sound commands.

use std::path::Path;

use super::AudioError;

/// A mono audio signal with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Scale amplitudes by a constant, clamping to [-1, 1].
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| (s * c).clamp(-1.0, 1.0)).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn rd_u32(b: &[u8], at: usize) -> Option<u32> {
    b.get(at..at + 4).map(|c| u32::from_le_bytes(c.try_into().unwrap()))
}

fn rd_u16(b: &[u8], at: usize) -> Option<u16> {
    b.get(at..at + 2).map(|c| u16::from_le_bytes(c.try_into().unwrap()))
}

/// Parse a PCM 16-bit mono little-endian WAV file. Samples are scaled to
/// [-1, 1] by dividing by 32768.
pub fn load_wav(path: &Path) -> Result<WaveSignal, AudioError> {
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io { path: path.to_path_buf(), source })?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<WaveSignal, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing RIFF/WAVE magic".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = rd_u32(bytes, pos + 4).ok_or_else(|| AudioError::MalformedHeader("truncated chunk".into()))? as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(AudioError::MalformedHeader(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::MalformedHeader("fmt chunk too short".into()));
                }
                let format = rd_u16(bytes, body_start).unwrap();
                let channels = rd_u16(bytes, body_start + 2).unwrap();
                let rate = rd_u32(bytes, body_start + 4).unwrap();
                let bits = rd_u16(bytes, body_start + 14).unwrap();
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| AudioError::MalformedHeader("no fmt chunk".into()))?;
    if format != 1 {
        return Err(AudioError::UnsupportedEncoding(format!("format tag {format}, want PCM (1)")));
    }
    if channels != 1 {
        return Err(AudioError::Stereo(channels));
    }
    if bits != 16 {
        return Err(AudioError::UnsupportedEncoding(format!("{bits}-bit samples, want 16")));
    }
    if rate == 0 {
        return Err(AudioError::MalformedHeader("zero sample rate".into()));
    }
    let data = data.ok_or_else(|| AudioError::MalformedHeader("no data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(AudioError::MalformedHeader("odd data chunk length".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(WaveSignal { samples, sample_rate: rate })
}

pub fn encode_wav(signal: &WaveSignal) -> Vec<u8> {
    let n = signal.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &signal.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Write a signal as PCM 16-bit mono WAV, quantizing by round(x * 32768).
pub fn save_wav(path: &Path, signal: &WaveSignal) -> Result<(), AudioError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| AudioError::Io { path: path.to_path_buf(), source })?;
    }
    std::fs::write(path, encode_wav(signal)).map_err(|source| AudioError::Io { path: path.to_path_buf(), source })
}

/// Snap samples onto the 16-bit PCM grid so in-memory signals match their
/// WAV round-trip bit for bit.
pub fn quantize_to_pcm16(samples: &mut [f64]) {
    for s in samples.iter_mut() {
        *s = (*s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0;
    }
}
