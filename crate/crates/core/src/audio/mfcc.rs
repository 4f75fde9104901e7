//! Fixed-shape MFCC extraction: pre-emphasis, Hamming-windowed frames, FFT
//! power spectrum, triangular mel filterbank (0 to Nyquist), floored log,
//! orthonormal DCT-II, then pad/truncate to exactly `target_frames` rows.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioError, WaveSignal};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub mel_filter_count: usize,
    /// Coefficients kept per frame (m).
    pub coefficient_count: usize,
    /// Output rows (l); short clips repeat their final frame, long ones are
    /// truncated.
    pub target_frames: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length: 400,
            hop: 160,
            fft_size: 512,
            mel_filter_count: 40,
            coefficient_count: 13,
            target_frames: 100,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.fft_size < self.frame_length {
            return Err(AudioError::MalformedHeader(format!(
                "fft_size {} < frame_length {}",
                self.fft_size, self.frame_length
            )));
        }
        if self.coefficient_count > self.mel_filter_count || self.target_frames == 0 || self.hop == 0 {
            return Err(AudioError::MalformedHeader("invalid MFCC configuration".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.target_frames, self.coefficient_count)
    }
}

/// The sound observation: an l x m coefficient matrix. The all-zero matrix
/// is reserved for the empty intent.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl MfccMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols);
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { rows, cols, values }
    }

    /// The reserved empty-intent observation.
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank over FFT bins, filters equally spaced on the mel
/// scale from 0 Hz to Nyquist. Returns `mel_filter_count` rows of
/// `fft_size/2 + 1` weights.
pub fn mel_filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let bins = cfg.fft_size / 2 + 1;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..cfg.mel_filter_count + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.mel_filter_count + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut bank = Vec::with_capacity(cfg.mel_filter_count);
    for f in 0..cfg.mel_filter_count {
        let (lo, center, hi) = (points[f], points[f + 1], points[f + 2]);
        let mut weights = vec![0.0; bins];
        for (b, w) in weights.iter_mut().enumerate() {
            let freq = b as f64 * bin_hz;
            if freq > lo && freq < center {
                *w = (freq - lo) / (center - lo);
            } else if freq == center {
                *w = 1.0;
            } else if freq > center && freq < hi {
                *w = (hi - freq) / (hi - center);
            }
        }
        bank.push(weights);
    }
    bank
}

/// Orthonormal DCT-II matrix rows for the first `m` coefficients of an
/// `n`-point transform.
pub fn dct_rows(m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(m);
    for k in 0..m {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        rows.push(
            (0..n)
                .map(|j| scale * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2 * n) as f64).cos())
                .collect(),
        );
    }
    rows
}

fn fft_for(size: usize) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    Arc::clone(guard.entry(size).or_insert_with(|| FftPlanner::new().plan_fft_forward(size)))
}

pub const PRE_EMPHASIS: f64 = 0.97;

/// Power spectrum (|X|^2 over bins 0..=fft/2) of one pre-emphasized,
/// Hamming-windowed frame.
fn frame_power(frame: &[f64], prev: f64, cfg: &MfccConfig) -> Vec<f64> {
    let n = cfg.fft_size;
    let len = frame.len();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..len {
        let before = if i == 0 { prev } else { frame[i - 1] };
        let emphasized = frame[i] - PRE_EMPHASIS * before;
        let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos();
        buf[i] = Complex64::new(emphasized * w, 0.0);
    }
    fft_for(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Extract the l x m MFCC matrix of a signal.
pub fn compute_mfcc(signal: &WaveSignal, cfg: &MfccConfig) -> Result<MfccMatrix, AudioError> {
    cfg.validate()?;
    if signal.samples.is_empty() {
        return Err(AudioError::EmptySignal);
    }
    if signal.sample_rate != cfg.sample_rate {
        return Err(AudioError::SampleRateMismatch { signal: signal.sample_rate, config: cfg.sample_rate });
    }
    if signal.samples.len() < cfg.frame_length {
        return Err(AudioError::ShortSignal { len: signal.samples.len(), frame: cfg.frame_length });
    }

    let bank = mel_filterbank(cfg);
    let dct = dct_rows(cfg.coefficient_count, cfg.mel_filter_count);

    let frame_count = (signal.samples.len() - cfg.frame_length) / cfg.hop + 1;
    let kept = frame_count.min(cfg.target_frames);
    let m = cfg.coefficient_count;
    let mut values = Vec::with_capacity(cfg.target_frames * m);
    for f in 0..kept {
        let start = f * cfg.hop;
        let prev = if start == 0 { 0.0 } else { signal.samples[start - 1] };
        let power = frame_power(&signal.samples[start..start + cfg.frame_length], prev, cfg);
        let log_mel: Vec<f64> = bank
            .iter()
            .map(|weights| {
                let e: f64 = weights.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        for row in &dct {
            values.push(row.iter().zip(&log_mel).map(|(d, x)| d * x).sum());
        }
    }
    // Repeat the final frame to reach the target length.
    while values.len() < cfg.target_frames * m {
        let last = values.len() - m;
        values.extend_from_within(last..last + m);
    }
    Ok(MfccMatrix::new(cfg.target_frames, m, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> MfccConfig {
        MfccConfig {
            sample_rate: 8000,
            frame_length: 128,
            hop: 64,
            fft_size: 128,
            mel_filter_count: 20,
            coefficient_count: 6,
            target_frames: 12,
            log_floor: 1e-10,
        }
    }

    #[test]
    fn zero_signal_is_dct_of_constant_log_floor() {
        let cfg = small_cfg();
        let sig = WaveSignal::new(vec![0.0; 2000], 8000);
        let out = compute_mfcc(&sig, &cfg).unwrap();
        let expected_c0 = (cfg.mel_filter_count as f64).sqrt() * cfg.log_floor.ln();
        for r in 0..out.rows() {
            assert!((out.at(r, 0) - expected_c0).abs() < 1e-9, "c0 row {r}: {}", out.at(r, 0));
            for c in 1..out.cols() {
                assert!(out.at(r, c).abs() < 1e-9, "c{c} row {r} nonzero");
            }
        }
    }

    #[test]
    fn output_shape_fixed_regardless_of_duration() {
        let cfg = small_cfg();
        for len in [128usize, 500, 2000, 20000] {
            let sig = WaveSignal::new(vec![0.1; len], 8000);
            let out = compute_mfcc(&sig, &cfg).unwrap();
            assert_eq!(out.shape(), (12, 6));
        }
    }

    #[test]
    fn short_signal_rejected() {
        let cfg = small_cfg();
        let sig = WaveSignal::new(vec![0.0; 100], 8000);
        assert!(matches!(compute_mfcc(&sig, &cfg), Err(AudioError::ShortSignal { .. })));
        let empty = WaveSignal::new(vec![], 8000);
        assert!(matches!(compute_mfcc(&empty, &cfg), Err(AudioError::EmptySignal)));
        let wrong_rate = WaveSignal::new(vec![0.0; 500], 16000);
        assert!(matches!(compute_mfcc(&wrong_rate, &cfg), Err(AudioError::SampleRateMismatch { .. })));
    }

    #[test]
    fn sine_at_filter_center_peaks_that_filter() {
        let cfg = small_cfg();
        let bank = mel_filterbank(&cfg);
        // pick filter j = 8 and find its center (peak weight) frequency
        let j = 8;
        let peak_bin = bank[j]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(b, _)| b)
            .unwrap();
        let freq = peak_bin as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
        let samples: Vec<f64> =
            (0..4000).map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin()).collect();
        let sig = WaveSignal::new(samples, 8000);
        // evaluate filterbank energies directly on one interior frame
        let power = frame_power(&sig.samples[640..640 + 128], sig.samples[639], &cfg);
        let energies: Vec<f64> =
            bank.iter().map(|w| w.iter().zip(&power).map(|(a, b)| a * b).sum()).collect();
        let argmax = energies.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(argmax, j, "energies {energies:?}");
    }

    #[test]
    fn positive_scaling_only_shifts_c0() {
        let cfg = small_cfg();
        // broadband fixture keeps every mel channel above the log floor
        let mut state = 0xdeadbeefu64;
        let samples: Vec<f64> = (0..3000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / 2f64.powi(31) - 0.5) * 0.4
            })
            .collect();
        let sig = WaveSignal::new(samples, 8000);
        let base = compute_mfcc(&sig, &cfg).unwrap();
        let scaled = compute_mfcc(&sig.scaled(2.0), &cfg).unwrap();
        // c0 shift = sqrt(1/N) * N * ln(c^2) = sqrt(N) * 2 ln c
        let shift = (cfg.mel_filter_count as f64).sqrt() * 2.0 * 2.0f64.ln();
        for r in 0..base.rows() {
            assert!(
                (scaled.at(r, 0) - base.at(r, 0) - shift).abs() < 1e-9,
                "row {r} c0 shift {} want {shift}",
                scaled.at(r, 0) - base.at(r, 0)
            );
            for c in 1..base.cols() {
                assert!((scaled.at(r, c) - base.at(r, c)).abs() < 1e-9, "row {r} c{c} moved");
            }
        }
    }
}
