//! Seeded single-tone command synthesis. Each intent maps to a fixed
//! equal-temperament fundamental; the seed jitters the harmonic amplitude
//! profile, duration, volume, and onset envelope, standing in for different
//! instruments and speakers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::wav::quantize_to_pcm16;
use super::{AudioError, WaveSignal};
use crate::seeding;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// One fundamental (Hz) per intent, lowest intent first.
    pub fundamentals: Vec<f64>,
    pub harmonic_count: usize,
    /// Mixed into the harmonic-profile stream; a domain shift re-seeds it to
    /// model a new speaker/instrument.
    pub timbre_seed: u64,
}

fn equal_temperament(midi: i32) -> f64 {
    440.0 * 2f64.powf((midi - 69) as f64 / 12.0)
}

impl Default for SynthConfig {
    fn default() -> Self {
        // C4 D4 E4 F4 G4 A4 B4 C5
        let notes = [60, 62, 64, 65, 67, 69, 71, 72];
        Self {
            sample_rate: 16_000,
            fundamentals: notes.iter().map(|&m| equal_temperament(m)).collect(),
            harmonic_count: 5,
            timbre_seed: 0,
        }
    }
}

/// Generate the tone command for an intent. Deterministic given
/// `(intent, seed)` and the config.
pub fn synth_command(cfg: &SynthConfig, intent: usize, seed: u64) -> Result<WaveSignal, AudioError> {
    let count = cfg.fundamentals.len();
    if intent >= count {
        return Err(AudioError::IntentOutOfRange { intent, count });
    }
    let f0 = cfg.fundamentals[intent];
    let sr = cfg.sample_rate as f64;

    let mut jit = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "synth-jitter", intent as u64));
    let mut timbre = ChaCha8Rng::seed_from_u64(seeding::derive(
        seed ^ cfg.timbre_seed.rotate_left(17),
        "synth-timbre",
        intent as u64,
    ));

    let duration = jit.random_range(0.7..1.0);
    let volume = jit.random_range(0.4..0.9);
    let attack = jit.random_range(0.01..0.05);
    let decay_rate = jit.random_range(0.5..2.0);

    // Harmonic amplitude profile: geometric falloff with per-harmonic jitter.
    let falloff: f64 = timbre.random_range(0.3..0.7);
    let amps: Vec<f64> = (0..cfg.harmonic_count)
        .map(|h| falloff.powi(h as i32) * timbre.random_range(0.5..1.0))
        .collect();

    let n = (duration * sr) as usize;
    let nyquist = sr / 2.0;
    // Rotating phasors instead of per-sample sin calls.
    let mut osc: Vec<(f64, f64, f64, f64)> = Vec::new(); // (re, im, rot_re, rot_im)
    for (h, &a) in amps.iter().enumerate() {
        let freq = f0 * (h + 1) as f64;
        if freq >= nyquist {
            break;
        }
        let w = 2.0 * std::f64::consts::PI * freq / sr;
        osc.push((a, 0.0, w.cos(), w.sin()));
    }

    let attack_samples = (attack * sr).max(1.0);
    let mut samples = Vec::with_capacity(n);
    let mut peak = 0.0f64;
    for i in 0..n {
        let t = i as f64 / sr;
        let mut s = 0.0;
        for o in osc.iter_mut() {
            s += o.1; // imaginary part: a*sin(w*i)
            let re = o.0 * o.2 - o.1 * o.3;
            let im = o.0 * o.3 + o.1 * o.2;
            o.0 = re;
            o.1 = im;
        }
        let env = (i as f64 / attack_samples).min(1.0) * (-decay_rate * t).exp();
        let v = s * env;
        peak = peak.max(v.abs());
        samples.push(v);
    }
    // Normalize so the peak sits at the jittered volume.
    if peak > 0.0 {
        let scale = volume / peak;
        for s in &mut samples {
            *s *= scale;
        }
    }
    quantize_to_pcm16(&mut samples);
    Ok(WaveSignal::new(samples, cfg.sample_rate))
}
