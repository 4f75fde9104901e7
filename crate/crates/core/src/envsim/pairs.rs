//! Offline visual-audio pair collection with rejection-balanced classes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::env::{heard_intent, DomainParams, EnvConfig, EnvState, Heading, ObjectPlacement};
use super::render::{render, ObsImage};
use super::EnvError;
use crate::audio::{compute_mfcc, synth_command, MfccConfig, MfccMatrix, SynthConfig, WaveSignal};
use crate::seeding;

/// An (image, sound, intent) triple; the unit of supervision. `wave` carries
/// the raw audio for dataset export and is absent exactly for the empty
/// intent, whose sound is the all-zero matrix.
#[derive(Debug, Clone)]
pub struct VisualAudioPair {
    pub image: ObsImage,
    pub sound: MfccMatrix,
    pub wave: Option<WaveSignal>,
    pub intent: usize,
}

impl VisualAudioPair {
    pub fn new(image: ObsImage, sound: MfccMatrix, wave: Option<WaveSignal>, intent: usize, empty_intent: usize) -> Self {
        assert_eq!(intent == empty_intent, sound.is_zero(), "intent/sound consistency violated");
        assert_eq!(intent == empty_intent, wave.is_none());
        Self { image, sound, wave, intent }
    }
}

fn random_pose(cfg: &EnvConfig, rng: &mut ChaCha8Rng) -> EnvState {
    let g = cfg.grid_size as i32;
    let mut cells: Vec<(i32, i32)> = (0..g).flat_map(|y| (0..g).map(move |x| (x, y))).collect();
    cells.shuffle(rng);
    let agent = cells[0];
    let objects = (0..cfg.intent_count).map(|intent| ObjectPlacement { cell: cells[1 + intent], intent }).collect();
    let heading = *[Heading::North, Heading::East, Heading::South, Heading::West].as_slice().choose(rng).unwrap();
    EnvState { agent, heading, objects, t: 0, goal: 0, hold: 0, done: false, succeeded: false, prev_action: None }
}

/// Collect `count` pairs from seeded random poses, rejection-sampling until
/// every class (including the empty intent) holds `count / (M+1)` pairs,
/// +1 for the lowest-index classes when the division is uneven.
pub fn collect_pairs(
    cfg: &EnvConfig,
    domain: &DomainParams,
    synth: &SynthConfig,
    mfcc: &MfccConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<VisualAudioPair>, EnvError> {
    cfg.validate()?;
    if count == 0 {
        return Err(EnvError::InvalidConfig("pair count must be > 0".into()));
    }
    let classes = cfg.intent_count + 1;
    let base = count / classes;
    let rem = count % classes;
    let mut need: Vec<usize> = (0..classes).map(|c| base + usize::from(c < rem)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "collect-pairs", 0));
    let mut scfg = synth.clone();
    scfg.timbre_seed = domain.timbre_seed;
    let (l, m) = mfcc.shape();

    let budget: u64 = (count as u64).saturating_mul(5000).max(200_000);
    let mut pairs = Vec::with_capacity(count);
    let mut draws: u64 = 0;
    while pairs.len() < count {
        if draws >= budget {
            let missing: Vec<usize> = need.iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, _)| c).collect();
            return Err(EnvError::RejectionBudget { budget, missing });
        }
        draws += 1;
        let state = random_pose(cfg, &mut rng);
        let sound_seed = rng.random::<u64>();
        let y = heard_intent(&state, cfg);
        if need[y] == 0 {
            continue;
        }
        need[y] -= 1;
        let image = render(&state, cfg, domain);
        let (sound, wave) = if y == cfg.empty_intent() {
            (MfccMatrix::zero(l, m), None)
        } else {
            let wave = synth_command(&scfg, y, sound_seed)?;
            (compute_mfcc(&wave, mfcc)?, Some(wave))
        };
        pairs.push(VisualAudioPair::new(image, sound, wave, y, cfg.empty_intent()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mfcc() -> MfccConfig {
        MfccConfig { target_frames: 20, ..MfccConfig::default() }
    }

    #[test]
    fn class_balance_505_over_5_classes() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let pairs = collect_pairs(&cfg, &domain, &SynthConfig::default(), &small_mfcc(), 505, 42).unwrap();
        assert_eq!(pairs.len(), 505);
        let mut counts = vec![0usize; 5];
        for p in &pairs {
            counts[p.intent] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            assert!((n as i64 - 101).abs() <= 1, "class {c} has {n} pairs");
        }
    }

    #[test]
    fn nonempty_pairs_have_nonzero_sound() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let pairs = collect_pairs(&cfg, &domain, &SynthConfig::default(), &small_mfcc(), 50, 3).unwrap();
        for p in &pairs {
            assert_eq!(p.intent == cfg.empty_intent(), p.sound.is_zero());
        }
    }

    #[test]
    fn images_near_object_show_its_color_dominant() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let pairs = collect_pairs(&cfg, &domain, &SynthConfig::default(), &small_mfcc(), 250, 7).unwrap();
        let mut ok = 0usize;
        let mut total = 0usize;
        for p in &pairs {
            if p.intent == cfg.empty_intent() {
                continue;
            }
            total += 1;
            // histogram of non-background colors
            let mut counts = vec![0usize; cfg.intent_count];
            for px in p.image.data.chunks(3) {
                for (i, c) in domain.object_colors.iter().enumerate() {
                    if px == c.as_slice() {
                        counts[i] += 1;
                    }
                }
            }
            let argmax = counts.iter().enumerate().max_by_key(|(_, &n)| n).unwrap().0;
            if argmax == p.intent && counts[argmax] > 0 {
                ok += 1;
            }
        }
        assert!(total > 0);
        let frac = ok as f64 / total as f64;
        assert!(frac >= 0.95, "dominant-color fraction {frac}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let a = collect_pairs(&cfg, &domain, &SynthConfig::default(), &small_mfcc(), 30, 9).unwrap();
        let b = collect_pairs(&cfg, &domain, &SynthConfig::default(), &small_mfcc(), 30, 9).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.sound, y.sound);
            assert_eq!(x.intent, y.intent);
        }
    }
}
