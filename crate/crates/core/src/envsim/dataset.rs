//! On-disk pair datasets: `pairs/<split>/<index>.png|.wav|.meta`.
//!
//! Images are 8-bit RGB PNG. Sounds are PCM 16-bit mono WAV; the empty
//! intent is stored as a zero-sample WAV and loads back as the all-zero
//! matrix. `.meta` is a one-line key=value record whose `intent` key is
//! present only in labeled splits.

use std::fs;
use std::path::{Path, PathBuf};

use super::pairs::VisualAudioPair;
use super::render::ObsImage;
use super::EnvError;
use crate::audio::{compute_mfcc, load_wav, save_wav, MfccConfig, MfccMatrix, WaveSignal};

/// An (image, sound) pair without an intent ID, as collected in a shifted
/// domain. Empty pairs are identifiable only by the sound being the zero
/// matrix.
#[derive(Debug, Clone)]
pub struct UnlabeledPair {
    pub image: ObsImage,
    pub sound: MfccMatrix,
    pub wave: Option<WaveSignal>,
}

impl UnlabeledPair {
    pub fn is_empty_intent(&self) -> bool {
        self.sound.is_zero()
    }
}

fn ds_err(path: &Path, message: impl Into<String>) -> EnvError {
    EnvError::DatasetIo { path: path.to_path_buf(), message: message.into() }
}

fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join("pairs").join(split)
}

fn write_png(path: &Path, image: &ObsImage) -> Result<(), EnvError> {
    let buf = image::RgbImage::from_raw(image.size as u32, image.size as u32, image.data.clone())
        .ok_or_else(|| ds_err(path, "image buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| ds_err(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<ObsImage, EnvError> {
    let img = image::open(path).map_err(|e| ds_err(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(ds_err(path, format!("non-square image {w}x{h}")));
    }
    Ok(ObsImage { size: w as usize, data: img.into_raw() })
}

/// Write pairs under `root/pairs/<split>/`. When `labeled` is false the
/// intent is omitted from the meta record.
pub fn write_pairs(root: &Path, split: &str, pairs: &[VisualAudioPair], labeled: bool) -> Result<(), EnvError> {
    let dir = split_dir(root, split);
    fs::create_dir_all(&dir).map_err(|e| ds_err(&dir, e.to_string()))?;
    let sample_rate = pairs.iter().find_map(|p| p.wave.as_ref().map(|w| w.sample_rate)).unwrap_or(16_000);
    for (i, pair) in pairs.iter().enumerate() {
        write_png(&dir.join(format!("{i:05}.png")), &pair.image)?;
        let wave = match &pair.wave {
            Some(w) => w.clone(),
            None => WaveSignal::new(Vec::new(), sample_rate),
        };
        save_wav(&dir.join(format!("{i:05}.wav")), &wave)?;
        let meta_path = dir.join(format!("{i:05}.meta"));
        let meta = if labeled { format!("intent={}\n", pair.intent) } else { String::new() };
        fs::write(&meta_path, meta).map_err(|e| ds_err(&meta_path, e.to_string()))?;
    }
    Ok(())
}

fn indices_in(dir: &Path) -> Result<Vec<usize>, EnvError> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| ds_err(dir, e.to_string()))? {
        let entry = entry.map_err(|e| ds_err(dir, e.to_string()))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("meta") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if let Ok(i) = stem.parse::<usize>() {
                    indices.push(i);
                }
            }
        }
    }
    indices.sort_unstable();
    Ok(indices)
}

fn read_meta_intent(path: &Path) -> Result<Option<usize>, EnvError> {
    let text = fs::read_to_string(path).map_err(|e| ds_err(path, e.to_string()))?;
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("intent=") {
            return v.parse::<usize>().map(Some).map_err(|e| ds_err(path, format!("bad intent: {e}")));
        }
    }
    Ok(None)
}

fn load_sound(path: &Path, mfcc: &MfccConfig) -> Result<(MfccMatrix, Option<WaveSignal>), EnvError> {
    let wave = load_wav(path)?;
    let (l, m) = mfcc.shape();
    if wave.samples.is_empty() {
        return Ok((MfccMatrix::zero(l, m), None));
    }
    Ok((compute_mfcc(&wave, mfcc)?, Some(wave)))
}

/// Load a labeled split. Every pair must carry an intent in its meta record.
pub fn load_pairs(root: &Path, split: &str, mfcc: &MfccConfig, empty_intent: usize) -> Result<Vec<VisualAudioPair>, EnvError> {
    let dir = split_dir(root, split);
    let mut pairs = Vec::new();
    for i in indices_in(&dir)? {
        let image = read_png(&dir.join(format!("{i:05}.png")))?;
        let (sound, wave) = load_sound(&dir.join(format!("{i:05}.wav")), mfcc)?;
        let meta_path = dir.join(format!("{i:05}.meta"));
        let intent = read_meta_intent(&meta_path)?
            .ok_or_else(|| ds_err(&meta_path, "labeled split is missing an intent key"))?;
        pairs.push(VisualAudioPair::new(image, sound, wave, intent, empty_intent));
    }
    Ok(pairs)
}

/// Load a split without reading intent IDs even if present.
pub fn load_unlabeled_pairs(root: &Path, split: &str, mfcc: &MfccConfig) -> Result<Vec<UnlabeledPair>, EnvError> {
    let dir = split_dir(root, split);
    let mut pairs = Vec::new();
    for i in indices_in(&dir)? {
        let image = read_png(&dir.join(format!("{i:05}.png")))?;
        let (sound, wave) = load_sound(&dir.join(format!("{i:05}.wav")), mfcc)?;
        pairs.push(UnlabeledPair { image, sound, wave });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SynthConfig;
    use crate::envsim::env::{DomainParams, EnvConfig};
    use crate::envsim::pairs::collect_pairs;

    #[test]
    fn roundtrip_preserves_pairs_bit_exactly() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let mfcc = MfccConfig { target_frames: 20, ..MfccConfig::default() };
        let pairs = collect_pairs(&cfg, &domain, &SynthConfig::default(), &mfcc, 25, 31).unwrap();
        let root = std::env::temp_dir().join(format!("soundsight-ds-{}", std::process::id()));
        write_pairs(&root, "train", &pairs, true).unwrap();
        let loaded = load_pairs(&root, "train", &mfcc, cfg.empty_intent()).unwrap();
        assert_eq!(loaded.len(), pairs.len());
        for (a, b) in pairs.iter().zip(&loaded) {
            assert_eq!(a.image.data, b.image.data, "png roundtrip must be byte-exact");
            assert_eq!(a.intent, b.intent);
            // synthesized samples are PCM-grid aligned, so MFCCs match exactly
            assert_eq!(a.sound, b.sound);
        }
        // unlabeled view of the same split never exposes intents
        let unlabeled = load_unlabeled_pairs(&root, "train", &mfcc).unwrap();
        for (a, b) in pairs.iter().zip(&unlabeled) {
            assert_eq!(a.intent == cfg.empty_intent(), b.is_empty_intent());
        }
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn unlabeled_split_has_no_intent_keys() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let mfcc = MfccConfig { target_frames: 20, ..MfccConfig::default() };
        let pairs = collect_pairs(&cfg, &domain, &SynthConfig::default(), &mfcc, 10, 8).unwrap();
        let root = std::env::temp_dir().join(format!("soundsight-ds-u-{}", std::process::id()));
        write_pairs(&root, "shifted", &pairs, false).unwrap();
        assert!(load_pairs(&root, "shifted", &mfcc, cfg.empty_intent()).is_err());
        let unlabeled = load_unlabeled_pairs(&root, "shifted", &mfcc).unwrap();
        assert_eq!(unlabeled.len(), 10);
        std::fs::remove_dir_all(&root).ok();
    }
}
